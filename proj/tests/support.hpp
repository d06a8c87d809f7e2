#pragma once

// Shared helpers for the test suites: independent oracles, fixture builders,
// and dataset location. Everything here is test-only code.

#include <unistd.h>

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "protofed/data.hpp"
#include "protofed/nn.hpp"
#include "protofed/rng.hpp"
#include "protofed/tensor.hpp"

namespace testsupport {

// Scratch directory for fixture files, removed when the fixture goes away.
struct TempDir {
    std::filesystem::path dir;

    explicit TempDir(const std::string& tag) {
        static int counter = 0;
        dir = std::filesystem::temp_directory_path() /
              ("protofed_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::create_directories(dir);
    }
    ~TempDir() { std::filesystem::remove_all(dir); }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    std::string path(const std::string& name) const { return (dir / name).string(); }

    std::string write_text(const std::string& name, const std::string& text) const {
        const auto p = dir / name;
        std::ofstream f(p);
        f << text;
        return p.string();
    }

    std::string write_bytes(const std::string& name, const std::vector<std::uint8_t>& bytes) const {
        const auto p = dir / name;
        std::ofstream f(p, std::ios::binary);
        f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        return p.string();
    }
};

inline void idx_push_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v >> 24));
    out.push_back(static_cast<std::uint8_t>((v >> 16) & 0xff));
    out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xff));
    out.push_back(static_cast<std::uint8_t>(v & 0xff));
}

struct IdxFixture {
    std::string train_images, train_labels, test_images, test_labels;
};

// Synthetic IDX pair in the byte format the loader reads: each label places a
// bright block on a noisy background, so a few SGD steps are enough to beat
// chance. The first `classes` samples carry labels 0..classes-1 to pin the
// class count. Deterministic in the seed.
inline void write_synthetic_idx(const TempDir& tmp, const std::string& stem, std::size_t n, int classes,
                                std::uint64_t seed, std::string& images_path, std::string& labels_path,
                                std::size_t rows = 28, std::size_t cols = 28) {
    protofed::Rng rng(seed);
    std::vector<std::uint8_t> labels(n);
    std::vector<std::uint8_t> pixels(n * rows * cols);
    for (std::size_t s = 0; s < n; ++s) {
        const int y = s < static_cast<std::size_t>(classes)
                          ? static_cast<int>(s)
                          : static_cast<int>(rng.below(static_cast<std::uint64_t>(classes)));
        labels[s] = static_cast<std::uint8_t>(y);
        std::uint8_t* img = pixels.data() + s * rows * cols;
        for (std::size_t i = 0; i < rows * cols; ++i) img[i] = static_cast<std::uint8_t>(rng.below(13));
        if (rows == 28 && cols == 28) {
            const std::size_t bx = 2 + 2 * (static_cast<std::size_t>(y) % 5);
            const std::size_t by = 4 + 8 * (static_cast<std::size_t>(y) / 5);
            for (std::size_t dy = 0; dy < 8; ++dy)
                for (std::size_t dx = 0; dx < 6; ++dx)
                    img[(by + dy) * 28 + bx + dx] = static_cast<std::uint8_t>(180 + rng.below(76));
        }
    }

    std::vector<std::uint8_t> image_file;
    idx_push_be32(image_file, 0x00000803);
    idx_push_be32(image_file, static_cast<std::uint32_t>(n));
    idx_push_be32(image_file, static_cast<std::uint32_t>(rows));
    idx_push_be32(image_file, static_cast<std::uint32_t>(cols));
    image_file.insert(image_file.end(), pixels.begin(), pixels.end());

    std::vector<std::uint8_t> label_file;
    idx_push_be32(label_file, 0x00000801);
    idx_push_be32(label_file, static_cast<std::uint32_t>(n));
    label_file.insert(label_file.end(), labels.begin(), labels.end());

    images_path = tmp.write_bytes(stem + "-images-idx3-ubyte", image_file);
    labels_path = tmp.write_bytes(stem + "-labels-idx1-ubyte", label_file);
}

inline IdxFixture make_dataset_files(const TempDir& tmp, std::size_t train_n, std::size_t test_n, int classes,
                                     std::uint64_t seed) {
    IdxFixture fx;
    write_synthetic_idx(tmp, "train", train_n, classes, protofed::mix_seed(seed, 1), fx.train_images,
                        fx.train_labels);
    write_synthetic_idx(tmp, "test", test_n, classes, protofed::mix_seed(seed, 2), fx.test_images,
                        fx.test_labels);
    return fx;
}

// MNIST IDX files are looked up via PROTOFED_MNIST_DIR, falling back to a
// conventional local path. Tests that need them fail loudly when absent.
inline std::string mnist_dir() {
    if (const char* env = std::getenv("PROTOFED_MNIST_DIR")) return env;
    return "/root/data/mnist";
}

inline bool mnist_available() {
    namespace fs = std::filesystem;
    const fs::path dir = mnist_dir();
    return fs::exists(dir / "train-images-idx3-ubyte") && fs::exists(dir / "train-labels-idx1-ubyte") &&
           fs::exists(dir / "t10k-images-idx3-ubyte") && fs::exists(dir / "t10k-labels-idx1-ubyte");
}

// Random params whose scale roughly matches the fan-in init, for oracle draws.
template <typename T>
protofed::ModelParams<T> random_params(const protofed::ModelArch& arch, std::uint64_t seed, double scale = 1.0) {
    protofed::ModelParams<T> m = protofed::init_params<T>(arch, seed);
    protofed::Rng rng(protofed::mix_seed(seed, 0xb1a5));
    for (auto* t : m.tensors()) {
        for (T& v : t->data) v = static_cast<T>(static_cast<double>(v) * scale + 0.01 * rng.normal());
    }
    return m;
}

template <typename T>
protofed::Tensor<T> random_batch(const protofed::ModelArch& arch, std::size_t b_n, std::uint64_t seed) {
    protofed::Tensor<T> batch({b_n, arch.in_ch, arch.in_h, arch.in_w});
    protofed::Rng rng(seed);
    for (T& v : batch.data) v = static_cast<T>(rng.uniform());
    return batch;
}

inline std::vector<int> random_labels(std::size_t n, int class_count, std::uint64_t seed) {
    protofed::Rng rng(seed);
    std::vector<int> labels(n);
    for (auto& y : labels) y = static_cast<int>(rng.below(static_cast<std::uint64_t>(class_count)));
    return labels;
}

// Synthetic linearly-separable-ish dataset: class k gets a bright kxk-ish
// block plus noise. Good enough for partition and training smoke tests.
inline protofed::Dataset synthetic_dataset(std::size_t n, int class_count, std::uint64_t seed) {
    protofed::Dataset ds;
    ds.class_count = class_count;
    ds.images = protofed::Tensor<float>({n, 1, 28, 28});
    ds.labels.resize(n);
    protofed::Rng rng(seed);
    for (std::size_t s = 0; s < n; ++s) {
        const int y = static_cast<int>(rng.below(static_cast<std::uint64_t>(class_count)));
        ds.labels[s] = y;
        float* img = ds.images.ptr() + s * 784;
        for (std::size_t i = 0; i < 784; ++i) img[i] = static_cast<float>(0.05 * rng.uniform());
        const std::size_t bx = 2 + 2 * (static_cast<std::size_t>(y) % 5);
        const std::size_t by = 4 + 8 * (static_cast<std::size_t>(y) / 5);
        for (std::size_t dy = 0; dy < 8; ++dy)
            for (std::size_t dx = 0; dx < 6; ++dx)
                img[(by + dy) * 28 + bx + dx] = static_cast<float>(0.7 + 0.3 * rng.uniform());
    }
    return ds;
}

}  // namespace testsupport
