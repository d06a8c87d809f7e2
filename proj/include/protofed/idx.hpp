#pragma once

#include <zlib.h>

#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "protofed/errors.hpp"
#include "protofed/tensor.hpp"

namespace protofed {

// A labelled 28x28 grayscale benchmark split. Pixels live in [0,1].
struct Dataset {
    Tensor<float> images;     // N x 1 x H x W
    std::vector<int> labels;  // length N, values in [0, class_count)
    int class_count = 0;

    std::size_t size() const { return labels.size(); }
};

namespace detail {

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

inline bool has_gz_suffix(const std::string& path) {
    return path.size() > 3 && path.compare(path.size() - 3, 3, ".gz") == 0;
}

// Reads the whole file; transparently inflates when the name ends in .gz.
inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
    if (has_gz_suffix(path)) {
        gzFile f = gzopen(path.c_str(), "rb");
        if (!f) throw IoError("cannot open '" + path + "'");
        std::vector<std::uint8_t> out;
        std::uint8_t buf[1 << 16];
        int n;
        while ((n = gzread(f, buf, sizeof buf)) > 0) out.insert(out.end(), buf, buf + n);
        const bool bad = n < 0;
        gzclose(f);
        if (bad) throw ParseError("gzip stream in '" + path + "' is corrupt");
        return out;
    }
    std::FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) throw IoError("cannot open '" + path + "'");
    std::fseek(f, 0, SEEK_END);
    const long len = std::ftell(f);
    std::fseek(f, 0, SEEK_SET);
    std::vector<std::uint8_t> out(len > 0 ? static_cast<std::size_t>(len) : 0);
    if (!out.empty() && std::fread(out.data(), 1, out.size(), f) != out.size()) {
        std::fclose(f);
        throw IoError("short read on '" + path + "'");
    }
    std::fclose(f);
    return out;
}

inline std::uint32_t read_be32(const std::vector<std::uint8_t>& b, std::size_t off, const std::string& path) {
    if (off + 4 > b.size()) throw ParseError("'" + path + "' truncated inside header");
    return (std::uint32_t(b[off]) << 24) | (std::uint32_t(b[off + 1]) << 16) | (std::uint32_t(b[off + 2]) << 8) |
           std::uint32_t(b[off + 3]);
}

inline std::string hex32(std::uint32_t v) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "0x%08x", v);
    return buf;
}

}  // namespace detail

// Parses an IDX image/label file pair (optionally gzip-compressed, detected
// by the .gz suffix). Pixel bytes are scaled by 1/255.
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
    using namespace detail;

    const std::vector<std::uint8_t> img = read_file_bytes(images_path);
    const std::uint32_t img_magic = read_be32(img, 0, images_path);
    if (img_magic != kIdxImagesMagic)
        throw ParseError("'" + images_path + "' has magic " + hex32(img_magic) + ", expected image magic " +
                         hex32(kIdxImagesMagic));
    const std::uint32_t n_img = read_be32(img, 4, images_path);
    const std::uint32_t rows = read_be32(img, 8, images_path);
    const std::uint32_t cols = read_be32(img, 12, images_path);
    if (n_img == 0 || rows == 0 || cols == 0) throw ParseError("'" + images_path + "' declares an empty image grid");
    const std::size_t expected = 16 + std::size_t(n_img) * rows * cols;
    if (img.size() < expected)
        throw ParseError("'" + images_path + "' truncated: header promises " + std::to_string(expected) +
                         " bytes, file has " + std::to_string(img.size()));

    const std::vector<std::uint8_t> lab = read_file_bytes(labels_path);
    const std::uint32_t lab_magic = read_be32(lab, 0, labels_path);
    if (lab_magic != kIdxLabelsMagic)
        throw ParseError("'" + labels_path + "' has magic " + hex32(lab_magic) + ", expected label magic " +
                         hex32(kIdxLabelsMagic));
    const std::uint32_t n_lab = read_be32(lab, 4, labels_path);
    if (n_lab != n_img)
        throw ParseError("count mismatch: " + std::to_string(n_img) + " images in '" + images_path + "' vs " +
                         std::to_string(n_lab) + " labels in '" + labels_path + "'");
    if (lab.size() < 8 + std::size_t(n_lab))
        throw ParseError("'" + labels_path + "' truncated: header promises " + std::to_string(8 + std::size_t(n_lab)) +
                         " bytes, file has " + std::to_string(lab.size()));

    Dataset ds;
    ds.images = Tensor<float>({n_img, 1, rows, cols});
    float scale[256];  // correctly rounded b/255 for every byte value
    for (int b = 0; b < 256; ++b) scale[b] = static_cast<float>(b) / 255.0f;
    for (std::size_t i = 0; i < std::size_t(n_img) * rows * cols; ++i) ds.images[i] = scale[img[16 + i]];

    ds.labels.resize(n_lab);
    int max_label = 0;
    for (std::size_t i = 0; i < n_lab; ++i) {
        ds.labels[i] = lab[8 + i];
        max_label = std::max(max_label, ds.labels[i]);
    }
    ds.class_count = max_label + 1;
    return ds;
}

}  // namespace protofed
