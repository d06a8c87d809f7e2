#include <chrono>
#include <cstdio>

#include "protofed/nn.hpp"

using namespace protofed;

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// MACs for one sample's forward pass.
double forward_macs(const ModelArch& a) {
    const double c1 = 1.0 * a.conv1_out * a.conv1_oh() * a.conv1_ow() * a.in_ch * a.conv1_k * a.conv1_k;
    const double c2 = 1.0 * a.conv2_out * a.conv2_oh() * a.conv2_ow() * a.conv1_out * a.conv2_k * a.conv2_k;
    const double f1 = 1.0 * a.embed_dim * a.fc1_inputs();
    const double f2 = 1.0 * a.class_count * a.embed_dim;
    return c1 + c2 + f1 + f2;
}

}  // namespace

int main() {
    const ModelArch arch = ModelArch::mnist_default();
    const auto params = init_params<float>(arch, 1);
    Rng rng(2);

    const std::size_t n_fwd = 4000;
    Tensor<float> batch({n_fwd, 1, 28, 28});
    for (auto& v : batch.data) v = static_cast<float>(rng.uniform());

    {
        detail::Activations<float> act(arch);
        const std::size_t px = arch.in_h * arch.in_w;
        const auto t0 = std::chrono::steady_clock::now();
        for (std::size_t s = 0; s < n_fwd; ++s) detail::forward_sample(params, batch.ptr() + s * px, act);
        const double dt = seconds_since(t0);
        std::printf("forward : %7.1f us/sample  %6.2f GMAC/s\n", 1e6 * dt / n_fwd,
                    forward_macs(arch) * n_fwd / dt / 1e9);
    }

    {
        const std::size_t b = 8, n_batches = 250;
        std::vector<int> labels(b);
        Tensor<float> mini({b, 1, 28, 28});
        const std::size_t px = arch.in_h * arch.in_w;
        const auto t0 = std::chrono::steady_clock::now();
        double sink = 0.0;
        for (std::size_t i = 0; i < n_batches; ++i) {
            std::copy_n(batch.ptr() + (i * b % (n_fwd - b)) * px, b * px, mini.ptr());
            for (std::size_t s = 0; s < b; ++s) labels[s] = static_cast<int>((i + s) % 10);
            sink += loss_and_grads(params, mini, labels).loss;
        }
        const double dt = seconds_since(t0);
        const double macs = forward_macs(arch) * 3.0 * b * n_batches;  // fwd + ~2x fwd for bwd
        std::printf("fwd+bwd : %7.1f us/sample  %6.2f GMAC/s (approx)  [sink %.3f]\n",
                    1e6 * dt / (b * n_batches), macs / dt / 1e9, sink / n_batches);
    }
    return 0;
}
