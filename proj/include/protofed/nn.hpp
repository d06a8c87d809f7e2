#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "protofed/errors.hpp"
#include "protofed/rng.hpp"
#include "protofed/tensor.hpp"

namespace protofed {

// The fixed 4-layer CNN: two valid (unpadded) convolutions with rectifier and
// 2x2 max-pool, one hidden fully connected layer whose rectified output is the
// embedding, and a linear classifier head on top.
struct ModelArch {
    std::size_t in_ch = 1;
    std::size_t in_h = 28;
    std::size_t in_w = 28;
    std::size_t conv1_out = 16;
    std::size_t conv1_k = 5;
    std::size_t conv2_out = 32;
    std::size_t conv2_k = 5;
    std::size_t pool = 2;
    std::size_t embed_dim = 64;
    std::size_t class_count = 10;

    std::size_t conv1_oh() const { return in_h - conv1_k + 1; }
    std::size_t conv1_ow() const { return in_w - conv1_k + 1; }
    std::size_t pool1_h() const { return conv1_oh() / pool; }
    std::size_t pool1_w() const { return conv1_ow() / pool; }
    std::size_t conv2_oh() const { return pool1_h() - conv2_k + 1; }
    std::size_t conv2_ow() const { return pool1_w() - conv2_k + 1; }
    std::size_t pool2_h() const { return conv2_oh() / pool; }
    std::size_t pool2_w() const { return conv2_ow() / pool; }
    std::size_t fc1_inputs() const { return conv2_out * pool2_h() * pool2_w(); }

    void validate() const {
        if (in_ch == 0 || in_h == 0 || in_w == 0) throw InvalidInput("arch: input dims must be positive");
        if (conv1_out == 0 || conv2_out == 0) throw InvalidInput("arch: channel counts must be positive");
        if (embed_dim == 0) throw InvalidInput("arch: embedding dimension must be positive");
        if (class_count == 0) throw InvalidInput("arch: class count must be positive");
        if (pool < 1) throw InvalidInput("arch: pool size must be >= 1");
        if (in_h < conv1_k || in_w < conv1_k) throw InvalidInput("arch: conv1 kernel larger than input");
        if (conv1_oh() % pool != 0 || conv1_ow() % pool != 0)
            throw InvalidInput("arch: conv1 output not divisible by pool");
        if (pool1_h() < conv2_k || pool1_w() < conv2_k) throw InvalidInput("arch: conv2 kernel larger than its input");
        if (conv2_oh() % pool != 0 || conv2_ow() % pool != 0)
            throw InvalidInput("arch: conv2 output not divisible by pool");
    }

    // 16/32 channels, 64-d embedding, 10 classes: the experiment default.
    static ModelArch mnist_default() { return ModelArch{}; }

    // 4/8 channels, 8-d embedding: small enough for exhaustive gradient checks.
    static ModelArch reduced() {
        ModelArch a;
        a.conv1_out = 4;
        a.conv2_out = 8;
        a.embed_dim = 8;
        return a;
    }

    bool operator==(const ModelArch&) const = default;
};

// Ordered parameter tensors: conv1, conv2, fc1, fc2 (weight then bias each).
// Tensors 0..5 form the feature extractor, 6..7 the decision head.
template <typename T = float>
struct ModelParams {
    ModelArch arch;
    Tensor<T> conv1_w, conv1_b;
    Tensor<T> conv2_w, conv2_b;
    Tensor<T> fc1_w, fc1_b;
    Tensor<T> fc2_w, fc2_b;

    ModelParams() = default;

    explicit ModelParams(const ModelArch& a)
        : arch(a),
          conv1_w({a.conv1_out, a.in_ch, a.conv1_k, a.conv1_k}),
          conv1_b({a.conv1_out}),
          conv2_w({a.conv2_out, a.conv1_out, a.conv2_k, a.conv2_k}),
          conv2_b({a.conv2_out}),
          fc1_w({a.embed_dim, a.fc1_inputs()}),
          fc1_b({a.embed_dim}),
          fc2_w({a.class_count, a.embed_dim}),
          fc2_b({a.class_count}) {}

    static constexpr std::size_t tensor_count = 8;

    std::array<Tensor<T>*, tensor_count> tensors() {
        return {&conv1_w, &conv1_b, &conv2_w, &conv2_b, &fc1_w, &fc1_b, &fc2_w, &fc2_b};
    }
    std::array<const Tensor<T>*, tensor_count> tensors() const {
        return {&conv1_w, &conv1_b, &conv2_w, &conv2_b, &fc1_w, &fc1_b, &fc2_w, &fc2_b};
    }

    static const char* tensor_name(std::size_t i) {
        static constexpr const char* names[] = {"conv1_w", "conv1_b", "conv2_w", "conv2_b",
                                                "fc1_w",   "fc1_b",   "fc2_w",   "fc2_b"};
        return names[i];
    }

    // First tensor index of the decision head; everything below is f_e.
    static constexpr std::size_t head_start = 6;

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto* t : tensors()) n += t->numel();
        return n;
    }

    bool congruent_with(const ModelParams& other) const {
        if (!(arch == other.arch)) return false;
        auto a = tensors();
        auto b = other.tensors();
        for (std::size_t i = 0; i < tensor_count; ++i) {
            if (!a[i]->same_shape(*b[i])) return false;
        }
        return true;
    }

    bool all_finite() const {
        for (const auto* t : tensors()) {
            if (!t->all_finite()) return false;
        }
        return true;
    }
};

// Gradients mirror the parameter layout exactly.
template <typename T = float>
using Gradients = ModelParams<T>;

namespace detail {

// Fixed-size row kernel: one output row is accumulated in registers across
// every (ic, ky, kx) tap and stored once. K and OW compile-time so the inner
// loops fully unroll and vectorize. Per output element the taps apply in
// (ic, ky, kx) order, the same order as the generic path.
template <typename T, std::size_t K, std::size_t OW>
void conv_rows_fixed(const T* in, std::size_t ic_n, std::size_t ih, std::size_t iw, const T* w, std::size_t oc_n,
                     const T* b, T* out) {
    const std::size_t oh = ih - K + 1;
    for (std::size_t oc = 0; oc < oc_n; ++oc) {
        T* plane = out + oc * oh * OW;
        const T* w_oc = w + oc * ic_n * K * K;
        for (std::size_t oy = 0; oy < oh; ++oy) {
            alignas(64) T acc[OW];
            const T bias = b ? b[oc] : T(0);
            for (std::size_t ox = 0; ox < OW; ++ox) acc[ox] = bias;
            for (std::size_t ic = 0; ic < ic_n; ++ic) {
                const T* in_base = in + ic * ih * iw + oy * iw;
                const T* w_base = w_oc + ic * K * K;
                for (std::size_t ky = 0; ky < K; ++ky) {
                    const T* row = in_base + ky * iw;
                    const T* wr = w_base + ky * K;
                    for (std::size_t kx = 0; kx < K; ++kx) {
                        const T wv = wr[kx];
                        for (std::size_t ox = 0; ox < OW; ++ox) acc[ox] += wv * row[kx + ox];
                    }
                }
            }
            T* out_row = plane + oy * OW;
            for (std::size_t ox = 0; ox < OW; ++ox) out_row[ox] = acc[ox];
        }
    }
}

template <typename T>
void conv_rows_generic(const T* in, std::size_t ic_n, std::size_t ih, std::size_t iw, const T* w, std::size_t oc_n,
                       std::size_t k, const T* b, T* out) {
    const std::size_t oh = ih - k + 1;
    const std::size_t ow = iw - k + 1;
    for (std::size_t oc = 0; oc < oc_n; ++oc) {
        T* plane = out + oc * oh * ow;
        std::fill(plane, plane + oh * ow, b ? b[oc] : T(0));
        for (std::size_t ic = 0; ic < ic_n; ++ic) {
            const T* in_plane = in + ic * ih * iw;
            const T* w_base = w + ((oc * ic_n + ic) * k) * k;
            for (std::size_t ky = 0; ky < k; ++ky) {
                const T* w_row = w_base + ky * k;
                for (std::size_t oy = 0; oy < oh; ++oy) {
                    const T* in_row = in_plane + (oy + ky) * iw;
                    T* out_row = plane + oy * ow;
                    for (std::size_t kx = 0; kx < k; ++kx) {
                        const T wv = w_row[kx];
                        const T* src = in_row + kx;
                        for (std::size_t ox = 0; ox < ow; ++ox) out_row[ox] += wv * src[ox];
                    }
                }
            }
        }
    }
}

// out[oc] = b[oc] broadcast over the output plane, then accumulate the valid
// cross-correlation.
template <typename T>
void conv2d_valid(const T* in, std::size_t ic_n, std::size_t ih, std::size_t iw, const T* w, std::size_t oc_n,
                  std::size_t k, const T* b, T* out) {
    const std::size_t ow = iw - k + 1;
    if (k == 5 && ow == 24) return conv_rows_fixed<T, 5, 24>(in, ic_n, ih, iw, w, oc_n, b, out);
    if (k == 5 && ow == 12) return conv_rows_fixed<T, 5, 12>(in, ic_n, ih, iw, w, oc_n, b, out);
    if (k == 5 && ow == 8) return conv_rows_fixed<T, 5, 8>(in, ic_n, ih, iw, w, oc_n, b, out);
    conv_rows_generic(in, ic_n, ih, iw, w, oc_n, k, b, out);
}

// Weight gradient with a lane accumulator per (ky, kx) tap: the whole plane
// is swept once with d_row loaded per output row, sums folded per column
// lane, and the K*K dots reduced in fixed ascending order at the end.
template <typename T, std::size_t K, std::size_t OW>
void conv_dw_fixed(const T* in, std::size_t ic_n, std::size_t ih, std::size_t iw, std::size_t oc_n, const T* d_out,
                   T* d_w) {
    const std::size_t oh = ih - K + 1;
    for (std::size_t oc = 0; oc < oc_n; ++oc) {
        const T* d_plane = d_out + oc * oh * OW;
        for (std::size_t ic = 0; ic < ic_n; ++ic) {
            const T* in_plane = in + ic * ih * iw;
            alignas(64) T acc[K * K][OW] = {};
            for (std::size_t oy = 0; oy < oh; ++oy) {
                const T* d_row = d_plane + oy * OW;
                for (std::size_t ky = 0; ky < K; ++ky) {
                    const T* in_row = in_plane + (oy + ky) * iw;
                    for (std::size_t kx = 0; kx < K; ++kx) {
                        T* lane = acc[ky * K + kx];
                        const T* src = in_row + kx;
                        for (std::size_t ox = 0; ox < OW; ++ox) lane[ox] += d_row[ox] * src[ox];
                    }
                }
            }
            T* dw_base = d_w + ((oc * ic_n + ic) * K) * K;
            for (std::size_t t = 0; t < K * K; ++t) {
                T dot = T(0);
                for (std::size_t ox = 0; ox < OW; ++ox) dot += acc[t][ox];
                dw_base[t] += dot;
            }
        }
    }
}

// Scratch for the fast input-gradient path: d_out planes copied into a
// zero-bordered pad and the kernel flipped/transposed to [ic][oc][K][K], so
// d_in falls out as a plain valid convolution over the pad.
template <typename T>
struct ConvBackScratch {
    std::size_t pad_h = 0, pad_w = 0, oh = 0, ow = 0;
    std::vector<T> pad;
    std::vector<T> wflip;

    void prepare(std::size_t ic_n, std::size_t oc_n, std::size_t k, std::size_t oh_, std::size_t ow_) {
        const std::size_t ph = oh_ + 2 * (k - 1);
        const std::size_t pw = ow_ + 2 * (k - 1);
        if (oh == oh_ && ow == ow_ && pad.size() == oc_n * ph * pw && wflip.size() == ic_n * oc_n * k * k)
            return;  // interior rows get overwritten, borders are already zero
        oh = oh_;
        ow = ow_;
        pad_h = ph;
        pad_w = pw;
        pad.assign(oc_n * pad_h * pad_w, T(0));
        wflip.assign(ic_n * oc_n * k * k, T(0));
    }
};

template <typename T>
void conv_din_padded(const T* w, std::size_t ic_n, std::size_t oc_n, std::size_t k, const T* d_out, T* d_in,
                     ConvBackScratch<T>& s) {
    for (std::size_t oc = 0; oc < oc_n; ++oc) {
        const T* d_plane = d_out + oc * s.oh * s.ow;
        T* pad_plane = s.pad.data() + oc * s.pad_h * s.pad_w;
        for (std::size_t oy = 0; oy < s.oh; ++oy)
            std::copy_n(d_plane + oy * s.ow, s.ow, pad_plane + (oy + k - 1) * s.pad_w + (k - 1));
    }
    for (std::size_t ic = 0; ic < ic_n; ++ic) {
        for (std::size_t oc = 0; oc < oc_n; ++oc) {
            const T* src = w + ((oc * ic_n + ic) * k) * k;
            T* dst = s.wflip.data() + ((ic * oc_n + oc) * k) * k;
            for (std::size_t t = 0; t < k * k; ++t) dst[t] = src[k * k - 1 - t];
        }
    }
    conv2d_valid(s.pad.data(), oc_n, s.pad_h, s.pad_w, s.wflip.data(), ic_n, k, static_cast<const T*>(nullptr),
                 d_in);
}

template <typename T>
void conv_backward_generic(const T* in, std::size_t ic_n, std::size_t ih, std::size_t iw, const T* w,
                           std::size_t oc_n, std::size_t k, const T* d_out, T* d_w, T* d_in) {
    const std::size_t oh = ih - k + 1;
    const std::size_t ow = iw - k + 1;
    for (std::size_t oc = 0; oc < oc_n; ++oc) {
        const T* d_plane = d_out + oc * oh * ow;
        for (std::size_t ic = 0; ic < ic_n; ++ic) {
            const T* in_plane = in + ic * ih * iw;
            T* din_plane = d_in ? d_in + ic * ih * iw : nullptr;
            T* dw_base = d_w + ((oc * ic_n + ic) * k) * k;
            const T* w_base = w + ((oc * ic_n + ic) * k) * k;
            for (std::size_t ky = 0; ky < k; ++ky) {
                T* dw_row = dw_base + ky * k;
                const T* w_row = w_base + ky * k;
                for (std::size_t oy = 0; oy < oh; ++oy) {
                    const T* d_row = d_plane + oy * ow;
                    const T* in_row = in_plane + (oy + ky) * iw;
                    for (std::size_t kx = 0; kx < k; ++kx) {
                        T dot = T(0);
                        const T* src = in_row + kx;
                        for (std::size_t ox = 0; ox < ow; ++ox) dot += d_row[ox] * src[ox];
                        dw_row[kx] += dot;
                    }
                    if (din_plane) {
                        T* din_row = din_plane + (oy + ky) * iw;
                        for (std::size_t kx = 0; kx < k; ++kx) {
                            const T wv = w_row[kx];
                            T* dst = din_row + kx;
                            for (std::size_t ox = 0; ox < ow; ++ox) dst[ox] += wv * d_row[ox];
                        }
                    }
                }
            }
        }
    }
}

// Accumulates dW/dB for one sample and, when d_in is non-null, the gradient
// w.r.t. the layer input (d_in must be zeroed by the caller; the padded fast
// path overwrites it instead, which on zeroed memory is the same thing).
template <typename T>
void conv2d_backward(const T* in, std::size_t ic_n, std::size_t ih, std::size_t iw, const T* w, std::size_t oc_n,
                     std::size_t k, const T* d_out, T* d_w, T* d_b, T* d_in,
                     ConvBackScratch<T>* scratch = nullptr) {
    const std::size_t oh = ih - k + 1;
    const std::size_t ow = iw - k + 1;
    for (std::size_t oc = 0; oc < oc_n; ++oc) {
        const T* d_plane = d_out + oc * oh * ow;
        T acc = T(0);
        for (std::size_t i = 0; i < oh * ow; ++i) acc += d_plane[i];
        d_b[oc] += acc;
    }

    const bool fast_dw = (k == 5 && (ow == 24 || ow == 8));
    const bool fast_din = (d_in == nullptr) || (k == 5 && scratch != nullptr);
    if (fast_dw && fast_din) {
        if (ow == 24)
            conv_dw_fixed<T, 5, 24>(in, ic_n, ih, iw, oc_n, d_out, d_w);
        else
            conv_dw_fixed<T, 5, 8>(in, ic_n, ih, iw, oc_n, d_out, d_w);
        if (d_in) {
            scratch->prepare(ic_n, oc_n, k, oh, ow);
            conv_din_padded(w, ic_n, oc_n, k, d_out, d_in, *scratch);
        }
        return;
    }
    conv_backward_generic(in, ic_n, ih, iw, w, oc_n, k, d_out, d_w, d_in);
}

template <typename T>
void relu_inplace(T* p, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) p[i] = p[i] > T(0) ? p[i] : T(0);
}

// Zeroes gradient entries whose post-activation value is zero.
template <typename T>
void relu_backward(const T* act, T* grad, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
        if (act[i] <= T(0)) grad[i] = T(0);
    }
}

// 2x2 stride-2 max pool; ties resolve to the earliest window position.
template <typename T>
void maxpool2(const T* in, std::size_t c_n, std::size_t ih, std::size_t iw, T* out, std::uint8_t* arg) {
    const std::size_t oh = ih / 2;
    const std::size_t ow = iw / 2;
    for (std::size_t c = 0; c < c_n; ++c) {
        const T* plane = in + c * ih * iw;
        T* out_plane = out + c * oh * ow;
        std::uint8_t* arg_plane = arg + c * oh * ow;
        for (std::size_t oy = 0; oy < oh; ++oy) {
            for (std::size_t ox = 0; ox < ow; ++ox) {
                const T* base = plane + (2 * oy) * iw + 2 * ox;
                T best = base[0];
                std::uint8_t best_i = 0;
                const T cand[3] = {base[1], base[iw], base[iw + 1]};
                for (std::uint8_t i = 0; i < 3; ++i) {
                    if (cand[i] > best) {
                        best = cand[i];
                        best_i = static_cast<std::uint8_t>(i + 1);
                    }
                }
                out_plane[oy * ow + ox] = best;
                arg_plane[oy * ow + ox] = best_i;
            }
        }
    }
}

template <typename T>
void maxpool2_backward(const T* d_out, const std::uint8_t* arg, std::size_t c_n, std::size_t ih, std::size_t iw,
                       T* d_in) {
    const std::size_t oh = ih / 2;
    const std::size_t ow = iw / 2;
    std::fill(d_in, d_in + c_n * ih * iw, T(0));
    for (std::size_t c = 0; c < c_n; ++c) {
        const T* d_plane = d_out + c * oh * ow;
        const std::uint8_t* arg_plane = arg + c * oh * ow;
        T* din_plane = d_in + c * ih * iw;
        for (std::size_t oy = 0; oy < oh; ++oy) {
            for (std::size_t ox = 0; ox < ow; ++ox) {
                const std::uint8_t a = arg_plane[oy * ow + ox];
                const std::size_t y = 2 * oy + (a >> 1);
                const std::size_t x = 2 * ox + (a & 1);
                din_plane[y * iw + x] = d_plane[oy * ow + ox];
            }
        }
    }
}

template <typename T>
void fc_forward(const T* in, std::size_t in_n, const T* w, std::size_t out_n, const T* b, T* out) {
    constexpr std::size_t L = 16;  // independent partial sums, folded in fixed order
    for (std::size_t o = 0; o < out_n; ++o) {
        const T* w_row = w + o * in_n;
        alignas(64) T lane[L] = {};
        std::size_t i = 0;
        for (; i + L <= in_n; i += L)
            for (std::size_t j = 0; j < L; ++j) lane[j] += w_row[i + j] * in[i + j];
        T acc = b[o];
        for (std::size_t j = 0; j < L; ++j) acc += lane[j];
        for (; i < in_n; ++i) acc += w_row[i] * in[i];
        out[o] = acc;
    }
}

template <typename T>
void fc_backward(const T* d_out, const T* in, std::size_t in_n, const T* w, std::size_t out_n, T* d_w, T* d_b,
                 T* d_in) {
    if (d_in) std::fill(d_in, d_in + in_n, T(0));
    for (std::size_t o = 0; o < out_n; ++o) {
        const T g = d_out[o];
        d_b[o] += g;
        T* dw_row = d_w + o * in_n;
        const T* w_row = w + o * in_n;
        for (std::size_t i = 0; i < in_n; ++i) dw_row[i] += g * in[i];
        if (d_in) {
            for (std::size_t i = 0; i < in_n; ++i) d_in[i] += g * w_row[i];
        }
    }
}

// Per-sample forward state. Activations are stored post-rectifier, which is
// all the backward pass needs (mask and layer inputs).
template <typename T>
struct Activations {
    std::vector<T> c1, p1, c2, p2, embed, logits;
    std::vector<std::uint8_t> arg1, arg2;

    explicit Activations(const ModelArch& a)
        : c1(a.conv1_out * a.conv1_oh() * a.conv1_ow()),
          p1(a.conv1_out * a.pool1_h() * a.pool1_w()),
          c2(a.conv2_out * a.conv2_oh() * a.conv2_ow()),
          p2(a.fc1_inputs()),
          embed(a.embed_dim),
          logits(a.class_count),
          arg1(p1.size()),
          arg2(p2.size()) {}
};

template <typename T>
void forward_sample(const ModelParams<T>& m, const T* x, Activations<T>& act) {
    const ModelArch& a = m.arch;
    conv2d_valid(x, a.in_ch, a.in_h, a.in_w, m.conv1_w.ptr(), a.conv1_out, a.conv1_k, m.conv1_b.ptr(), act.c1.data());
    relu_inplace(act.c1.data(), act.c1.size());
    maxpool2(act.c1.data(), a.conv1_out, a.conv1_oh(), a.conv1_ow(), act.p1.data(), act.arg1.data());
    conv2d_valid(act.p1.data(), a.conv1_out, a.pool1_h(), a.pool1_w(), m.conv2_w.ptr(), a.conv2_out, a.conv2_k,
                 m.conv2_b.ptr(), act.c2.data());
    relu_inplace(act.c2.data(), act.c2.size());
    maxpool2(act.c2.data(), a.conv2_out, a.conv2_oh(), a.conv2_ow(), act.p2.data(), act.arg2.data());
    fc_forward(act.p2.data(), a.fc1_inputs(), m.fc1_w.ptr(), a.embed_dim, m.fc1_b.ptr(), act.embed.data());
    relu_inplace(act.embed.data(), act.embed.size());
    fc_forward(act.embed.data(), a.embed_dim, m.fc2_w.ptr(), a.class_count, m.fc2_b.ptr(), act.logits.data());
}

// Scratch gradient buffers for one sample's backward pass.
template <typename T>
struct BackwardScratch {
    ModelParams<T> grads;
    std::vector<T> d_embed, d_p2, d_c2, d_p1, d_c1;
    ConvBackScratch<T> conv2_back;

    explicit BackwardScratch(const ModelArch& a)
        : grads(a),
          d_embed(a.embed_dim),
          d_p2(a.fc1_inputs()),
          d_c2(a.conv2_out * a.conv2_oh() * a.conv2_ow()),
          d_p1(a.conv1_out * a.pool1_h() * a.pool1_w()),
          d_c1(a.conv1_out * a.conv1_oh() * a.conv1_ow()) {}

    void zero_grads() {
        for (auto* t : grads.tensors()) t->fill(T(0));
    }
};

template <typename T>
void backward_sample(const ModelParams<T>& m, const T* x, const Activations<T>& act, const T* d_logits,
                     BackwardScratch<T>& s) {
    const ModelArch& a = m.arch;
    fc_backward(d_logits, act.embed.data(), a.embed_dim, m.fc2_w.ptr(), a.class_count, s.grads.fc2_w.ptr(),
                s.grads.fc2_b.ptr(), s.d_embed.data());
    relu_backward(act.embed.data(), s.d_embed.data(), a.embed_dim);
    fc_backward(s.d_embed.data(), act.p2.data(), a.fc1_inputs(), m.fc1_w.ptr(), a.embed_dim, s.grads.fc1_w.ptr(),
                s.grads.fc1_b.ptr(), s.d_p2.data());
    maxpool2_backward(s.d_p2.data(), act.arg2.data(), a.conv2_out, a.conv2_oh(), a.conv2_ow(), s.d_c2.data());
    relu_backward(act.c2.data(), s.d_c2.data(), s.d_c2.size());
    std::fill(s.d_p1.begin(), s.d_p1.end(), T(0));
    conv2d_backward(act.p1.data(), a.conv1_out, a.pool1_h(), a.pool1_w(), m.conv2_w.ptr(), a.conv2_out, a.conv2_k,
                    s.d_c2.data(), s.grads.conv2_w.ptr(), s.grads.conv2_b.ptr(), s.d_p1.data(), &s.conv2_back);
    maxpool2_backward(s.d_p1.data(), act.arg1.data(), a.conv1_out, a.conv1_oh(), a.conv1_ow(), s.d_c1.data());
    relu_backward(act.c1.data(), s.d_c1.data(), s.d_c1.size());
    conv2d_backward(x, a.in_ch, a.in_h, a.in_w, m.conv1_w.ptr(), a.conv1_out, a.conv1_k, s.d_c1.data(),
                    s.grads.conv1_w.ptr(), s.grads.conv1_b.ptr(), static_cast<T*>(nullptr));
}

template <typename T>
void check_batch_shape(const ModelParams<T>& m, const Tensor<T>& batch) {
    const ModelArch& a = m.arch;
    if (batch.rank() != 4 || batch.dim(1) != a.in_ch || batch.dim(2) != a.in_h || batch.dim(3) != a.in_w)
        throw InvalidInput("batch shape does not match model input");
}

}  // namespace detail

// Seed-deterministic initialization: weights uniform in +-sqrt(1/fan_in),
// biases zero. Each tensor draws from its own derived stream so layouts can
// change without reshuffling unrelated layers.
template <typename T = float>
ModelParams<T> init_params(const ModelArch& arch, std::uint64_t seed) {
    arch.validate();
    ModelParams<T> m(arch);
    const std::size_t fan_in[ModelParams<T>::tensor_count] = {
        arch.in_ch * arch.conv1_k * arch.conv1_k,    0,
        arch.conv1_out * arch.conv2_k * arch.conv2_k, 0,
        arch.fc1_inputs(),                            0,
        arch.embed_dim,                               0,
    };
    auto tensors = m.tensors();
    for (std::size_t ti = 0; ti < ModelParams<T>::tensor_count; ++ti) {
        if (fan_in[ti] == 0) continue;  // bias stays zero
        Rng rng(mix_seed(seed, ti));
        const double bound = std::sqrt(1.0 / static_cast<double>(fan_in[ti]));
        for (T& v : tensors[ti]->data) v = static_cast<T>(rng.uniform(-bound, bound));
    }
    return m;
}

// Embedding f_e: post-rectifier output of fc1, shape B x d.
template <typename T>
Tensor<T> embed(const ModelParams<T>& m, const Tensor<T>& batch) {
    detail::check_batch_shape(m, batch);
    const std::size_t b_n = batch.dim(0);
    const std::size_t sample = batch.numel() / b_n;
    Tensor<T> out({b_n, m.arch.embed_dim});
    detail::Activations<T> act(m.arch);
    for (std::size_t s = 0; s < b_n; ++s) {
        detail::forward_sample(m, batch.ptr() + s * sample, act);
        std::copy(act.embed.begin(), act.embed.end(), out.ptr() + s * m.arch.embed_dim);
    }
    return out;
}

// Classifier head f_d applied to precomputed embeddings, shape B x C.
template <typename T>
Tensor<T> head_forward(const ModelParams<T>& m, const Tensor<T>& embeddings) {
    if (embeddings.rank() != 2 || embeddings.dim(1) != m.arch.embed_dim)
        throw InvalidInput("embedding shape does not match model");
    const std::size_t b_n = embeddings.dim(0);
    Tensor<T> out({b_n, m.arch.class_count});
    for (std::size_t s = 0; s < b_n; ++s) {
        detail::fc_forward(embeddings.ptr() + s * m.arch.embed_dim, m.arch.embed_dim, m.fc2_w.ptr(),
                           m.arch.class_count, m.fc2_b.ptr(), out.ptr() + s * m.arch.class_count);
    }
    return out;
}

// Full model F = f_d(f_e(x)): logits, shape B x C.
template <typename T>
Tensor<T> forward(const ModelParams<T>& m, const Tensor<T>& batch) {
    detail::check_batch_shape(m, batch);
    const std::size_t b_n = batch.dim(0);
    const std::size_t sample = batch.numel() / b_n;
    Tensor<T> out({b_n, m.arch.class_count});
    detail::Activations<T> act(m.arch);
    for (std::size_t s = 0; s < b_n; ++s) {
        detail::forward_sample(m, batch.ptr() + s * sample, act);
        std::copy(act.logits.begin(), act.logits.end(), out.ptr() + s * m.arch.class_count);
    }
    return out;
}

// One pass computing both views of the split model.
template <typename T>
struct ForwardResult {
    Tensor<T> embeddings;  // B x d
    Tensor<T> logits;      // B x C
};

template <typename T>
ForwardResult<T> forward_with_embedding(const ModelParams<T>& m, const Tensor<T>& batch) {
    detail::check_batch_shape(m, batch);
    const std::size_t b_n = batch.dim(0);
    const std::size_t sample = batch.numel() / b_n;
    ForwardResult<T> r{Tensor<T>({b_n, m.arch.embed_dim}), Tensor<T>({b_n, m.arch.class_count})};
    detail::Activations<T> act(m.arch);
    for (std::size_t s = 0; s < b_n; ++s) {
        detail::forward_sample(m, batch.ptr() + s * sample, act);
        std::copy(act.embed.begin(), act.embed.end(), r.embeddings.ptr() + s * m.arch.embed_dim);
        std::copy(act.logits.begin(), act.logits.end(), r.logits.ptr() + s * m.arch.class_count);
    }
    return r;
}

template <typename T>
struct LossAndGrads {
    double loss = 0.0;
    Gradients<T> grads;
};

// Mean cross-entropy over the batch plus its exact analytic gradient.
// Per-sample gradients are accumulated in 64-bit and divided by the batch
// size at the end, so duplicating every sample leaves the result unchanged.
template <typename T>
LossAndGrads<T> loss_and_grads(const ModelParams<T>& m, const Tensor<T>& batch, const std::vector<int>& labels) {
    detail::check_batch_shape(m, batch);
    const std::size_t b_n = batch.dim(0);
    if (labels.size() != b_n) throw InvalidInput("label count does not match batch rows");
    const int c_n = static_cast<int>(m.arch.class_count);
    for (int y : labels) {
        if (y < 0 || y >= c_n) throw InvalidInput("label out of range [0, C)");
    }

    const std::size_t sample = batch.numel() / b_n;
    detail::Activations<T> act(m.arch);
    detail::BackwardScratch<T> scratch(m.arch);

    LossAndGrads<T> result{0.0, Gradients<T>(m.arch)};
    auto out_tensors = result.grads.tensors();
    std::array<std::vector<double>, ModelParams<T>::tensor_count> acc;
    for (std::size_t ti = 0; ti < ModelParams<T>::tensor_count; ++ti) acc[ti].assign(out_tensors[ti]->numel(), 0.0);

    std::vector<T> d_logits(m.arch.class_count);
    double loss_sum = 0.0;
    for (std::size_t s = 0; s < b_n; ++s) {
        const T* x = batch.ptr() + s * sample;
        detail::forward_sample(m, x, act);

        // Stable log-sum-exp in double.
        double max_logit = static_cast<double>(act.logits[0]);
        for (std::size_t j = 1; j < act.logits.size(); ++j)
            max_logit = std::max(max_logit, static_cast<double>(act.logits[j]));
        double sum_exp = 0.0;
        for (std::size_t j = 0; j < act.logits.size(); ++j)
            sum_exp += std::exp(static_cast<double>(act.logits[j]) - max_logit);
        const double lse = max_logit + std::log(sum_exp);
        loss_sum += lse - static_cast<double>(act.logits[static_cast<std::size_t>(labels[s])]);

        for (std::size_t j = 0; j < act.logits.size(); ++j) {
            const double p = std::exp(static_cast<double>(act.logits[j]) - lse);
            d_logits[j] = static_cast<T>(p) - (static_cast<int>(j) == labels[s] ? T(1) : T(0));
        }

        scratch.zero_grads();
        detail::backward_sample(m, x, act, d_logits.data(), scratch);
        auto sample_grads = scratch.grads.tensors();
        for (std::size_t ti = 0; ti < ModelParams<T>::tensor_count; ++ti) {
            const Tensor<T>& g = *sample_grads[ti];
            std::vector<double>& a = acc[ti];
            for (std::size_t i = 0; i < g.numel(); ++i) a[i] += static_cast<double>(g[i]);
        }
    }

    const double inv_b = 1.0 / static_cast<double>(b_n);
    result.loss = loss_sum * inv_b;
    for (std::size_t ti = 0; ti < ModelParams<T>::tensor_count; ++ti) {
        Tensor<T>& g = *out_tensors[ti];
        const std::vector<double>& a = acc[ti];
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] = static_cast<T>(a[i] * inv_b);
    }
    return result;
}

namespace detail {

// Shared update kernel so the pure op and the in-place training loop are the
// same compiled arithmetic.
template <typename T>
void sgd_apply(ModelParams<T>& params, const Gradients<T>& grads, T lr) {
    auto p = params.tensors();
    auto g = grads.tensors();
    for (std::size_t ti = 0; ti < ModelParams<T>::tensor_count; ++ti) {
        T* pv = p[ti]->ptr();
        const T* gv = g[ti]->ptr();
        const std::size_t n = p[ti]->numel();
        for (std::size_t i = 0; i < n; ++i) pv[i] = pv[i] - lr * gv[i];
    }
}

}  // namespace detail

// Plain SGD: p <- p - lr * g.
template <typename T>
ModelParams<T> sgd_step(const ModelParams<T>& params, const Gradients<T>& grads, T lr) {
    if (!params.congruent_with(grads)) throw InvalidInput("gradient shapes do not match parameters");
    if (!(lr >= T(0))) throw InvalidInput("learning rate must be >= 0");
    ModelParams<T> out = params;
    detail::sgd_apply(out, grads, lr);
    return out;
}

// On the wire a parameter set is its tensors in fixed order, each a 16-byte
// header plus 4 bytes per scalar. The byte model is what the traffic ledger
// charges; nothing is actually marshalled during simulation.
inline std::size_t wire_bytes(const std::vector<std::size_t>& tensor_sizes) {
    std::size_t total = 0;
    for (std::size_t n : tensor_sizes) total += 16 + 4 * n;
    return total;
}

template <typename T>
std::size_t bytes_of_params(const ModelParams<T>& m) {
    std::vector<std::size_t> sizes;
    sizes.reserve(ModelParams<T>::tensor_count);
    for (const auto* t : m.tensors()) sizes.push_back(t->numel());
    return wire_bytes(sizes);
}

}  // namespace protofed
