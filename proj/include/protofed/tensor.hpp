#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "protofed/errors.hpp"

namespace protofed {

// Dense row-major n-dimensional array. The universal numeric carrier for
// images, activations and model parameters. Scalar type is a template
// parameter so the same kernels can run in float (production) or double
// (test oracles); the product pipeline uses Tensor<float>.
template <typename T = float>
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<T> data;

    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> s) : shape(std::move(s)) {
        data.assign(numel_of(shape), T(0));
    }

    Tensor(std::initializer_list<std::size_t> s) : Tensor(std::vector<std::size_t>(s)) {}

    static std::size_t numel_of(const std::vector<std::size_t>& s) {
        if (s.empty()) throw InvalidInput("tensor must have at least one dimension");
        std::size_t n = 1;
        for (std::size_t d : s) {
            if (d == 0) throw InvalidInput("tensor dimensions must be positive");
            n *= d;
        }
        return n;
    }

    std::size_t numel() const { return data.size(); }
    std::size_t dim(std::size_t i) const { return shape.at(i); }
    std::size_t rank() const { return shape.size(); }

    T* ptr() { return data.data(); }
    const T* ptr() const { return data.data(); }

    T& operator[](std::size_t i) { return data[i]; }
    const T& operator[](std::size_t i) const { return data[i]; }

    bool all_finite() const {
        for (T v : data) {
            if (!std::isfinite(static_cast<double>(v))) return false;
        }
        return true;
    }

    bool same_shape(const Tensor& other) const { return shape == other.shape; }

    void fill(T v) { std::fill(data.begin(), data.end(), v); }
};

template <typename T>
bool operator==(const Tensor<T>& a, const Tensor<T>& b) {
    return a.shape == b.shape && a.data == b.data;
}

}  // namespace protofed
