#pragma once

#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "gpo/common.hpp"

namespace gpo {

inline std::string shape_str(const std::vector<std::size_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << "]";
    return os.str();
}

// Dense row-major tensor. The scalar type T is float for training and
// double for gradient-check fidelity; everything downstream is templated
// on it.
template <typename T>
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<T> data;
    bool requires_grad = false;

    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> s, T fill = T(0)) : shape(std::move(s)) {
        data.assign(numel_of(shape), fill);
    }

    Tensor(std::vector<std::size_t> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        if (data.size() != numel_of(shape))
            throw DimensionError("tensor data length " + std::to_string(data.size()) +
                                 " does not match shape " + shape_str(shape));
    }

    static std::size_t numel_of(const std::vector<std::size_t>& s) {
        std::size_t n = 1;
        for (std::size_t d : s) {
            if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(s));
            n *= d;
        }
        return n;
    }

    std::size_t numel() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }

    std::size_t dim(std::size_t i) const { return shape.at(i); }

    T& at(std::size_t i) { return data[i]; }
    const T& at(std::size_t i) const { return data[i]; }
    T& at(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
    const T& at(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }
    T& at(std::size_t i, std::size_t j, std::size_t k) { return data[(i * shape[1] + j) * shape[2] + k]; }
    const T& at(std::size_t i, std::size_t j, std::size_t k) const {
        return data[(i * shape[1] + j) * shape[2] + k];
    }

    bool same_shape(const Tensor& other) const { return shape == other.shape; }

    static Tensor vec(std::vector<T> d) {
        std::vector<std::size_t> s{d.size()};
        return Tensor(std::move(s), std::move(d));
    }

    static Tensor scalar(T v) { return Tensor({1}, std::vector<T>{v}); }
};

// Attention mask: mask(i, j) == true means token i may attend to token j.
struct BoolMatrix {
    std::size_t rows = 0, cols = 0;
    std::vector<std::uint8_t> m;

    BoolMatrix() = default;
    BoolMatrix(std::size_t r, std::size_t c, bool fill = false)
        : rows(r), cols(c), m(r * c, fill ? 1 : 0) {}

    bool at(std::size_t i, std::size_t j) const { return m[i * cols + j] != 0; }
    void set(std::size_t i, std::size_t j, bool v) { m[i * cols + j] = v ? 1 : 0; }
};

}  // namespace gpo
