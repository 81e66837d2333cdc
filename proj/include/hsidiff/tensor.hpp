#pragma once

#include <cassert>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <random>
#include <vector>

#include "hsidiff/common.hpp"

namespace hsidiff {

// Dense row-major nd-array. Value semantics; shape is part of the value.
template <class T>
struct Tensor {
    std::vector<size_t> shape;
    std::vector<T> v;

    Tensor() = default;
    explicit Tensor(std::vector<size_t> s) : shape(std::move(s)), v(count(shape), T(0)) {}
    Tensor(std::vector<size_t> s, std::vector<T> data) : shape(std::move(s)), v(std::move(data)) {
        assert(v.size() == count(shape));
    }

    static size_t count(const std::vector<size_t>& s) {
        size_t n = 1;
        for (size_t d : s) n *= d;
        return n;
    }

    size_t size() const { return v.size(); }
    size_t dim(size_t i) const { return shape.at(i); }
    size_t ndim() const { return shape.size(); }

    T& operator[](size_t i) { return v[i]; }
    const T& operator[](size_t i) const { return v[i]; }

    // 2-d / 3-d / 4-d indexing, row-major
    T& at(size_t i, size_t j) { return v[i * shape[1] + j]; }
    const T& at(size_t i, size_t j) const { return v[i * shape[1] + j]; }
    T& at(size_t i, size_t j, size_t k) { return v[(i * shape[1] + j) * shape[2] + k]; }
    const T& at(size_t i, size_t j, size_t k) const { return v[(i * shape[1] + j) * shape[2] + k]; }
    T& at(size_t i, size_t j, size_t k, size_t l) {
        return v[((i * shape[1] + j) * shape[2] + k) * shape[3] + l];
    }
    const T& at(size_t i, size_t j, size_t k, size_t l) const {
        return v[((i * shape[1] + j) * shape[2] + k) * shape[3] + l];
    }

    static Tensor zeros(std::vector<size_t> s) { return Tensor(std::move(s)); }
    static Tensor full(std::vector<size_t> s, T value) {
        Tensor t(std::move(s));
        std::fill(t.v.begin(), t.v.end(), value);
        return t;
    }
    static Tensor randn(std::vector<size_t> s, Rng& rng, T stddev = T(1)) {
        Tensor t(std::move(s));
        std::normal_distribution<double> nd(0.0, 1.0);
        for (auto& x : t.v) x = static_cast<T>(nd(rng) * static_cast<double>(stddev));
        return t;
    }

    Tensor reshaped(std::vector<size_t> s) const {
        assert(count(s) == v.size());
        return Tensor(std::move(s), v);
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (const T& x : v)
            if (!std::isfinite(static_cast<double>(x))) return false;
        return true;
    }

    template <class U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.shape = shape;
        out.v.resize(v.size());
        for (size_t i = 0; i < v.size(); ++i) out.v[i] = static_cast<U>(v[i]);
        return out;
    }
};

} // namespace hsidiff
