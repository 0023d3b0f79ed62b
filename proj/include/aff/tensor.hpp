#pragma once

#include <cmath>
#include <concepts>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "aff/errors.hpp"

namespace aff {

using Rng = std::mt19937_64;

enum class Mode { train, eval };

// Dense rank-4 shape, NCHW.
struct Shape {
    int n = 0, c = 0, h = 0, w = 0;

    std::int64_t numel() const {
        return std::int64_t(n) * c * h * w;
    }
    bool operator==(const Shape&) const = default;

    std::string str() const {
        std::ostringstream os;
        os << "(" << n << "," << c << "," << h << "," << w << ")";
        return os.str();
    }
};

// Contiguous row-major NCHW tensor. Immutable by convention once a kernel has
// produced it; kernels always allocate fresh outputs.
template <std::floating_point T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape s) : shape_(s), data_(static_cast<std::size_t>(s.numel()), T(0)) {
        if (s.n < 0 || s.c < 0 || s.h < 0 || s.w < 0)
            throw DimensionError("negative dimension in shape " + s.str());
    }

    Tensor(Shape s, std::vector<T> values) : shape_(s), data_(std::move(values)) {
        if (static_cast<std::int64_t>(data_.size()) != s.numel())
            throw DimensionError("data length " + std::to_string(data_.size()) +
                                 " does not match shape " + s.str());
    }

    static Tensor zeros(Shape s) { return Tensor(s); }

    static Tensor full(Shape s, T v) {
        Tensor t(s);
        std::fill(t.data_.begin(), t.data_.end(), v);
        return t;
    }

    static Tensor uniform(Shape s, Rng& rng, T lo = T(-1), T hi = T(1)) {
        Tensor t(s);
        std::uniform_real_distribution<T> dist(lo, hi);
        for (auto& v : t.data_) v = dist(rng);
        return t;
    }

    static Tensor normal(Shape s, Rng& rng, T stddev, T mean = T(0)) {
        Tensor t(s);
        std::normal_distribution<T> dist(mean, stddev);
        for (auto& v : t.data_) v = dist(rng);
        return t;
    }

    const Shape& shape() const { return shape_; }
    std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }

    T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    const T& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    T& at(int n, int c, int y, int x) { return data_[static_cast<std::size_t>(index(n, c, y, x))]; }
    const T& at(int n, int c, int y, int x) const {
        return data_[static_cast<std::size_t>(index(n, c, y, x))];
    }

    std::int64_t index(int n, int c, int y, int x) const {
        return ((std::int64_t(n) * shape_.c + c) * shape_.h + y) * shape_.w + x;
    }

    bool all_finite() const {
        for (const T& v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    T max_abs_diff(const Tensor& other) const {
        if (!(shape_ == other.shape_))
            throw DimensionError("max_abs_diff shape mismatch: " + shape_.str() + " vs " +
                                 other.shape_.str());
        T m = 0;
        for (std::size_t i = 0; i < data_.size(); ++i)
            m = std::max(m, std::abs(data_[i] - other.data_[i]));
        return m;
    }

private:
    Shape shape_{};
    std::vector<T> data_;
};

// Casts every element; used when dispatching between f32 and f64 engines.
template <std::floating_point To, std::floating_point From>
Tensor<To> cast(const Tensor<From>& t) {
    Tensor<To> out(t.shape());
    for (std::int64_t i = 0; i < t.size(); ++i) out[i] = static_cast<To>(t[i]);
    return out;
}

} // namespace aff
