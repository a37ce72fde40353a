#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "vireid/common.hpp"

namespace vireid {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline bool same_shape(const Shape& a, const Shape& b) { return a == b; }

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
    return out + "]";
}

// Dense row-major tensor of doubles. Plain value type; all autograd
// bookkeeping lives in Node (autograd.hpp).
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, real fill = 0.0)
        : shape_(std::move(shape)), data_(static_cast<size_t>(shape_numel(shape_)), fill) {}
    Tensor(Shape shape, std::vector<real> data) : shape_(std::move(shape)), data_(std::move(data)) {
        VIREID_CHECK(static_cast<int64_t>(data_.size()) == shape_numel(shape_),
                     "tensor data size does not match shape ", shape_str(shape_));
    }

    static Tensor scalar(real v) { return Tensor({1}, std::vector<real>{v}); }

    const Shape& shape() const { return shape_; }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    real* data() { return data_.data(); }
    const real* data() const { return data_.data(); }
    real& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    real operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    // 2-d and 4-d accessors; no bounds checks beyond debug builds.
    real& at(int i, int j) { return data_[static_cast<size_t>(i) * shape_[1] + j]; }
    real at(int i, int j) const { return data_[static_cast<size_t>(i) * shape_[1] + j]; }
    real& at(int n, int c, int h, int w) {
        return data_[((static_cast<size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }
    real at(int n, int c, int h, int w) const {
        return data_[((static_cast<size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }

    void fill(real v) { std::fill(data_.begin(), data_.end(), v); }
    void zero() { fill(0.0); }

    Tensor reshaped(Shape s) const {
        VIREID_CHECK(shape_numel(s) == numel(), "reshape ", shape_str(shape_), " -> ", shape_str(s));
        return Tensor(std::move(s), data_);
    }

    bool all_finite() const {
        for (real v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    real sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }
    real max_abs() const {
        real m = 0.0;
        for (real v : data_) m = std::max(m, std::fabs(v));
        return m;
    }

    uint64_t content_hash() const {
        uint64_t h = fnv1a(shape_.data(), shape_.size() * sizeof(int));
        return fnv1a(data_.data(), data_.size() * sizeof(real), h);
    }

private:
    Shape shape_;
    std::vector<real> data_;
};

inline real max_abs_diff(const Tensor& a, const Tensor& b) {
    VIREID_CHECK(same_shape(a.shape(), b.shape()), "max_abs_diff shape mismatch");
    real m = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
    return m;
}

}  // namespace vireid
