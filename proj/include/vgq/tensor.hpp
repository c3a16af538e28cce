// Copyright Contributors to the VGQ Project
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <new>
#include <span>
#include <string>
#include <vector>

#include "vgq/errors.hpp"

namespace vgq {

/// Cache-line aligned storage so vectorized kernels see the same alignment
/// on every run.
template <class T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t kAlignment{64};

    AlignedAllocator() = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U>&) {}

    T* allocate(size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlignment)); }
    void deallocate(T* p, size_t) { ::operator delete(p, kAlignment); }

    template <class U>
    bool operator==(const AlignedAllocator<U>&) const { return true; }
};

template <class T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

/// Dense 4-D array in NCHW order. Network activations, images and weights all
/// use this one layout; weights are (out, in, kh, kw).
template <class T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;
    Tensor(int n, int c, int h, int w, T fill = T(0))
        : shape_{n, c, h, w}, data_(static_cast<size_t>(n) * c * h * w, fill) {
        require(n >= 0 && c >= 0 && h >= 0 && w >= 0, "Tensor: negative dimension");
    }
    explicit Tensor(const std::array<int, 4>& s, T fill = T(0)) : Tensor(s[0], s[1], s[2], s[3], fill) {}

    int n() const { return shape_[0]; }
    int c() const { return shape_[1]; }
    int h() const { return shape_[2]; }
    int w() const { return shape_[3]; }
    const std::array<int, 4>& shape() const { return shape_; }
    size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::span<T> values() { return data_; }
    std::span<const T> values() const { return data_; }
    AlignedVector<T>& storage() { return data_; }
    const AlignedVector<T>& storage() const { return data_; }

    size_t offset(int n, int c, int y, int x) const {
        return ((static_cast<size_t>(n) * shape_[1] + c) * shape_[2] + y) * shape_[3] + x;
    }
    T& at(int n, int c, int y, int x) { return data_[offset(n, c, y, x)]; }
    const T& at(int n, int c, int y, int x) const { return data_[offset(n, c, y, x)]; }
    T& operator[](size_t i) { return data_[i]; }
    const T& operator[](size_t i) const { return data_[i]; }

    /// Pointer to the first element of image `n`.
    T* image(int n) { return data_.data() + offset(n, 0, 0, 0); }
    const T* image(int n) const { return data_.data() + offset(n, 0, 0, 0); }
    size_t image_size() const { return static_cast<size_t>(shape_[1]) * shape_[2] * shape_[3]; }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
    void zero() { fill(T(0)); }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    Tensor& operator+=(const Tensor& o) {
        require(same_shape(o), "Tensor +=: shape mismatch");
        for (size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
        return *this;
    }

    Tensor& operator*=(T s) {
        for (auto& v : data_) v *= s;
        return *this;
    }

    template <class U>
    Tensor<U> cast() const {
        Tensor<U> out(shape_[0], shape_[1], shape_[2], shape_[3]);
        for (size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
        return out;
    }

    /// Copy of images [first, first + count).
    Tensor slice(int first, int count) const {
        require(first >= 0 && count >= 0 && first + count <= n(), "Tensor::slice out of range");
        Tensor out(count, c(), h(), w());
        std::copy_n(image(first), image_size() * count, out.data());
        return out;
    }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    }

private:
    std::array<int, 4> shape_{0, 0, 0, 0};
    AlignedVector<T> data_;
};

inline std::string shape_string(const std::array<int, 4>& s) {
    return "(" + std::to_string(s[0]) + "," + std::to_string(s[1]) + "," + std::to_string(s[2]) + "," +
           std::to_string(s[3]) + ")";
}

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
    if (!a.same_shape(b))
        throw ContractError(std::string(what) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                            shape_string(b.shape()));
}

} // namespace vgq
