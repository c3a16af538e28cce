// Copyright Contributors to the VGQ Project
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <Eigen/Core>
#include <cmath>
#include <string>
#include <vector>

#include "vgq/param.hpp"
#include "vgq/tensor.hpp"

namespace vgq::nn {

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

/// 2-D convolution with square kernel, implemented as im2col + GEMM per image.
/// Caches its input on forward for the matching backward.
template <class T>
class Conv2d {
public:
    Conv2d() = default;
    Conv2d(std::string name, int in, int out, int kernel, int stride, int pad)
        : in_(in), out_(out), k_(kernel), stride_(stride), pad_(pad),
          weight_(name + ".weight", out, in, kernel, kernel), bias_(name + ".bias", 1, out, 1, 1) {}

    void init(Rng& rng, double gain = 1.0) {
        init_uniform_fan_in(weight_.value, in_ * k_ * k_, gain, rng);
        bias_.value.zero();
    }

    int in_channels() const { return in_; }
    int out_channels() const { return out_; }
    int out_size(int n) const { return (n + 2 * pad_ - k_) / stride_ + 1; }

    Param<T>& weight() { return weight_; }
    Param<T>& bias() { return bias_; }
    void params(ParamRefs<T>& out) {
        out.push_back(&weight_);
        out.push_back(&bias_);
    }

    Tensor<T> forward(const Tensor<T>& x) {
        require(x.c() == in_, "Conv2d(" + weight_.name + "): expected " + std::to_string(in_) + " input channels");
        input_ = x;
        return apply(x);
    }

    /// Forward without caching (read-only use).
    Tensor<T> apply(const Tensor<T>& x) const {
        require(x.c() == in_, "Conv2d(" + weight_.name + "): channel mismatch");
        const int ho = out_size(x.h()), wo = out_size(x.w());
        require(ho >= 1 && wo >= 1, "Conv2d: input too small");
        Tensor<T> y(x.n(), out_, ho, wo);
        RowMatrix<T> cols;
        ConstMatMap<T> W(weight_.value.data(), out_, in_ * k_ * k_);
        for (int n = 0; n < x.n(); ++n) {
            im2col(x, n, ho, wo, cols);
            MatMap<T> Y(y.image(n), out_, ho * wo);
            Y.noalias() = W * cols;
            for (int o = 0; o < out_; ++o) Y.row(o).array() += bias_.value[o];
        }
        return y;
    }

    Tensor<T> backward(const Tensor<T>& dy) {
        const auto& x = input_;
        const int ho = out_size(x.h()), wo = out_size(x.w());
        require(dy.n() == x.n() && dy.c() == out_ && dy.h() == ho && dy.w() == wo, "Conv2d::backward: shape mismatch");
        Tensor<T> dx(x.n(), in_, x.h(), x.w());
        RowMatrix<T> cols, dcols;
        ConstMatMap<T> W(weight_.value.data(), out_, in_ * k_ * k_);
        MatMap<T> dW(weight_.grad.data(), out_, in_ * k_ * k_);
        for (int n = 0; n < x.n(); ++n) {
            im2col(x, n, ho, wo, cols);
            ConstMatMap<T> dY(dy.image(n), out_, ho * wo);
            dW.noalias() += dY * cols.transpose();
            for (int o = 0; o < out_; ++o) bias_.grad[o] += dY.row(o).sum();
            dcols.noalias() = W.transpose() * dY;
            col2im(dcols, n, ho, wo, dx);
        }
        return dx;
    }

private:
    void im2col(const Tensor<T>& x, int n, int ho, int wo, RowMatrix<T>& cols) const {
        cols.resize(in_ * k_ * k_, ho * wo);
        const int H = x.h(), Wd = x.w();
        for (int c = 0; c < in_; ++c)
            for (int ky = 0; ky < k_; ++ky)
                for (int kx = 0; kx < k_; ++kx) {
                    T* row = cols.data() + static_cast<size_t>((c * k_ + ky) * k_ + kx) * ho * wo;
                    for (int oy = 0; oy < ho; ++oy) {
                        const int iy = oy * stride_ - pad_ + ky;
                        for (int ox = 0; ox < wo; ++ox) {
                            const int ix = ox * stride_ - pad_ + kx;
                            row[oy * wo + ox] =
                                (iy >= 0 && iy < H && ix >= 0 && ix < Wd) ? x.at(n, c, iy, ix) : T(0);
                        }
                    }
                }
    }

    void col2im(const RowMatrix<T>& cols, int n, int ho, int wo, Tensor<T>& dx) const {
        const int H = dx.h(), Wd = dx.w();
        for (int c = 0; c < in_; ++c)
            for (int ky = 0; ky < k_; ++ky)
                for (int kx = 0; kx < k_; ++kx) {
                    const T* row = cols.data() + static_cast<size_t>((c * k_ + ky) * k_ + kx) * ho * wo;
                    for (int oy = 0; oy < ho; ++oy) {
                        const int iy = oy * stride_ - pad_ + ky;
                        if (iy < 0 || iy >= H) continue;
                        for (int ox = 0; ox < wo; ++ox) {
                            const int ix = ox * stride_ - pad_ + kx;
                            if (ix >= 0 && ix < Wd) dx.at(n, c, iy, ix) += row[oy * wo + ox];
                        }
                    }
                }
    }

    int in_ = 0, out_ = 0, k_ = 1, stride_ = 1, pad_ = 0;
    Param<T> weight_, bias_;
    Tensor<T> input_;
};

/// x * sigmoid(x). Smooth everywhere, which keeps finite-difference checks
/// free of kinks.
template <class T>
class SiLU {
public:
    Tensor<T> forward(const Tensor<T>& x) {
        input_ = x;
        return apply(x);
    }
    static Tensor<T> apply(const Tensor<T>& x) {
        Tensor<T> y = x;
        for (auto& v : y.values()) v = v / (T(1) + std::exp(-v));
        return y;
    }
    Tensor<T> backward(const Tensor<T>& dy) const {
        Tensor<T> dx = dy;
        for (size_t i = 0; i < dx.size(); ++i) {
            const T x = input_[i];
            const T s = T(1) / (T(1) + std::exp(-x));
            dx[i] *= s * (T(1) + x * (T(1) - s));
        }
        return dx;
    }

private:
    Tensor<T> input_;
};

template <class T>
class Sigmoid {
public:
    Tensor<T> forward(const Tensor<T>& x) {
        output_ = apply(x);
        return output_;
    }
    static Tensor<T> apply(const Tensor<T>& x) {
        Tensor<T> y = x;
        for (auto& v : y.values()) v = T(1) / (T(1) + std::exp(-v));
        return y;
    }
    Tensor<T> backward(const Tensor<T>& dy) const {
        Tensor<T> dx = dy;
        for (size_t i = 0; i < dx.size(); ++i) dx[i] *= output_[i] * (T(1) - output_[i]);
        return dx;
    }

private:
    Tensor<T> output_;
};

/// Nearest-neighbour 2x upsampling.
template <class T>
struct Upsample2x {
    static Tensor<T> forward(const Tensor<T>& x) {
        Tensor<T> y(x.n(), x.c(), x.h() * 2, x.w() * 2);
        for (int n = 0; n < x.n(); ++n)
            for (int c = 0; c < x.c(); ++c)
                for (int yy = 0; yy < y.h(); ++yy)
                    for (int xx = 0; xx < y.w(); ++xx) y.at(n, c, yy, xx) = x.at(n, c, yy / 2, xx / 2);
        return y;
    }
    static Tensor<T> backward(const Tensor<T>& dy) {
        Tensor<T> dx(dy.n(), dy.c(), dy.h() / 2, dy.w() / 2);
        for (int n = 0; n < dy.n(); ++n)
            for (int c = 0; c < dy.c(); ++c)
                for (int yy = 0; yy < dy.h(); ++yy)
                    for (int xx = 0; xx < dy.w(); ++xx) dx.at(n, c, yy / 2, xx / 2) += dy.at(n, c, yy, xx);
        return dx;
    }
};

/// Pre-activation residual block: x + conv(silu(conv(silu(x)))).
template <class T>
class ResBlock {
public:
    ResBlock() = default;
    ResBlock(const std::string& name, int channels)
        : conv1_(name + ".conv1", channels, channels, 3, 1, 1), conv2_(name + ".conv2", channels, channels, 3, 1, 1) {}

    void init(Rng& rng) {
        conv1_.init(rng);
        conv2_.init(rng, 0.1);
    }
    void params(ParamRefs<T>& out) {
        conv1_.params(out);
        conv2_.params(out);
    }

    Tensor<T> forward(const Tensor<T>& x) {
        Tensor<T> h = conv2_.forward(act2_.forward(conv1_.forward(act1_.forward(x))));
        h += x;
        return h;
    }
    Tensor<T> backward(const Tensor<T>& dy) {
        Tensor<T> dx = act1_.backward(conv1_.backward(act2_.backward(conv2_.backward(dy))));
        dx += dy;
        return dx;
    }

private:
    SiLU<T> act1_, act2_;
    Conv2d<T> conv1_, conv2_;
};

} // namespace vgq::nn
