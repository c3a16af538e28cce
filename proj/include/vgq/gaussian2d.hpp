// Copyright Contributors to the VGQ Project
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <array>
#include <cmath>
#include <numbers>
#include <vector>

#include "vgq/errors.hpp"

namespace vgq {

template <class T>
using Vec2 = std::array<T, 2>;

/// One splatting primitive in normalized image coordinates.
///
/// `scales` are standard deviations along the rotated principal axes, so the
/// covariance is R(rotation) diag(scales^2) R(rotation)^T.
template <class T>
struct Gaussian2D {
    Vec2<T> position{T(0), T(0)};
    T rotation = T(0);
    Vec2<T> scales{T(1), T(1)};
    T opacity = T(1);
    std::vector<T> feature;
};

/// Symmetric 2x2 covariance with its closed-form inverse and determinant.
template <class T>
struct Covariance2 {
    T xx, xy, yy;
    T inv_xx, inv_xy, inv_yy;
    T det;
};

template <class T>
T wrap_angle(T theta) {
    constexpr T two_pi = T(2) * std::numbers::pi_v<T>;
    T r = std::fmod(theta, two_pi);
    if (r < T(0)) r += two_pi;
    if (r >= two_pi) r = T(0);
    return r;
}

template <class T>
Covariance2<T> build_covariance(T rotation, Vec2<T> scales) {
    if (!(scales[0] > T(0)) || !(scales[1] > T(0))) throw DomainError("build_covariance: scales must be positive");
    const T c = std::cos(rotation), s = std::sin(rotation);
    const T a = scales[0] * scales[0], b = scales[1] * scales[1];
    Covariance2<T> cov{};
    cov.xx = c * c * a + s * s * b;
    cov.xy = c * s * (a - b);
    cov.yy = s * s * a + c * c * b;
    // det(R diag R^T) = a*b exactly; avoids cancellation in xx*yy - xy^2.
    cov.det = a * b;
    cov.inv_xx = cov.yy / cov.det;
    cov.inv_xy = -cov.xy / cov.det;
    cov.inv_yy = cov.xx / cov.det;
    return cov;
}

/// exp(-0.5 d^T Sigma^-1 d) with d = x - position.
template <class T>
T eval_gaussian(const Gaussian2D<T>& g, Vec2<T> x) {
    const auto cov = build_covariance(g.rotation, g.scales);
    const T dx = x[0] - g.position[0], dy = x[1] - g.position[1];
    const T q = cov.inv_xx * dx * dx + T(2) * cov.inv_xy * dx * dy + cov.inv_yy * dy * dy;
    return std::exp(T(-0.5) * q);
}

template <class T>
struct GaussianGrad {
    Vec2<T> position{T(0), T(0)};
    T rotation = T(0);
    Vec2<T> scales{T(0), T(0)};
};

/// Local frame quantities shared by the value and its derivatives: with
/// u = R^T d, the exponent is -(u0^2/s0^2 + u1^2/s1^2)/2.
template <class T>
struct KernelLocal {
    T value;
    T u0, u1;
};

template <class T>
KernelLocal<T> kernel_local(T cos_r, T sin_r, Vec2<T> scales, T dx, T dy) {
    const T u0 = cos_r * dx + sin_r * dy;
    const T u1 = -sin_r * dx + cos_r * dy;
    const T q = u0 * u0 / (scales[0] * scales[0]) + u1 * u1 / (scales[1] * scales[1]);
    return {std::exp(T(-0.5) * q), u0, u1};
}

/// Partial derivatives of the kernel value w.r.t. position, rotation and
/// scales given the local frame; `cos_r`/`sin_r` are of the rotation angle.
template <class T>
GaussianGrad<T> kernel_local_grad(const KernelLocal<T>& k, T cos_r, T sin_r, Vec2<T> scales) {
    const T is0 = T(1) / (scales[0] * scales[0]);
    const T is1 = T(1) / (scales[1] * scales[1]);
    // Sigma^-1 d expressed back in image axes: R diag(1/s^2) u.
    const T w0 = k.u0 * is0, w1 = k.u1 * is1;
    GaussianGrad<T> g;
    g.position[0] = k.value * (cos_r * w0 - sin_r * w1);
    g.position[1] = k.value * (sin_r * w0 + cos_r * w1);
    g.rotation = -k.value * k.u0 * k.u1 * (is0 - is1);
    g.scales[0] = k.value * k.u0 * k.u0 * is0 / scales[0];
    g.scales[1] = k.value * k.u1 * k.u1 * is1 / scales[1];
    return g;
}

template <class T>
GaussianGrad<T> eval_gaussian_grad(const Gaussian2D<T>& g, Vec2<T> x) {
    const T c = std::cos(g.rotation), s = std::sin(g.rotation);
    const auto k = kernel_local(c, s, g.scales, x[0] - g.position[0], x[1] - g.position[1]);
    return kernel_local_grad(k, c, s, g.scales);
}

/// Scale floor added after softplus.
inline constexpr double kScaleEpsilon = 1e-4;

template <class T>
T softplus(T x) {
    // log(1 + e^x) without overflow for large x.
    return x > T(20) ? x : std::log1p(std::exp(x));
}

template <class T>
T sigmoid(T x) {
    return T(1) / (T(1) + std::exp(-x));
}

template <class T>
T softplus_inverse(T y) {
    return std::log(std::expm1(y));
}

/// softplus(raw) + eps; derivative is sigmoid(raw).
template <class T>
T scale_from_raw(T raw) {
    return softplus(raw) + static_cast<T>(kScaleEpsilon);
}

/// atan2(sin_raw, cos_raw) reduced to [0, 2pi).
template <class T>
T rotation_from_raw(T sin_raw, T cos_raw) {
    return wrap_angle(std::atan2(sin_raw, cos_raw));
}

/// d rotation / d(sin_raw, cos_raw); the reduction is locally the identity.
template <class T>
Vec2<T> rotation_from_raw_grad(T sin_raw, T cos_raw) {
    const T r2 = sin_raw * sin_raw + cos_raw * cos_raw;
    return {cos_raw / r2, -sin_raw / r2};
}

} // namespace vgq
