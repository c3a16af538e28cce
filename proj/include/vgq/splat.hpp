// Copyright Contributors to the VGQ Project
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <thread>
#include <vector>

#include "vgq/errors.hpp"
#include "vgq/gaussian2d.hpp"

namespace vgq {

/// H x W x C grid, element (y, x, c) at (y * W + x) * C + c.
template <class T>
struct FeatureMap {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<T> data;

    FeatureMap() = default;
    FeatureMap(int h, int w, int c, T fill = T(0))
        : height(h), width(w), channels(c), data(static_cast<size_t>(h) * w * c, fill) {}

    T& at(int y, int x, int c) { return data[(static_cast<size_t>(y) * width + x) * channels + c]; }
    const T& at(int y, int x, int c) const { return data[(static_cast<size_t>(y) * width + x) * channels + c]; }
    bool same_shape(const FeatureMap& o) const {
        return height == o.height && width == o.width && channels == o.channels;
    }
};

template <class T>
struct SplatBatch {
    std::vector<Gaussian2D<T>> gaussians;
    std::vector<int> token_of_gaussian;

    int channels() const { return gaussians.empty() ? 0 : static_cast<int>(gaussians.front().feature.size()); }
};

struct GridShape {
    int height = 0;
    int width = 0;
};

inline constexpr int kSplatTile = 16;
inline constexpr double kSplatCutoffSigma = 3.0;

/// Normalized coordinate of a pixel center.
template <class T>
Vec2<T> pixel_center(int x, int y, GridShape grid) {
    return {(static_cast<T>(x) + T(0.5)) / static_cast<T>(grid.width),
            (static_cast<T>(y) + T(0.5)) / static_cast<T>(grid.height)};
}

namespace detail {

/// Per-Gaussian quantities hoisted out of the pixel loop.
template <class T>
struct Prepared {
    T cos_r, sin_r;
    T inv_xx, inv_xy, inv_yy;
    T half_x, half_y; // half-extent of the cutoff box, normalized units
};

template <class T>
Prepared<T> prepare(const Gaussian2D<T>& g, T cutoff) {
    const auto cov = build_covariance(g.rotation, g.scales);
    return {std::cos(g.rotation), std::sin(g.rotation), cov.inv_xx, cov.inv_xy, cov.inv_yy,
            cutoff * std::sqrt(cov.xx), cutoff * std::sqrt(cov.yy)};
}

/// Axis-aligned box of the rotated cutoff ellipse; the single inclusion rule
/// shared by the tiled kernel and the truncated reference.
template <class T>
bool in_box(const Prepared<T>& p, T dx, T dy) {
    return std::abs(dx) <= p.half_x && std::abs(dy) <= p.half_y;
}

template <class T>
T kernel_value(const Prepared<T>& p, T dx, T dy) {
    return std::exp(T(-0.5) * (p.inv_xx * dx * dx + T(2) * p.inv_xy * dx * dy + p.inv_yy * dy * dy));
}

template <class T>
void validate(const SplatBatch<T>& batch, GridShape grid) {
    require(grid.height >= 1 && grid.width >= 1, "splat: grid must be at least 1x1");
    const size_t c = batch.gaussians.empty() ? 0 : batch.gaussians.front().feature.size();
    for (const auto& g : batch.gaussians) {
        require(g.feature.size() == c, "splat: inconsistent feature width");
        if (!(g.scales[0] > T(0)) || !(g.scales[1] > T(0))) throw DomainError("splat: non-positive scale");
    }
}

struct TileLayout {
    int tiles_x, tiles_y;
    std::vector<std::vector<int>> members; // Gaussian indices per tile, ascending
};

template <class T>
TileLayout bin_tiles(const std::vector<Prepared<T>>& prep, const std::vector<Gaussian2D<T>>& gs, GridShape grid) {
    TileLayout t;
    t.tiles_x = (grid.width + kSplatTile - 1) / kSplatTile;
    t.tiles_y = (grid.height + kSplatTile - 1) / kSplatTile;
    t.members.resize(static_cast<size_t>(t.tiles_x) * t.tiles_y);
    for (size_t k = 0; k < gs.size(); ++k) {
        const auto& p = prep[k];
        // Conservative pixel range (one pixel of slack); in_box() is the exact test.
        const double cx = static_cast<double>(gs[k].position[0]) * grid.width - 0.5;
        const double cy = static_cast<double>(gs[k].position[1]) * grid.height - 0.5;
        const double rx = static_cast<double>(p.half_x) * grid.width + 1.0;
        const double ry = static_cast<double>(p.half_y) * grid.height + 1.0;
        if (!std::isfinite(cx) || !std::isfinite(cy)) continue;
        const int x0 = static_cast<int>(std::max(0.0, std::floor(cx - rx)));
        const int x1 = static_cast<int>(std::min<double>(grid.width - 1, std::ceil(cx + rx)));
        const int y0 = static_cast<int>(std::max(0.0, std::floor(cy - ry)));
        const int y1 = static_cast<int>(std::min<double>(grid.height - 1, std::ceil(cy + ry)));
        if (x0 > x1 || y0 > y1) continue;
        for (int ty = y0 / kSplatTile; ty <= y1 / kSplatTile; ++ty)
            for (int tx = x0 / kSplatTile; tx <= x1 / kSplatTile; ++tx)
                t.members[static_cast<size_t>(ty) * t.tiles_x + tx].push_back(static_cast<int>(k));
    }
    return t;
}

/// Runs fn(tile) for every tile; tiles are independent so any worker count
/// yields identical results.
template <class Fn>
void for_each_tile(int tiles, int workers, Fn&& fn) {
    workers = std::clamp(workers, 1, std::max(1, tiles));
    if (workers == 1) {
        for (int t = 0; t < tiles; ++t) fn(t);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int w = 0; w < workers; ++w)
        pool.emplace_back([&, w] {
            for (int t = w; t < tiles; t += workers) fn(t);
        });
    for (auto& th : pool) th.join();
}

} // namespace detail

struct SplatOptions {
    int workers = 1;
};

/// Tiled production rasterizer: additive weighted sum over Gaussians, each
/// truncated to the box of its 3-sigma ellipse.
template <class T>
FeatureMap<T> splat_forward(const SplatBatch<T>& batch, GridShape grid, const SplatOptions& opt = {}) {
    detail::validate(batch, grid);
    const int C = batch.channels();
    FeatureMap<T> out(grid.height, grid.width, C);
    if (batch.gaussians.empty()) return out;

    const T cutoff = static_cast<T>(kSplatCutoffSigma);
    std::vector<detail::Prepared<T>> prep;
    prep.reserve(batch.gaussians.size());
    for (const auto& g : batch.gaussians) prep.push_back(detail::prepare(g, cutoff));
    const auto tiles = detail::bin_tiles(prep, batch.gaussians, grid);

    detail::for_each_tile(tiles.tiles_x * tiles.tiles_y, opt.workers, [&](int t) {
        const int tx = t % tiles.tiles_x, ty = t / tiles.tiles_x;
        const int xe = std::min(grid.width, (tx + 1) * kSplatTile);
        const int ye = std::min(grid.height, (ty + 1) * kSplatTile);
        for (int y = ty * kSplatTile; y < ye; ++y)
            for (int x = tx * kSplatTile; x < xe; ++x) {
                const auto pc = pixel_center<T>(x, y, grid);
                T* dst = &out.at(y, x, 0);
                for (int k : tiles.members[t]) {
                    const auto& g = batch.gaussians[k];
                    const T dx = pc[0] - g.position[0], dy = pc[1] - g.position[1];
                    if (!detail::in_box(prep[k], dx, dy)) continue;
                    const T w = g.opacity * detail::kernel_value(prep[k], dx, dy);
                    for (int c = 0; c < C; ++c) dst[c] += w * g.feature[c];
                }
            }
    });
    return out;
}

/// Naive per-pixel oracle. Without `cutoff_sigma` every Gaussian contributes
/// to every pixel; with it, the same box rule as splat_forward is applied.
template <class T>
FeatureMap<T> splat_reference(const SplatBatch<T>& batch, GridShape grid, std::optional<T> cutoff_sigma = std::nullopt) {
    detail::validate(batch, grid);
    const int C = batch.channels();
    FeatureMap<T> out(grid.height, grid.width, C);
    std::vector<detail::Prepared<T>> prep;
    for (const auto& g : batch.gaussians) prep.push_back(detail::prepare(g, cutoff_sigma.value_or(T(1))));
    for (int y = 0; y < grid.height; ++y)
        for (int x = 0; x < grid.width; ++x) {
            const auto pc = pixel_center<T>(x, y, grid);
            for (size_t k = 0; k < batch.gaussians.size(); ++k) {
                const auto& g = batch.gaussians[k];
                const T dx = pc[0] - g.position[0], dy = pc[1] - g.position[1];
                if (cutoff_sigma && !detail::in_box(prep[k], dx, dy)) continue;
                const T w = g.opacity * detail::kernel_value(prep[k], dx, dy);
                for (int c = 0; c < C; ++c) out.at(y, x, c) += w * g.feature[c];
            }
        }
    return out;
}

template <class T>
struct SplatGradients {
    std::vector<GaussianGrad<T>> geometry;
    std::vector<T> opacity;
    std::vector<std::vector<T>> feature;
};

/// Vector-Jacobian product of splat_forward.
template <class T>
SplatGradients<T> splat_backward(const SplatBatch<T>& batch, GridShape grid, const FeatureMap<T>& cotangent,
                                 const SplatOptions& opt = {}) {
    detail::validate(batch, grid);
    const int C = batch.channels();
    const size_t K = batch.gaussians.size();
    if (cotangent.height != grid.height || cotangent.width != grid.width || (K > 0 && cotangent.channels != C))
        throw ContractError("splat_backward: cotangent shape does not match grid x channels");

    SplatGradients<T> out;
    out.geometry.assign(K, {});
    out.opacity.assign(K, T(0));
    out.feature.assign(K, std::vector<T>(C, T(0)));
    if (K == 0) return out;

    const T cutoff = static_cast<T>(kSplatCutoffSigma);
    std::vector<detail::Prepared<T>> prep;
    prep.reserve(K);
    for (const auto& g : batch.gaussians) prep.push_back(detail::prepare(g, cutoff));
    const auto tiles = detail::bin_tiles(prep, batch.gaussians, grid);
    const int n_tiles = tiles.tiles_x * tiles.tiles_y;

    // Per-tile partials, one slot per member; merged in tile order afterwards.
    struct Partial {
        GaussianGrad<T> geo;
        T opacity = T(0);
        std::vector<T> feature;
    };
    std::vector<std::vector<Partial>> partial(n_tiles);

    detail::for_each_tile(n_tiles, opt.workers, [&](int t) {
        const auto& members = tiles.members[t];
        auto& acc = partial[t];
        acc.assign(members.size(), Partial{{}, T(0), std::vector<T>(C, T(0))});
        const int tx = t % tiles.tiles_x, ty = t / tiles.tiles_x;
        const int xe = std::min(grid.width, (tx + 1) * kSplatTile);
        const int ye = std::min(grid.height, (ty + 1) * kSplatTile);
        for (size_t m = 0; m < members.size(); ++m) {
            const int k = members[m];
            const auto& g = batch.gaussians[k];
            const auto& p = prep[k];
            auto& a = acc[m];
            for (int y = ty * kSplatTile; y < ye; ++y)
                for (int x = tx * kSplatTile; x < xe; ++x) {
                    const auto pc = pixel_center<T>(x, y, grid);
                    const T dx = pc[0] - g.position[0], dy = pc[1] - g.position[1];
                    if (!detail::in_box(p, dx, dy)) continue;
                    const auto kl = kernel_local(p.cos_r, p.sin_r, g.scales, dx, dy);
                    const T* ct = &cotangent.at(y, x, 0);
                    T dot = T(0); // <cotangent, feature>
                    for (int c = 0; c < C; ++c) {
                        dot += ct[c] * g.feature[c];
                        a.feature[c] += ct[c] * g.opacity * kl.value;
                    }
                    a.opacity += dot * kl.value;
                    const auto kg = kernel_local_grad(kl, p.cos_r, p.sin_r, g.scales);
                    const T s = dot * g.opacity;
                    a.geo.position[0] += s * kg.position[0];
                    a.geo.position[1] += s * kg.position[1];
                    a.geo.rotation += s * kg.rotation;
                    a.geo.scales[0] += s * kg.scales[0];
                    a.geo.scales[1] += s * kg.scales[1];
                }
        }
    });

    for (int t = 0; t < n_tiles; ++t) {
        const auto& members = tiles.members[t];
        for (size_t m = 0; m < members.size(); ++m) {
            const int k = members[m];
            const auto& a = partial[t][m];
            auto& g = out.geometry[k];
            g.position[0] += a.geo.position[0];
            g.position[1] += a.geo.position[1];
            g.rotation += a.geo.rotation;
            g.scales[0] += a.geo.scales[0];
            g.scales[1] += a.geo.scales[1];
            out.opacity[k] += a.opacity;
            for (int c = 0; c < C; ++c) out.feature[k][c] += a.feature[c];
        }
    }
    return out;
}

} // namespace vgq
