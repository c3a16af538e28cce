// Copyright Contributors to the VGQ Project
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <vector>

#include "vgq/codebook.hpp"
#include "vgq/config.hpp"
#include "vgq/gaussian2d.hpp"
#include "vgq/nn/layers.hpp"
#include "vgq/quant_site.hpp"
#include "vgq/splat.hpp"

namespace vgq {

inline constexpr int kGeoDim = 5;        // x, y, theta / 2pi, standardized log s_u, log s_v
inline constexpr int kRawPerGaussian = 7; // offset x, y; rotation sin, cos; scale u, v; opacity
inline constexpr int kRefineSamples = 5;  // centre + 4 learned offsets
inline constexpr double kOffsetReach = 1.5; // position offset range in cell units

/// Raw per-token head logits: rows of `width` values, token-major over images.
template <class T>
struct GaussianHeadOutput {
    int images = 0;
    int grid = 0;
    int gaussians_per_token = 1;
    int feature_width = 0; // per feature vector
    FeatureLayout layout = FeatureLayout::shared;
    std::vector<T> raw;

    int tokens() const { return grid * grid; }
    int features_per_token() const { return layout == FeatureLayout::shared ? 1 : gaussians_per_token; }
    int width() const { return gaussians_per_token * kRawPerGaussian + features_per_token() * feature_width; }
    T* row(int n, int t) { return raw.data() + (static_cast<size_t>(n) * tokens() + t) * width(); }
    const T* row(int n, int t) const { return raw.data() + (static_cast<size_t>(n) * tokens() + t) * width(); }
    T* feature(int n, int t, int f) { return row(n, t) + gaussians_per_token * kRawPerGaussian + f * feature_width; }
    const T* feature(int n, int t, int f) const {
        return row(n, t) + gaussians_per_token * kRawPerGaussian + f * feature_width;
    }
};

/// Maps raw logits to a valid Gaussian (without its feature).
template <class T>
struct GeometryMap {
    int grid = 1;

    T cell() const { return T(1) / static_cast<T>(grid); }
    T center(int i) const { return (static_cast<T>(i) + T(0.5)) / static_cast<T>(grid); }
    T reach() const { return static_cast<T>(kOffsetReach) * cell(); }

    /// cell centre + tanh(raw) * 1.5 cells, clamped to [0, 1].
    T position(int cell_index, T raw) const {
        return std::clamp(center(cell_index) + std::tanh(raw) * reach(), T(0), T(1));
    }
    T position_grad(int cell_index, T raw) const {
        const T v = center(cell_index) + std::tanh(raw) * reach();
        if (v < T(0) || v > T(1)) return T(0);
        const T th = std::tanh(raw);
        return (T(1) - th * th) * reach();
    }
};

/// Bilinear lookup of an (N,C,H,W) map at a normalized position, treating
/// cell (y, x) as sitting at ((x + 0.5) / W, (y + 0.5) / H); border-clamped.
template <class T>
struct BilinearTap {
    int x0, x1, y0, y1;
    T fx, fy;
    T dudx, dvdy; // d(grid coord)/d(normalized coord); zero when clamped
};

template <class T>
BilinearTap<T> bilinear_tap(int H, int W, Vec2<T> p) {
    BilinearTap<T> t{};
    T u = p[0] * static_cast<T>(W) - T(0.5);
    T v = p[1] * static_cast<T>(H) - T(0.5);
    t.dudx = static_cast<T>(W);
    t.dvdy = static_cast<T>(H);
    if (u <= T(0)) u = T(0), t.dudx = T(0);
    if (u >= static_cast<T>(W - 1)) u = static_cast<T>(W - 1), t.dudx = T(0);
    if (v <= T(0)) v = T(0), t.dvdy = T(0);
    if (v >= static_cast<T>(H - 1)) v = static_cast<T>(H - 1), t.dvdy = T(0);
    t.x0 = std::min(static_cast<int>(std::floor(u)), W - 1);
    t.y0 = std::min(static_cast<int>(std::floor(v)), H - 1);
    t.x1 = std::min(t.x0 + 1, W - 1);
    t.y1 = std::min(t.y0 + 1, H - 1);
    t.fx = u - static_cast<T>(t.x0);
    t.fy = v - static_cast<T>(t.y0);
    return t;
}

template <class T>
class GaussianBranch {
public:
    struct Output {
        Tensor<T> features; // F_2DGS, (N, d, H, W)
        std::vector<int> geo_indices;
        std::vector<int> feat_indices;
        std::vector<int> opacity_indices;
        std::vector<T> geo_vectors;  // pre-quantization geometry codes (N*T*M x 5)
        std::vector<T> feat_vectors; // pre-quantization features
        T commitment = T(0);
    };

    GaussianBranch() = default;
    explicit GaussianBranch(const ModelConfig& cfg) : cfg_(cfg) {
        probe_ = GaussianHeadOutput<T>{0, cfg.grid(), cfg.gaussians_per_token, cfg.channels, cfg.feature_layout, {}};
        head1_ = nn::Conv2d<T>("gs.head.conv1", cfg.channels, cfg.head_width, 3, 1, 1);
        head2_ = nn::Conv2d<T>("gs.head.conv2", cfg.head_width, probe_.width(), 1, 1, 0);
        offsets_ = Param<T>("gs.refine.offsets", 1, 1, kRefineSamples - 1, 2);
        refine_w_ = Param<T>("gs.refine.weight", 1, 1, kRawPerGaussian + cfg.channels, kRefineSamples * cfg.channels);
        refine_b_ = Param<T>("gs.refine.bias", 1, 1, 1, kRawPerGaussian + cfg.channels);
    }

    const ModelConfig& config() const { return cfg_; }

    void init(Rng& rng) {
        head1_.init(rng);
        head2_.init(rng, 0.5);
        // Scales start near one cell, rotation near 0 (cos logit 1), opacity 0.5.
        const T s0 = softplus_inverse(static_cast<T>(1.0 / cfg_.grid() - kScaleEpsilon));
        auto& b = head2_.bias().value;
        for (int m = 0; m < cfg_.gaussians_per_token; ++m) {
            b[m * kRawPerGaussian + 3] = T(1);
            b[m * kRawPerGaussian + 4] = s0;
            b[m * kRawPerGaussian + 5] = s0;
        }
        const T o = T(0.5);
        const T init_offsets[4][2] = {{o, 0}, {-o, 0}, {0, o}, {0, -o}};
        for (int j = 0; j < kRefineSamples - 1; ++j)
            for (int k = 0; k < 2; ++k) offsets_.value.at(0, 0, j, k) = init_offsets[j][k];
        refine_w_.value.zero(); // zero-init residual: refinement starts as the identity
        refine_b_.value.zero();
    }

    void params(ParamRefs<T>& out) {
        head1_.params(out);
        head2_.params(out);
        out.push_back(&offsets_);
        out.push_back(&refine_w_);
        out.push_back(&refine_b_);
    }

    Param<T>& refine_weight() { return refine_w_; }
    Param<T>& refine_bias() { return refine_b_; }
    Param<T>& refine_offsets() { return offsets_; }

    // ---------------------------------------------------------------- head

    /// One head application per grid cell.
    GaussianHeadOutput<T> head(const Tensor<T>& F) {
        require(F.c() == cfg_.channels && F.h() == cfg_.grid() && F.w() == cfg_.grid(), "gaussian_head: bad feature map");
        Tensor<T> y = head2_.forward(head_act_.forward(head1_.forward(F)));
        GaussianHeadOutput<T> out = probe_;
        out.images = F.n();
        out.raw.resize(static_cast<size_t>(F.n()) * out.tokens() * out.width());
        for (int n = 0; n < F.n(); ++n)
            for (int t = 0; t < out.tokens(); ++t)
                for (int k = 0; k < out.width(); ++k) out.row(n, t)[k] = y.at(n, k, t / out.grid, t % out.grid);
        return out;
    }

    Tensor<T> head_backward(const GaussianHeadOutput<T>& draw) {
        Tensor<T> dy(draw.images, draw.width(), draw.grid, draw.grid);
        for (int n = 0; n < draw.images; ++n)
            for (int t = 0; t < draw.tokens(); ++t)
                for (int k = 0; k < draw.width(); ++k) dy.at(n, k, t / draw.grid, t % draw.grid) = draw.row(n, t)[k];
        return head1_.backward(head_act_.backward(head2_.backward(dy)));
    }

    // ---------------------------------------------------------- refinement

    /// `steps` rounds of: sample F bilinearly at each Gaussian's position and
    /// 4 learned offsets, feed the samples through a shared linear map and add
    /// the result to the raw logits. Zero steps is the identity.
    GaussianHeadOutput<T> refine(const GaussianHeadOutput<T>& in, const Tensor<T>& F, int steps) {
        refine_cache_.clear();
        if (steps > 0) refine_F_ = F;
        GaussianHeadOutput<T> cur = in;
        for (int s = 0; s < steps; ++s) {
            RefineCache c;
            c.before = cur;
            refine_step(cur, F, c);
            refine_cache_.push_back(std::move(c));
        }
        return cur;
    }

    /// Returns d/d(input raw) and accumulates into dF.
    GaussianHeadOutput<T> refine_backward(const GaussianHeadOutput<T>& dout, Tensor<T>& dF) {
        GaussianHeadOutput<T> d = dout;
        for (auto it = refine_cache_.rbegin(); it != refine_cache_.rend(); ++it) refine_step_backward(*it, d, dF);
        return d;
    }

    // ------------------------------------------------------ full branch

    /// head -> refine -> constrain -> quantize (geometry per Gaussian, feature
    /// per token, opacity per Gaussian) -> straight-through -> splat at H x W.
    Output forward(const Tensor<T>& F, const Codebook<T>& geo_cb, const Codebook<T>& feat_cb,
                   const Codebook<T>& opacity_cb, QuantMode mode, T beta, int workers = 1) {
        require(geo_cb.dim() == kGeoDim, "gs_branch: geometry codebook must be 5-dimensional");
        require(feat_cb.dim() == cfg_.channels, "gs_branch: feature codebook width != channels");
        require(opacity_cb.dim() == 1, "gs_branch: opacity codebook must be 1-dimensional");
        input_shape_ = F.shape();
        workers_ = workers;
        beta_ = beta;
        raw_final_ = refine(head(F), F, cfg_.refine_steps);
        const auto& raw = raw_final_;
        const int N = raw.images, Tk = raw.tokens(), M = raw.gaussians_per_token, d = raw.feature_width;
        const int G = N * Tk * M;
        const GeometryMap<T> gm{raw.grid};

        Output out;
        // Constrained geometry + opacity per Gaussian.
        geo_.assign(static_cast<size_t>(G) * kGeoDim, T(0));
        opacity_.assign(G, T(0));
        scales_.assign(static_cast<size_t>(G) * 2, T(0));
        for (int n = 0; n < N; ++n)
            for (int t = 0; t < Tk; ++t)
                for (int m = 0; m < M; ++m) {
                    const T* r = raw.row(n, t) + m * kRawPerGaussian;
                    const size_t g = (static_cast<size_t>(n) * Tk + t) * M + m;
                    const T su = scale_from_raw(r[4]), sv = scale_from_raw(r[5]);
                    scales_[g * 2] = su;
                    scales_[g * 2 + 1] = sv;
                    T* gv = &geo_[g * kGeoDim];
                    gv[0] = gm.position(t % raw.grid, r[0]);
                    gv[1] = gm.position(t / raw.grid, r[1]);
                    gv[2] = rotation_from_raw(r[2], r[3]) / (T(2) * std::numbers::pi_v<T>);
                    gv[3] = (std::log(su) - log_center()) / log_spread();
                    gv[4] = (std::log(sv) - log_center()) / log_spread();
                    opacity_[g] = sigmoid(r[6]);
                }
        const int FP = raw.features_per_token();
        feat_.assign(static_cast<size_t>(N) * Tk * FP * d, T(0));
        for (int n = 0; n < N; ++n)
            for (int t = 0; t < Tk; ++t)
                for (int f = 0; f < FP; ++f)
                    std::copy_n(raw.feature(n, t, f), d, &feat_[((static_cast<size_t>(n) * Tk + t) * FP + f) * d]);

        out.geo_vectors = geo_;
        out.feat_vectors = feat_;
        auto gq = geo_site_.run(geo_, geo_cb, mode);
        auto fq = feat_site_.run(feat_, feat_cb, mode);
        auto oq = opacity_site_.run(opacity_, opacity_cb, mode);
        out.geo_indices = gq.indices;
        out.feat_indices = fq.indices;
        out.opacity_indices = oq.indices;
        out.commitment = geo_site_.commitment(geo_, kGeoDim, beta) + feat_site_.commitment(feat_, d, beta);
        geo_q_ = std::move(gq.values);
        feat_q_ = std::move(fq.values);
        opacity_q_ = std::move(oq.values);

        out.features = splat_images(geo_q_, opacity_q_, feat_q_, N);
        return out;
    }

    /// dF for the whole branch given dL/dF_2DGS; commitment enters with weight
    /// `commit_scale`.
    Tensor<T> backward(const Tensor<T>& dF2, T commit_scale = T(1)) {
        const auto& raw = raw_final_;
        const int N = raw.images, Tk = raw.tokens(), M = raw.gaussians_per_token, d = raw.feature_width;
        const int FP = raw.features_per_token();
        const int grid = raw.grid;
        const GeometryMap<T> gm{grid};
        constexpr T two_pi = T(2) * std::numbers::pi_v<T>;

        std::vector<T> dgeo(geo_.size(), T(0)), dop(opacity_.size(), T(0)), dfeat(feat_.size(), T(0));
        for (int n = 0; n < N; ++n) {
            FeatureMap<T> cot(grid, grid, d);
            for (int c = 0; c < d; ++c)
                for (int y = 0; y < grid; ++y)
                    for (int x = 0; x < grid; ++x) cot.at(y, x, c) = dF2.at(n, c, y, x);
            const auto batch = make_batch(geo_q_, opacity_q_, feat_q_, n);
            const auto sg = splat_backward(batch, {grid, grid}, cot, {workers_});
            for (int t = 0; t < Tk; ++t)
                for (int m = 0; m < M; ++m) {
                    const int k = t * M + m;
                    const size_t g = static_cast<size_t>(n) * Tk * M + k;
                    const T* q = &geo_q_[g * kGeoDim];
                    T* dg = &dgeo[g * kGeoDim];
                    // Dequantization chain: theta = 2pi q2, s = exp(spread q + center).
                    dg[0] = sg.geometry[k].position[0];
                    dg[1] = sg.geometry[k].position[1];
                    dg[2] = sg.geometry[k].rotation * two_pi;
                    dg[3] = sg.geometry[k].scales[0] * std::exp(log_spread() * q[3] + log_center()) * log_spread();
                    dg[4] = sg.geometry[k].scales[1] * std::exp(log_spread() * q[4] + log_center()) * log_spread();
                    dop[g] = sg.opacity[k];
                    const int f = FP == 1 ? 0 : m;
                    T* df = &dfeat[((static_cast<size_t>(n) * Tk + t) * FP + f) * d];
                    for (int c = 0; c < d; ++c) df[c] += sg.feature[k][c];
                }
        }
        // Straight-through: the cotangent w.r.t. quantized values is handed to
        // the raw values; commitment adds its own pull.
        geo_site_.commitment_grad(geo_, kGeoDim, beta_, commit_scale, dgeo);
        feat_site_.commitment_grad(feat_, d, beta_, commit_scale, dfeat);

        GaussianHeadOutput<T> draw = raw;
        std::fill(draw.raw.begin(), draw.raw.end(), T(0));
        for (int n = 0; n < N; ++n)
            for (int t = 0; t < Tk; ++t) {
                const T* r = raw.row(n, t);
                T* dr = draw.row(n, t);
                for (int m = 0; m < M; ++m) {
                    const size_t g = (static_cast<size_t>(n) * Tk + t) * M + m;
                    const T* rm = r + m * kRawPerGaussian;
                    T* drm = dr + m * kRawPerGaussian;
                    const T* dg = &dgeo[g * kGeoDim];
                    drm[0] = dg[0] * gm.position_grad(t % grid, rm[0]);
                    drm[1] = dg[1] * gm.position_grad(t / grid, rm[1]);
                    const auto rg = rotation_from_raw_grad(rm[2], rm[3]);
                    drm[2] = dg[2] / two_pi * rg[0];
                    drm[3] = dg[2] / two_pi * rg[1];
                    drm[4] = dg[3] / (log_spread() * scales_[g * 2]) * sigmoid(rm[4]);
                    drm[5] = dg[4] / (log_spread() * scales_[g * 2 + 1]) * sigmoid(rm[5]);
                    drm[6] = dop[g] * opacity_[g] * (T(1) - opacity_[g]);
                }
                for (int f = 0; f < FP; ++f)
                    std::copy_n(&dfeat[((static_cast<size_t>(n) * Tk + t) * FP + f) * d], d, draw.feature(n, t, f));
            }

        Tensor<T> dF(input_shape_[0], input_shape_[1], input_shape_[2], input_shape_[3]);
        const auto dhead = refine_backward(draw, dF);
        dF += head_backward(dhead);
        return dF;
    }

    /// Gaussians of image n from code entries (geometry rows, opacity values,
    /// feature rows); shared by the training path and token decoding.
    SplatBatch<T> make_batch(const std::vector<T>& geo, const std::vector<T>& opacity, const std::vector<T>& feat,
                             int n) const {
        const int Tk = cfg_.tokens(), M = cfg_.gaussians_per_token, d = cfg_.channels;
        const int FP = cfg_.feature_layout == FeatureLayout::shared ? 1 : M;
        SplatBatch<T> b;
        b.gaussians.resize(static_cast<size_t>(Tk) * M);
        b.token_of_gaussian.resize(b.gaussians.size());
        for (int t = 0; t < Tk; ++t)
            for (int m = 0; m < M; ++m) {
                const size_t g = (static_cast<size_t>(n) * Tk + t) * M + m;
                auto& G = b.gaussians[static_cast<size_t>(t) * M + m];
                const T* q = &geo[g * kGeoDim];
                G.position = {q[0], q[1]};
                G.rotation = q[2] * T(2) * std::numbers::pi_v<T>;
                G.scales = {std::exp(log_spread() * q[3] + log_center()), std::exp(log_spread() * q[4] + log_center())};
                G.opacity = opacity[g];
                const int f = FP == 1 ? 0 : m;
                const T* fv = &feat[((static_cast<size_t>(n) * Tk + t) * FP + f) * d];
                G.feature.assign(fv, fv + d);
                b.token_of_gaussian[static_cast<size_t>(t) * M + m] = t;
            }
        return b;
    }

    /// F_2DGS from code entries for N images.
    Tensor<T> splat_images(const std::vector<T>& geo, const std::vector<T>& opacity, const std::vector<T>& feat,
                           int N) const {
        const int grid = cfg_.grid(), d = cfg_.channels;
        Tensor<T> F2(N, d, grid, grid);
        for (int n = 0; n < N; ++n) {
            const auto fm = splat_forward(make_batch(geo, opacity, feat, n), {grid, grid}, {workers_});
            for (int c = 0; c < d; ++c)
                for (int y = 0; y < grid; ++y)
                    for (int x = 0; x < grid; ++x) F2.at(n, c, y, x) = fm.at(y, x, c);
        }
        return F2;
    }

    /// Quantized per-Gaussian values from the last forward (for tests).
    const std::vector<T>& last_geometry() const { return geo_q_; }
    const std::vector<T>& last_raw_geometry() const { return geo_; }
    const std::vector<T>& last_opacity() const { return opacity_q_; }
    const std::vector<T>& last_features() const { return feat_q_; }
    const GaussianHeadOutput<T>& last_raw() const { return raw_final_; }

    T log_center() const { return static_cast<T>(cfg_.geo_log_scale_center); }
    T log_spread() const { return static_cast<T>(cfg_.geo_log_scale_spread); }

    void set_workers(int w) { workers_ = w; }

private:
    struct RefineCache {
        GaussianHeadOutput<T> before;
        std::vector<Vec2<T>> centers;     // per Gaussian
        std::vector<BilinearTap<T>> taps; // per Gaussian x sample
        std::vector<T> z;                 // per Gaussian: 5 * d sampled features
    };

    Vec2<T> sample_offset(int j) const {
        if (j == 0) return {T(0), T(0)};
        const T cell = T(1) / static_cast<T>(cfg_.grid());
        return {offsets_.value.at(0, 0, j - 1, 0) * cell, offsets_.value.at(0, 0, j - 1, 1) * cell};
    }

    void refine_step(GaussianHeadOutput<T>& cur, const Tensor<T>& F, RefineCache& c) {
        const int N = cur.images, Tk = cur.tokens(), M = cur.gaussians_per_token, d = cur.feature_width;
        const int H = F.h(), W = F.w();
        const int in = kRefineSamples * d, outw = kRawPerGaussian + d;
        const GeometryMap<T> gm{cur.grid};
        const size_t G = static_cast<size_t>(N) * Tk * M;
        c.centers.resize(G);
        c.taps.resize(G * kRefineSamples);
        c.z.assign(G * in, T(0));
        const T* Wt = refine_w_.value.data();
        const T* bt = refine_b_.value.data();
        std::vector<T> res(outw);
        for (int n = 0; n < N; ++n)
            for (int t = 0; t < Tk; ++t) {
                T* row = cur.row(n, t);
                const T* brow = c.before.row(n, t);
                for (int m = 0; m < M; ++m) {
                    const size_t g = (static_cast<size_t>(n) * Tk + t) * M + m;
                    const T* rm = brow + m * kRawPerGaussian;
                    const Vec2<T> p{gm.position(t % cur.grid, rm[0]), gm.position(t / cur.grid, rm[1])};
                    c.centers[g] = p;
                    T* z = &c.z[g * in];
                    for (int j = 0; j < kRefineSamples; ++j) {
                        const auto o = sample_offset(j);
                        const auto tap = bilinear_tap<T>(H, W, {p[0] + o[0], p[1] + o[1]});
                        c.taps[g * kRefineSamples + j] = tap;
                        for (int ch = 0; ch < d; ++ch) z[j * d + ch] = bilinear_value(F, n, ch, tap);
                    }
                    for (int o = 0; o < outw; ++o) {
                        T s = bt[o];
                        for (int i = 0; i < in; ++i) s += Wt[static_cast<size_t>(o) * in + i] * z[i];
                        res[o] = s;
                    }
                    T* rmo = row + m * kRawPerGaussian;
                    for (int k = 0; k < kRawPerGaussian; ++k) rmo[k] += res[k];
                    if (cur.layout == FeatureLayout::shared) {
                        T* f = cur.feature(n, t, 0);
                        for (int ch = 0; ch < d; ++ch) f[ch] += res[kRawPerGaussian + ch] / static_cast<T>(M);
                    } else {
                        T* f = cur.feature(n, t, m);
                        for (int ch = 0; ch < d; ++ch) f[ch] += res[kRawPerGaussian + ch];
                    }
                }
            }
    }

    static T bilinear_value(const Tensor<T>& F, int n, int c, const BilinearTap<T>& t) {
        const T a = F.at(n, c, t.y0, t.x0), b = F.at(n, c, t.y0, t.x1);
        const T e = F.at(n, c, t.y1, t.x0), f = F.at(n, c, t.y1, t.x1);
        return (T(1) - t.fy) * ((T(1) - t.fx) * a + t.fx * b) + t.fy * ((T(1) - t.fx) * e + t.fx * f);
    }

    /// `d` holds dL/d(raw after step) on entry and dL/d(raw before step) on exit.
    void refine_step_backward(const RefineCache& c, GaussianHeadOutput<T>& d, Tensor<T>& dF) {
        const auto& before = c.before;
        const int N = before.images, Tk = before.tokens(), M = before.gaussians_per_token, dd = before.feature_width;
        const int in = kRefineSamples * dd, outw = kRawPerGaussian + dd;
        const GeometryMap<T> gm{before.grid};
        const T cell = T(1) / static_cast<T>(cfg_.grid());
        const T* Wt = refine_w_.value.data();
        T* dW = refine_w_.grad.data();
        T* db = refine_b_.grad.data();
        std::vector<T> dres(outw), dz(in);
        // Residual path is identity, so d already carries d/d(before) for the
        // skip term; add the contribution through the sampled features.
        GaussianHeadOutput<T> dextra = d;
        std::fill(dextra.raw.begin(), dextra.raw.end(), T(0));
        for (int n = 0; n < N; ++n)
            for (int t = 0; t < Tk; ++t)
                for (int m = 0; m < M; ++m) {
                    const size_t g = (static_cast<size_t>(n) * Tk + t) * M + m;
                    const T* drow = d.row(n, t) + m * kRawPerGaussian;
                    for (int k = 0; k < kRawPerGaussian; ++k) dres[k] = drow[k];
                    const T* dfeat = before.layout == FeatureLayout::shared ? d.feature(n, t, 0) : d.feature(n, t, m);
                    const T fscale = before.layout == FeatureLayout::shared ? T(1) / static_cast<T>(M) : T(1);
                    for (int ch = 0; ch < dd; ++ch) dres[kRawPerGaussian + ch] = dfeat[ch] * fscale;

                    const T* z = &c.z[g * in];
                    std::fill(dz.begin(), dz.end(), T(0));
                    for (int o = 0; o < outw; ++o) {
                        const T go = dres[o];
                        if (go == T(0)) continue;
                        db[o] += go;
                        T* dWrow = dW + static_cast<size_t>(o) * in;
                        const T* Wrow = Wt + static_cast<size_t>(o) * in;
                        for (int i = 0; i < in; ++i) {
                            dWrow[i] += go * z[i];
                            dz[i] += go * Wrow[i];
                        }
                    }
                    // Back through bilinear sampling into F and the sample positions.
                    Vec2<T> dp{T(0), T(0)};
                    for (int j = 0; j < kRefineSamples; ++j) {
                        const auto& tap = c.taps[g * kRefineSamples + j];
                        Vec2<T> dpj{T(0), T(0)};
                        for (int ch = 0; ch < dd; ++ch) {
                            const T gz = dz[j * dd + ch];
                            if (gz == T(0)) continue;
                            dF.at(n, ch, tap.y0, tap.x0) += gz * (T(1) - tap.fy) * (T(1) - tap.fx);
                            dF.at(n, ch, tap.y0, tap.x1) += gz * (T(1) - tap.fy) * tap.fx;
                            dF.at(n, ch, tap.y1, tap.x0) += gz * tap.fy * (T(1) - tap.fx);
                            dF.at(n, ch, tap.y1, tap.x1) += gz * tap.fy * tap.fx;
                            const T fa = refine_F_.at(n, ch, tap.y0, tap.x0), fb = refine_F_.at(n, ch, tap.y0, tap.x1);
                            const T fe = refine_F_.at(n, ch, tap.y1, tap.x0), ff = refine_F_.at(n, ch, tap.y1, tap.x1);
                            const T dvdu = (T(1) - tap.fy) * (fb - fa) + tap.fy * (ff - fe);
                            const T dvdv = (T(1) - tap.fx) * (fe - fa) + tap.fx * (ff - fb);
                            dpj[0] += gz * dvdu * tap.dudx;
                            dpj[1] += gz * dvdv * tap.dvdy;
                        }
                        dp[0] += dpj[0];
                        dp[1] += dpj[1];
                        if (j > 0) {
                            offsets_.grad.at(0, 0, j - 1, 0) += dpj[0] * cell;
                            offsets_.grad.at(0, 0, j - 1, 1) += dpj[1] * cell;
                        }
                    }
                    const T* rm = before.row(n, t) + m * kRawPerGaussian;
                    T* dxm = dextra.row(n, t) + m * kRawPerGaussian;
                    dxm[0] += dp[0] * gm.position_grad(t % before.grid, rm[0]);
                    dxm[1] += dp[1] * gm.position_grad(t / before.grid, rm[1]);
                }
        for (size_t i = 0; i < d.raw.size(); ++i) d.raw[i] += dextra.raw[i];
    }

    ModelConfig cfg_;
    GaussianHeadOutput<T> probe_;
    nn::Conv2d<T> head1_, head2_;
    nn::SiLU<T> head_act_;
    Param<T> offsets_, refine_w_, refine_b_;
    std::vector<RefineCache> refine_cache_;
    Tensor<T> refine_F_; // sampled map, needed again for position derivatives

    std::array<int, 4> input_shape_{};
    int workers_ = 1;
    T beta_ = T(0.25);
    GaussianHeadOutput<T> raw_final_;
    std::vector<T> geo_, opacity_, scales_, feat_;
    std::vector<T> geo_q_, opacity_q_, feat_q_;
    QuantSite<T> geo_site_, feat_site_, opacity_site_;
};

} // namespace vgq
