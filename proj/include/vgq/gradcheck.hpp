// Copyright Contributors to the VGQ Project
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "vgq/gaussian2d.hpp"
#include "vgq/losses.hpp"
#include "vgq/model.hpp"
#include "vgq/nets/discriminator.hpp"
#include "vgq/nets/fusion.hpp"
#include "vgq/nets/perceptual.hpp"
#include "vgq/splat.hpp"

namespace vgq {

inline constexpr int kGradcheckMaxSize = 4;

struct GradcheckOptions {
    uint64_t seed = 42;
    int configs = 100;       // random miniature configurations per operation
    int size = 1;            // miniature scale, 1..kGradcheckMaxSize
    double step = 1e-5;      // central-difference step
    double tolerance = 1e-3; // relative error bound
    int samples = 24;        // coordinates compared per configuration
    std::string fault;       // operation whose analytic gradient is corrupted
    std::vector<std::string> only;
};

struct GradcheckResult {
    std::string op;
    int configs = 0;
    double worst = 0.0;
    int skipped = 0; // probes dropped for straddling a kink
    double seconds = 0.0;
    bool passed = true;
};

/// ||a - n|| / max(||a||, ||n||, floor) over the compared coordinates.
inline double relative_error(const std::vector<double>& a, const std::vector<double>& n, double floor = 1e-7) {
    double d = 0, na = 0, nn = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        d += (a[i] - n[i]) * (a[i] - n[i]);
        na += a[i] * a[i];
        nn += n[i] * n[i];
    }
    return std::sqrt(d) / std::max({std::sqrt(na), std::sqrt(nn), floor});
}

namespace gc {

using D = double;

/// A coordinate under test: where the value lives and its analytic slope.
struct Probe {
    D* value;
    D analytic;
};

inline constexpr double kKinkRelative = 1e-3;
inline constexpr double kKinkAbsolute = 1e-7;

/// Central differences of `loss` at every probe. With `kinks` set, a probe
/// whose one-sided slopes disagree straddles a non-differentiable point and
/// comes back as NaN.
inline std::vector<D> numeric(const std::vector<Probe>& probes, const std::function<D()>& loss, D h,
                              bool kinks = false) {
    std::vector<D> out;
    out.reserve(probes.size());
    const D l0 = kinks ? loss() : D(0);
    for (const auto& p : probes) {
        const D x0 = *p.value;
        *p.value = x0 + h;
        const D lp = loss();
        *p.value = x0 - h;
        const D lm = loss();
        *p.value = x0;
        const D fwd = (lp - l0) / h, bwd = (l0 - lm) / h;
        if (kinks && std::abs(fwd - bwd) > kKinkRelative * std::max(std::abs(fwd), std::abs(bwd)) + kKinkAbsolute)
            out.push_back(std::numeric_limits<D>::quiet_NaN());
        else
            out.push_back((lp - lm) / (2 * h));
    }
    return out;
}

struct Context {
    Rng& rng;
    const GradcheckOptions& opt;
    bool corrupt = false;

    int pick(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }
    D uniform(D lo, D hi) { return std::uniform_real_distribution<D>(lo, hi)(rng); }
    D normal(D s = 1) { return std::normal_distribution<D>(0, s)(rng); }

    void randomize(Tensor<D>& t, D s = 1) {
        for (auto& v : t.values()) v = normal(s);
    }
    /// Perturbs each tensor relative to its own scale; all-zero tensors get `s`.
    void randomize_params(const ParamRefs<D>& ps, D s) {
        for (auto* p : ps) {
            D rms = 0;
            for (auto v : p->value.values()) rms += v * v;
            rms = p->value.size() ? std::sqrt(rms / static_cast<D>(p->value.size())) : 0;
            for (auto& v : p->value.values()) v += normal(rms > 0 ? D(0.5) * rms : s);
        }
    }

    /// Picks probes spread over every tensor, `samples` in total.
    std::vector<Probe> probes(const ParamRefs<D>& ps, std::vector<std::pair<Tensor<D>*, const Tensor<D>*>> inputs) {
        std::vector<std::pair<Tensor<D>*, const Tensor<D>*>> all = std::move(inputs);
        for (auto* p : ps) all.emplace_back(&p->value, &p->grad);
        std::vector<Probe> out;
        if (all.empty()) return out;
        const int per = std::max(1, opt.samples / static_cast<int>(all.size()));
        for (auto& [val, grad] : all) {
            if (val->size() == 0) continue;
            for (int k = 0; k < per; ++k) {
                const size_t i = std::uniform_int_distribution<size_t>(0, val->size() - 1)(rng);
                out.push_back({val->data() + i, (*grad)[i]});
            }
        }
        return out;
    }

    bool kinks = false;
    int skipped = 0;

    double compare(const std::vector<Probe>& probes, const std::function<D()>& loss) {
        const auto n = numeric(probes, loss, opt.step, kinks);
        std::vector<D> a, b;
        for (size_t i = 0; i < probes.size(); ++i) {
            if (std::isnan(n[i])) {
                ++skipped;
                continue;
            }
            a.push_back(probes[i].analytic);
            b.push_back(n[i]);
        }
        if (corrupt && !a.empty()) a[0] = a[0] * 1.5 + 0.1;
        return relative_error(a, b);
    }
};

inline D dot(const Tensor<D>& a, const Tensor<D>& b) {
    D s = 0;
    for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline ModelConfig mini_config(Context& c) {
    ModelConfig m;
    const int S = c.opt.size;
    m.downsample = 1 << c.pick(0, 2);
    m.resolution = m.downsample * c.pick(1, 2) * S;
    m.channels = c.pick(1, 3);
    m.base_width = c.pick(1, 3);
    m.res_blocks = c.pick(0, 1);
    m.head_width = c.pick(2, 4);
    m.gaussians_per_token = c.pick(1, 3);
    m.feature_layout = c.pick(0, 1) ? FeatureLayout::shared : FeatureLayout::per_gaussian;
    m.refine_steps = c.pick(0, 2);
    m.k_vq = m.k_geo = m.k_feat = c.pick(2, 6);
    m.opacity_levels = 4;
    m.disc_width = c.pick(1, 3);
    m.disc_layers = c.pick(1, 2);
    return m;
}

/// Smallest distance (normalized units) from any pixel center to the edge of
/// any Gaussian's cutoff box; small values mean a difference step could
/// cross the truncation boundary.
template <class T>
T cutoff_margin(const SplatBatch<T>& b, GridShape grid) {
    T best = std::numeric_limits<T>::max();
    for (const auto& g : b.gaussians) {
        const auto p = detail::prepare(g, static_cast<T>(kSplatCutoffSigma));
        for (int y = 0; y < grid.height; ++y)
            for (int x = 0; x < grid.width; ++x) {
                const auto c = pixel_center<T>(x, y, grid);
                best = std::min({best, std::abs(std::abs(c[0] - g.position[0]) - p.half_x),
                                 std::abs(std::abs(c[1] - g.position[1]) - p.half_y)});
            }
    }
    return best;
}

inline constexpr double kCutoffGuard = 1e-4;

// ------------------------------------------------------------- operations

inline double check_gaussian_eval(Context& c) {
    Gaussian2D<D> g;
    g.position = {c.uniform(0, 1), c.uniform(0, 1)};
    g.rotation = c.uniform(0, 2 * std::numbers::pi);
    g.scales = {c.uniform(0.05, 0.5), c.uniform(0.05, 0.5)};
    const Vec2<D> x{g.position[0] + c.normal(0.2), g.position[1] + c.normal(0.2)};
    const auto grad = eval_gaussian_grad(g, x);
    std::vector<Probe> probes = {{&g.position[0], grad.position[0]},
                                 {&g.position[1], grad.position[1]},
                                 {&g.rotation, grad.rotation},
                                 {&g.scales[0], grad.scales[0]},
                                 {&g.scales[1], grad.scales[1]}};
    return c.compare(probes, [&] { return eval_gaussian(g, x); });
}

inline double check_splat(Context& c) {
    for (;;) {
        const int S = c.opt.size;
        const GridShape grid{c.pick(2, 6) * S, c.pick(2, 6) * S};
        const int d = c.pick(1, 3), n = c.pick(1, 5);
        SplatBatch<D> b;
        for (int k = 0; k < n; ++k) {
            Gaussian2D<D> g;
            g.position = {c.uniform(-0.1, 1.1), c.uniform(-0.1, 1.1)};
            g.rotation = c.uniform(0, 2 * std::numbers::pi);
            g.scales = {c.uniform(0.05, 0.6), c.uniform(0.05, 0.6)};
            g.opacity = c.uniform(0.1, 1.0);
            for (int i = 0; i < d; ++i) g.feature.push_back(c.normal());
            b.gaussians.push_back(g);
            b.token_of_gaussian.push_back(k);
        }
        if (cutoff_margin(b, grid) < kCutoffGuard) continue;
        FeatureMap<D> w(grid.height, grid.width, d);
        for (auto& v : w.data) v = c.normal();
        const auto sg = splat_backward(b, grid, w);
        std::vector<Probe> probes;
        for (int k = 0; k < n; ++k) {
            auto& g = b.gaussians[k];
            probes.push_back({&g.position[0], sg.geometry[k].position[0]});
            probes.push_back({&g.position[1], sg.geometry[k].position[1]});
            probes.push_back({&g.rotation, sg.geometry[k].rotation});
            probes.push_back({&g.scales[0], sg.geometry[k].scales[0]});
            probes.push_back({&g.scales[1], sg.geometry[k].scales[1]});
            probes.push_back({&g.opacity, sg.opacity[k]});
            for (int i = 0; i < d; ++i) probes.push_back({&g.feature[i], sg.feature[k][i]});
        }
        return c.compare(probes, [&] {
            const auto f = splat_forward(b, grid);
            D s = 0;
            for (size_t i = 0; i < f.data.size(); ++i) s += f.data[i] * w.data[i];
            return s;
        });
    }
}

inline double check_encoder(Context& c) {
    const ModelConfig m = mini_config(c);
    Encoder<D> enc(m);
    enc.init(c.rng);
    ParamRefs<D> ps;
    enc.params(ps);
    c.randomize_params(ps, 0.5);
    Tensor<D> x(c.pick(1, 2), 3, m.resolution, m.resolution);
    c.randomize(x);
    Tensor<D> w(x.n(), m.channels, m.grid(), m.grid());
    c.randomize(w);
    zero_grads(ps);
    enc.forward(x);
    const Tensor<D> dx = enc.backward(w);
    return c.compare(c.probes(ps, {{&x, &dx}}), [&] { return dot(enc.forward(x), w); });
}

inline double check_decoder(Context& c) {
    const ModelConfig m = mini_config(c);
    Decoder<D> dec(m);
    dec.init(c.rng);
    ParamRefs<D> ps;
    dec.params(ps);
    c.randomize_params(ps, 0.5);
    Tensor<D> z(c.pick(1, 2), m.channels, m.grid(), m.grid());
    c.randomize(z);
    Tensor<D> w(z.n(), 3, m.resolution, m.resolution);
    c.randomize(w);
    zero_grads(ps);
    dec.forward(z);
    const Tensor<D> dz = dec.backward(w);
    return c.compare(c.probes(ps, {{&z, &dz}}), [&] { return dot(dec.forward(z), w); });
}

/// Learned-offset sampling plus the shared linear map, isolated from the
/// head and the splatting.
inline double check_refinement_with(Context& c, const ModelConfig& m) {
    c.kinks = true;
    GaussianBranch<D> gs(m);
    gs.init(c.rng);
    c.randomize(gs.refine_weight().value, 0.3);
    c.randomize(gs.refine_bias().value, 0.3);
    c.randomize(gs.refine_offsets().value, 0.6);
    ParamRefs<D> ps = {&gs.refine_offsets(), &gs.refine_weight(), &gs.refine_bias()};
    Tensor<D> F(c.pick(1, 2), m.channels, m.grid(), m.grid());
    c.randomize(F);
    GaussianHeadOutput<D> in{F.n(), m.grid(), m.gaussians_per_token, m.channels, m.feature_layout, {}};
    in.raw.resize(static_cast<size_t>(in.images) * in.tokens() * in.width());
    for (auto& v : in.raw) v = c.normal();
    std::vector<D> w(in.raw.size());
    for (auto& v : w) v = c.normal();

    zero_grads(ps);
    gs.refine(in, F, m.refine_steps);
    GaussianHeadOutput<D> dout = in;
    dout.raw = w;
    Tensor<D> dF(F.shape());
    const auto din = gs.refine_backward(dout, dF);
    Tensor<D> raw_in(1, 1, 1, static_cast<int>(in.raw.size()));
    Tensor<D> draw_in(1, 1, 1, static_cast<int>(in.raw.size()));
    std::copy(in.raw.begin(), in.raw.end(), raw_in.data());
    std::copy(din.raw.begin(), din.raw.end(), draw_in.data());
    return c.compare(c.probes(ps, {{&F, &dF}, {&raw_in, &draw_in}}), [&] {
        GaussianHeadOutput<D> cur = in;
        std::copy(raw_in.data(), raw_in.data() + raw_in.size(), cur.raw.begin());
        const auto out = gs.refine(cur, F, m.refine_steps);
        D s = 0;
        for (size_t i = 0; i < w.size(); ++i) s += out.raw[i] * w[i];
        return s;
    });
}

inline double check_refinement(Context& c) {
    ModelConfig m = mini_config(c);
    m.refine_steps = c.pick(1, 2);
    return check_refinement_with(c, m);
}

inline double check_discriminator(Context& c) {
    ModelConfig m = mini_config(c);
    m.disc_layers = c.pick(1, 3);
    m.resolution = (1 << m.disc_layers) * c.pick(1, 2) * c.opt.size;
    Discriminator<D> disc(m);
    disc.init(c.rng);
    ParamRefs<D> ps;
    disc.params(ps);
    c.randomize_params(ps, 0.5);
    Tensor<D> x(c.pick(1, 2), 3, m.resolution, m.resolution);
    c.randomize(x);
    const Tensor<D> logits = disc.forward(x);
    Tensor<D> w(logits.shape());
    c.randomize(w);
    zero_grads(ps);
    disc.forward(x);
    const Tensor<D> dx = disc.backward(w);
    return c.compare(c.probes(ps, {{&x, &dx}}), [&] { return dot(disc.forward(x), w); });
}

inline double check_fusion(Context& c, FusionMode mode) {
    const int d = c.pick(1, 4), S = c.opt.size;
    Fusion<D> fu(mode, d);
    fu.init(c.rng);
    ParamRefs<D> ps;
    fu.params(ps);
    c.randomize_params(ps, 0.5);
    Tensor<D> a(c.pick(1, 2), d, c.pick(1, 3) * S, c.pick(1, 3) * S), b(a.shape());
    c.randomize(a);
    c.randomize(b);
    Tensor<D> w(a.shape());
    c.randomize(w);
    zero_grads(ps);
    fu.forward(a, b);
    auto [da, db] = fu.backward(w);
    return c.compare(c.probes(ps, {{&a, &da}, {&b, &db}}), [&] { return dot(fu.forward(a, b), w); });
}

inline double check_perceptual(Context& c) {
    const auto ex = make_extractor<D>("random_conv", static_cast<uint64_t>(c.pick(0, 1000)));
    const int R = 4 * c.pick(1, 2) * c.opt.size;
    Tensor<D> x(c.pick(1, 2), 3, R, R), t(x.shape());
    c.randomize(x, 0.5);
    c.randomize(t, 0.5);
    const Tensor<D> g = loss_perceptual_grad(t, x, *ex);
    return c.compare(c.probes({}, {{&x, &g}}), [&] { return static_cast<D>(loss_perceptual(t, x, *ex)); });
}

/// Encoder -> branches -> fusion -> decoder. `frozen` pins quantization to
/// the entries of a preceding nearest pass (straight-through Jacobian);
/// `passthrough` differentiates the unquantized composite.
inline double check_model_with(Context& c, const ModelConfig& m, QuantMode mode) {
    c.kinks = true;
    VgqModel<D> model(m);
    model.init(c.rng);
    ParamRefs<D> ps = model.params();
    c.randomize_params(ps, 0.2);
    Tensor<D> x(c.pick(1, 2), 3, m.resolution, m.resolution);
    for (auto& v : x.values()) v = c.uniform(0, 1);
    model.init_codebooks(x, c.rng);
    const auto f0 = model.forward(x, mode == QuantMode::frozen ? QuantMode::nearest : mode);
    if (model.gaussian()) {
        const auto& gsb = model.gaussian_branch();
        for (int n = 0; n < x.n(); ++n)
            if (cutoff_margin(gsb.make_batch(gsb.last_geometry(), gsb.last_opacity(), gsb.last_features(), n),
                              {m.grid(), m.grid()}) < kCutoffGuard)
                return -1.0;
    }
    Tensor<D> w(f0.recon.shape());
    c.randomize(w);
    const D beta = 0.25;
    zero_grads(ps);
    model.forward(x, mode, beta);
    model.backward(w, 1.0);
    return c.compare(c.probes(ps, {}), [&] {
        const auto g = model.forward(x, mode, beta);
        return dot(g.recon, w) + g.commitment;
    });
}

inline double check_model(Context& c, BranchMode branch) {
    for (;;) {
        ModelConfig m = mini_config(c);
        m.branch = branch;
        m.fusion = static_cast<FusionMode>(c.pick(0, 3));
        if (const double e = check_model_with(c, m, QuantMode::frozen); e >= 0) return e;
    }
}

} // namespace gc

struct GradcheckOp {
    std::string name;
    std::function<double(gc::Context&)> run;
};

inline std::vector<GradcheckOp> gradcheck_ops() {
    using namespace gc;
    return {
        {"gaussian_eval", check_gaussian_eval},
        {"splat", check_splat},
        {"encoder", check_encoder},
        {"decoder", check_decoder},
        {"refinement", check_refinement},
        {"discriminator", check_discriminator},
        {"fusion.hadamard", [](Context& c) { return check_fusion(c, FusionMode::hadamard); }},
        {"fusion.add", [](Context& c) { return check_fusion(c, FusionMode::add); }},
        {"fusion.mask_adding", [](Context& c) { return check_fusion(c, FusionMode::mask_adding); }},
        {"fusion.cross_attention", [](Context& c) { return check_fusion(c, FusionMode::cross_attention); }},
        {"perceptual", check_perceptual},
        {"model.gaussian", [](Context& c) { return check_model(c, BranchMode::gaussian); }},
        {"model.dual_vq", [](Context& c) { return check_model(c, BranchMode::dual_vq); }},
    };
}

/// Runs every (or every selected) operation over `configs` random miniature
/// configurations in 64-bit arithmetic.
inline std::vector<GradcheckResult> run_gradcheck(const GradcheckOptions& opt) {
    if (opt.size < 1 || opt.size > kGradcheckMaxSize)
        throw ContractError("gradcheck: size must be in [1, " + std::to_string(kGradcheckMaxSize) + "]");
    if (opt.configs < 1) throw ContractError("gradcheck: configs must be >= 1");
    std::vector<GradcheckResult> out;
    for (const auto& op : gradcheck_ops()) {
        if (!opt.only.empty() && std::find(opt.only.begin(), opt.only.end(), op.name) == opt.only.end()) continue;
        Rng rng(opt.seed ^ std::hash<std::string>{}(op.name));
        gc::Context ctx{rng, opt, opt.fault == op.name};
        GradcheckResult r;
        r.op = op.name;
        const auto t0 = std::chrono::steady_clock::now();
        for (int k = 0; k < opt.configs; ++k) {
            const double e = op.run(ctx);
            r.worst = std::max(r.worst, std::isfinite(e) ? e : std::numeric_limits<double>::infinity());
            ++r.configs;
        }
        r.skipped = ctx.skipped;
        r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        r.passed = r.worst <= opt.tolerance;
        out.push_back(r);
    }
    return out;
}

} // namespace vgq
