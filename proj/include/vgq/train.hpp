// Copyright Contributors to the VGQ Project
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "vgq/config.hpp"
#include "vgq/data.hpp"
#include "vgq/io/archive.hpp"
#include "vgq/losses.hpp"
#include "vgq/metrics.hpp"
#include "vgq/model.hpp"
#include "vgq/nets/discriminator.hpp"
#include "vgq/nets/perceptual.hpp"
#include "vgq/optim.hpp"

namespace vgq {

struct StepReport {
    int64_t step = 0; // 1-based
    int epoch = 0;
    LossComponents loss;
    double total = 0.0;
    double gamma = 0.0; // effective adversarial weight this step
    double grad_norm = 0.0;
    double disc_grad_norm = 0.0;
    std::map<std::string, double> utilization; // distinct entries hit in this batch / K
    int revived = 0;
    double wall_time = 0.0; // seconds

    nlohmann::json to_json(bool with_wall_time) const {
        nlohmann::json j{{"type", "step"},
                         {"step", step},
                         {"epoch", epoch},
                         {"rec", loss.rec},
                         {"adv_g", loss.adv_g},
                         {"adv_d", loss.adv_d},
                         {"perceptual", loss.perceptual},
                         {"commitment", loss.commitment},
                         {"total", total},
                         {"gamma", gamma},
                         {"grad_norm", grad_norm},
                         {"disc_grad_norm", disc_grad_norm},
                         {"utilization", utilization},
                         {"revived", revived}};
        if (with_wall_time) j["wall_time"] = wall_time;
        return j;
    }
};

/// gamma is 0 for the first W steps, then ramps linearly to its configured
/// value over the next W steps. `step` is 0-based.
inline double adversarial_weight(const TrainConfig& cfg, int64_t step) {
    const int64_t W = cfg.adversarial_warmup_steps;
    if (W == 0) return cfg.gamma;
    if (step < W) return 0.0;
    if (step < 2 * W) return cfg.gamma * static_cast<double>(step - W + 1) / static_cast<double>(W);
    return cfg.gamma;
}

/// Everything mutated by training: generator, discriminator, codebooks,
/// optimizer moments and the RNG stream.
class Trainer {
public:
    explicit Trainer(const TrainConfig& cfg)
        : cfg_(cfg), model_(cfg.model, static_cast<float>(cfg.ema_decay)), disc_(cfg.model),
          extractor_(make_extractor<float>(cfg.model.perceptual, cfg.model.perceptual_seed)), rng_(cfg.seed) {
        cfg.validate();
        model_.init(rng_);
        disc_.init(rng_);
        model_.set_workers(cfg.workers);
    }

    const TrainConfig& config() const { return cfg_; }
    VgqModel<float>& model() { return model_; }
    Discriminator<float>& discriminator() { return disc_; }
    const FeatureExtractor<float>& extractor() const { return *extractor_; }
    Rng& rng() { return rng_; }
    int64_t step() const { return step_; }
    int epoch() const { return epoch_; }
    void set_epoch(int e) { epoch_ = e; }

    /// Training-side knobs (epochs, max_steps, ...) may change on resume;
    /// anything shaping the networks must not.
    void override_schedule(const TrainConfig& cfg) {
        TrainConfig probe = cfg;
        probe.epochs = cfg_.epochs;
        probe.max_steps = cfg_.max_steps;
        probe.keep_checkpoints = cfg_.keep_checkpoints;
        probe.log_wall_time = cfg_.log_wall_time;
        probe.workers = cfg_.workers;
        if (serialize_config(probe) != serialize_config(cfg_))
            throw ConfigError("resume: config differs from the checkpoint beyond epochs/max_steps/keep_checkpoints/"
                              "log_wall_time/workers");
        cfg_ = cfg;
        model_.set_workers(cfg.workers);
    }

    StepReport train_step(const Tensor<float>& batch) {
        require(batch.n() >= 1, "train_step: empty batch");
        const auto t0 = std::chrono::steady_clock::now();
        const int R = cfg_.model.resolution;
        if (batch.c() != 3 || batch.h() != R || batch.w() != R)
            throw ContractError("train_step: batch " + shape_string(batch.shape()) + " does not match resolution " +
                                std::to_string(R));
        if (!model_.vq_codebook().initialized()) model_.init_codebooks(batch, rng_);

        StepReport rep;
        rep.step = step_ + 1;
        rep.epoch = epoch_;
        rep.gamma = adversarial_weight(cfg_, step_);

        const auto gen = model_.params();
        ParamRefs<float> dps;
        disc_.params(dps);
        zero_grads(gen);

        const QuantMode mode = cfg_.model.quantize ? QuantMode::nearest : QuantMode::passthrough;
        const auto f = model_.forward(batch, mode, static_cast<float>(cfg_.beta));
        rep.loss.rec = loss_rec(batch, f.recon);
        Tensor<float> drecon = loss_rec_grad(batch, f.recon);
        rep.loss.commitment = f.commitment;
        if (cfg_.eta > 0.0) {
            rep.loss.perceptual = loss_perceptual(batch, f.recon, *extractor_);
            Tensor<float> g = loss_perceptual_grad(batch, f.recon, *extractor_);
            g *= static_cast<float>(cfg_.eta);
            drecon += g;
        }
        if (rep.gamma > 0.0) {
            const Tensor<float> fake = disc_.forward(f.recon);
            rep.loss.adv_g = loss_adv(fake, fake, AdvSide::generator);
            Tensor<float> g = disc_.backward(loss_adv_generator_grad(fake));
            g *= static_cast<float>(rep.gamma);
            drecon += g;
            zero_grads(dps);
        }
        check_finite(rep.loss);
        rep.total = total_loss(rep.loss, rep.gamma, cfg_.eta);

        model_.backward(drecon, 1.0f);
        for (auto* p : gen)
            if (!p->grad.all_finite()) throw NumericError("non-finite gradient in '" + p->name + "'");
        rep.grad_norm = clip_grad_norm(gen, cfg_.grad_clip);
        optimizer_step(gen, gen_opt_, cfg_.learning_rate);

        update_codebooks(f, rep);

        if (rep.gamma > 0.0) {
            zero_grads(dps);
            const Tensor<float> real = disc_.forward(batch);
            disc_.backward(loss_adv_discriminator_grad(real, real).first);
            const Tensor<float> fake = disc_.forward(f.recon);
            disc_.backward(loss_adv_discriminator_grad(fake, fake).second);
            rep.loss.adv_d = loss_adv(real, fake, AdvSide::discriminator);
            if (!std::isfinite(rep.loss.adv_d)) throw NumericError("non-finite loss component 'adv_d'");
            rep.disc_grad_norm = clip_grad_norm(dps, cfg_.grad_clip);
            optimizer_step(dps, disc_opt_, cfg_.learning_rate);
        }

        ++step_;
        rep.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        return rep;
    }

    // ------------------------------------------------------------ checkpoint

    io::Archive to_archive() {
        io::Archive a;
        a.text() = serialize_config(cfg_);
        const int64_t counters[] = {step_, epoch_};
        a.put_i64("trainer.counters", counters);
        std::ostringstream rs;
        rs << rng_;
        a.put_bytes("trainer.rng", rs.str());
        ParamRefs<float> dps;
        disc_.params(dps);
        put_params(a, "gen", model_.params(), gen_opt_);
        put_params(a, "disc", dps, disc_opt_);
        for (auto& [name, cb] : model_.codebooks()) put_codebook(a, "codebook." + name, *cb);
        return a;
    }

    void save(const std::filesystem::path& path) { to_archive().save(path); }

    static Trainer from_archive(const io::Archive& a) {
        Trainer t(parse_config(a.text()));
        const auto counters = a.get_i64("trainer.counters", 2);
        t.step_ = counters[0];
        t.epoch_ = static_cast<int>(counters[1]);
        std::istringstream rs(a.get_bytes("trainer.rng"));
        rs >> t.rng_;
        if (!rs) throw DataError("checkpoint: corrupt RNG state");
        ParamRefs<float> dps;
        t.disc_.params(dps);
        get_params(a, "gen", t.model_.params(), t.gen_opt_);
        get_params(a, "disc", dps, t.disc_opt_);
        for (auto& [name, cb] : t.model_.codebooks()) get_codebook(a, "codebook." + name, *cb);
        return t;
    }

    static Trainer load(const std::filesystem::path& path) { return from_archive(io::Archive::load(path)); }

private:
    static void check_finite(const LossComponents& c) {
        const std::pair<const char*, double> parts[] = {
            {"rec", c.rec}, {"adv_g", c.adv_g}, {"perceptual", c.perceptual}, {"commitment", c.commitment}};
        for (const auto& [name, v] : parts)
            if (!std::isfinite(v)) throw NumericError(std::string("non-finite loss component '") + name + "'");
    }

    void update_codebooks(const typename VgqModel<float>::Forward& f, StepReport& rep) {
        if (!cfg_.model.quantize) return;
        const int64_t threshold = cfg_.stale_threshold == 0 ? kNeverRevive : cfg_.stale_threshold;
        auto apply = [&](const std::string& name, Codebook<float>& cb, const std::vector<int>& idx,
                         const std::vector<float>& vec) {
            ema_update<float>(cb, idx, vec);
            rep.revived += reinit_dead_entries<float>(cb, vec, threshold, rng_);
            UsageWindow w(cb.size());
            w.record(idx);
            rep.utilization[name] = utilization(w);
        };
        apply("vq", model_.vq_codebook(), f.vq_out.indices, f.vq_out.vectors);
        if (model_.gaussian()) {
            apply("geo", model_.geo_codebook(), f.gs_out.geo_indices, f.gs_out.geo_vectors);
            apply("feat", model_.feat_codebook(), f.gs_out.feat_indices, f.gs_out.feat_vectors);
            UsageWindow w(model_.opacity_codebook().size());
            w.record(f.gs_out.opacity_indices);
            rep.utilization["opacity"] = utilization(w);
        } else {
            apply("vq2", model_.vq2_codebook(), f.vq2_out.indices, f.vq2_out.vectors);
        }
    }

    static void put_params(io::Archive& a, const std::string& prefix, const ParamRefs<float>& ps,
                           const AdamState<float>& opt) {
        const bool moments = opt.m.size() == ps.size();
        const int64_t st[] = {opt.step, moments ? 1 : 0};
        a.put_i64("adam." + prefix + ".state", st);
        for (size_t k = 0; k < ps.size(); ++k) {
            const auto& s = ps[k]->value.shape();
            const std::vector<int64_t> shape(s.begin(), s.end());
            a.put_f32("param." + ps[k]->name, ps[k]->value.values(), shape);
            if (moments) {
                a.put_f32("adam." + prefix + ".m." + ps[k]->name, opt.m[k].values(), shape);
                a.put_f32("adam." + prefix + ".v." + ps[k]->name, opt.v[k].values(), shape);
            }
        }
    }

    static void get_params(const io::Archive& a, const std::string& prefix, const ParamRefs<float>& ps,
                           AdamState<float>& opt) {
        const auto st = a.get_i64("adam." + prefix + ".state", 2);
        opt.step = st[0];
        const bool moments = st[1] != 0;
        if (moments) {
            opt.m.clear();
            opt.v.clear();
        }
        auto fill = [&](const std::string& name, Tensor<float>& t) {
            const auto v = a.get_f32(name, t.size());
            std::copy(v.begin(), v.end(), t.data());
        };
        for (auto* p : ps) {
            fill("param." + p->name, p->value);
            if (moments) {
                opt.m.emplace_back(p->value.shape());
                opt.v.emplace_back(p->value.shape());
                fill("adam." + prefix + ".m." + p->name, opt.m.back());
                fill("adam." + prefix + ".v." + p->name, opt.v.back());
            }
        }
    }

    static void put_codebook(io::Archive& a, const std::string& p, const Codebook<float>& cb) {
        a.put_f32(p + ".entries", cb.entries(), {cb.size(), cb.dim()});
        a.put_f32(p + ".ema_count", cb.ema_count());
        a.put_f32(p + ".ema_sum", cb.ema_sum(), {cb.size(), cb.dim()});
        a.put_i64(p + ".hit_count", cb.hit_count());
        a.put_i64(p + ".idle_steps", cb.idle_steps());
        const int64_t flags[] = {cb.initialized() ? 1 : 0};
        a.put_i64(p + ".initialized", flags);
    }

    static void get_codebook(const io::Archive& a, const std::string& p, Codebook<float>& cb) {
        const size_t K = cb.size(), KD = K * cb.dim();
        cb.entries() = a.get_f32(p + ".entries", KD);
        cb.ema_count() = a.get_f32(p + ".ema_count", K);
        cb.ema_sum() = a.get_f32(p + ".ema_sum", KD);
        cb.hit_count() = a.get_i64(p + ".hit_count", K);
        cb.idle_steps() = a.get_i64(p + ".idle_steps", K);
        cb.mark_initialized(a.get_i64(p + ".initialized", 1)[0] != 0);
    }

    TrainConfig cfg_;
    VgqModel<float> model_;
    Discriminator<float> disc_;
    std::unique_ptr<FeatureExtractor<float>> extractor_;
    AdamState<float> gen_opt_, disc_opt_;
    Rng rng_;
    int64_t step_ = 0;
    int epoch_ = 0;
};

struct LoopOptions {
    std::filesystem::path out_dir; // empty: no files written
    const ImageDataset* val = nullptr;
    std::function<void(const StepReport&)> on_step;
};

struct LoopResult {
    std::vector<StepReport> history;
    std::vector<std::pair<int, EvalReport>> validation; // (epoch, report)
    std::filesystem::path final_checkpoint;
};

inline std::string checkpoint_name(int epoch) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "epoch_%04d.vgqckpt", epoch);
    return buf;
}

/// Runs epochs [trainer.epoch() + 1, config.epochs], stopping early at
/// config.max_steps. Each epoch shuffles with the trainer RNG, steps through
/// full and partial batches, validates (if a val set is given) and writes a
/// checkpoint. An epoch-0 checkpoint is written before a fresh run starts.
inline LoopResult train_loop(Trainer& t, const ImageDataset& train, const LoopOptions& opt = {}) {
    if (train.size() < 1) throw DataError("train_loop: empty dataset");
    const TrainConfig& cfg = t.config();
    LoopResult res;
    const bool files = !opt.out_dir.empty();
    std::ofstream hist;
    if (files) {
        std::filesystem::create_directories(opt.out_dir);
        hist.open(opt.out_dir / "history.jsonl", t.step() == 0 ? std::ios::trunc : std::ios::app);
        if (!hist) throw DataError("cannot write history in '" + opt.out_dir.string() + "'");
        if (t.step() == 0 && t.epoch() == 0) {
            res.final_checkpoint = opt.out_dir / checkpoint_name(0);
            t.save(res.final_checkpoint);
        }
    }
    auto done = [&] { return cfg.max_steps > 0 && t.step() >= cfg.max_steps; };
    std::vector<int> order(train.size());
    for (int epoch = t.epoch() + 1; epoch <= cfg.epochs && !done(); ++epoch) {
        t.set_epoch(epoch);
        for (int i = 0; i < train.size(); ++i) order[i] = i;
        std::shuffle(order.begin(), order.end(), t.rng());
        for (int start = 0; start < train.size() && !done(); start += cfg.batch_size) {
            const int count = std::min(cfg.batch_size, train.size() - start);
            const std::vector<int> idx(order.begin() + start, order.begin() + start + count);
            StepReport rep = t.train_step(train.batch(idx));
            if (files) hist << rep.to_json(cfg.log_wall_time).dump() << "\n";
            if (opt.on_step) opt.on_step(rep);
            res.history.push_back(std::move(rep));
        }
        if (opt.val && opt.val->size() > 0) {
            EvalReport ev = evaluate(t.model(), *opt.val, cfg.batch_size);
            if (files) {
                auto j = ev.to_json();
                j.erase("images");
                j["type"] = "val";
                j["epoch"] = epoch;
                j["step"] = t.step();
                hist << j.dump() << "\n";
            }
            res.validation.emplace_back(epoch, std::move(ev));
        }
        if (files) {
            hist.flush();
            res.final_checkpoint = opt.out_dir / checkpoint_name(epoch);
            t.save(res.final_checkpoint);
            if (cfg.keep_checkpoints > 0 && epoch - cfg.keep_checkpoints >= 1)
                std::filesystem::remove(opt.out_dir / checkpoint_name(epoch - cfg.keep_checkpoints));
        }
    }
    if (files && !res.final_checkpoint.empty())
        std::filesystem::copy_file(res.final_checkpoint, opt.out_dir / "final.vgqckpt",
                                   std::filesystem::copy_options::overwrite_existing);
    return res;
}

} // namespace vgq
