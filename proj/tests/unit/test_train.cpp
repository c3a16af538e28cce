// Copyright Contributors to the VGQ Project
// SPDX-License-Identifier: Apache-2.0
//
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "vgq/train.hpp"

using namespace vgq;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("vgq_test_train_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

TrainConfig tiny_config() {
    TrainConfig c;
    c.model.resolution = 16;
    c.model.downsample = 4;
    c.model.channels = 4;
    c.model.base_width = 4;
    c.model.res_blocks = 1;
    c.model.head_width = 4;
    c.model.k_vq = c.model.k_geo = c.model.k_feat = 16;
    c.model.disc_width = 4;
    c.model.disc_layers = 2;
    c.batch_size = 3;
    c.epochs = 2;
    c.learning_rate = 1e-3;
    c.adversarial_warmup_steps = 2;
    c.stale_threshold = 3;
    return c;
}

TrainConfig desk_config(uint64_t seed) {
    TrainConfig c;
    c.model.base_width = 16;
    c.model.res_blocks = 1;
    c.model.head_width = 16;
    c.model.k_vq = c.model.k_geo = c.model.k_feat = 128;
    c.model.disc_width = 8;
    c.gamma = 0.0;
    c.learning_rate = 1e-3;
    c.batch_size = 4;
    c.stale_threshold = 20;
    c.seed = seed;
    return c;
}

std::vector<float> snapshot(Trainer& t) {
    std::vector<float> out;
    for (auto* p : t.model().params()) out.insert(out.end(), p->value.storage().begin(), p->value.storage().end());
    ParamRefs<float> dps;
    t.discriminator().params(dps);
    for (auto* p : dps) out.insert(out.end(), p->value.storage().begin(), p->value.storage().end());
    for (auto& [name, cb] : t.model().codebooks()) out.insert(out.end(), cb->entries().begin(), cb->entries().end());
    return out;
}

std::string history_text(const std::vector<StepReport>& h) {
    std::string s;
    for (const auto& r : h) s += r.to_json(false).dump() + "\n";
    return s;
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

} // namespace

TEST(Losses, ReconstructionExamples) {
    Tensor<double> a(1, 3, 4, 4, 0.3), b(1, 3, 4, 4, 0.4);
    EXPECT_EQ(loss_rec(a, a), 0.0);
    EXPECT_NEAR(loss_rec(a, b), 0.1, 1e-15);
    Rng rng(1);
    Tensor<double> x(2, 3, 5, 5), y(2, 3, 5, 5);
    for (auto& v : x.values()) v = std::uniform_real_distribution<double>(0, 1)(rng);
    for (auto& v : y.values()) v = std::uniform_real_distribution<double>(0, 1)(rng);
    long double s = 0;
    for (int n = 0; n < 2; ++n)
        for (int c = 0; c < 3; ++c)
            for (int i = 0; i < 5; ++i)
                for (int j = 0; j < 5; ++j) s += std::fabs(static_cast<long double>(x.at(n, c, i, j)) - y.at(n, c, i, j));
    EXPECT_NEAR(loss_rec(x, y), static_cast<double>(s / 150), 1e-7);
    EXPECT_THROW(loss_rec(a, Tensor<double>(1, 3, 4, 5)), ContractError);
}

TEST(Losses, AdversarialExamples) {
    Tensor<double> ones(1, 1, 3, 3, 1.0), zeros(1, 1, 3, 3, 0.0);
    EXPECT_EQ(loss_adv(zeros, ones, AdvSide::generator), 0.0);
    EXPECT_EQ(loss_adv(ones, zeros, AdvSide::discriminator), 0.0);
    EXPECT_EQ(loss_adv(zeros, ones, AdvSide::discriminator), 2.0);
    EXPECT_EQ(loss_adv(zeros, zeros, AdvSide::generator), 1.0);
}

TEST(Losses, PerceptualExamples) {
    Rng rng(2);
    Tensor<float> a(1, 3, 16, 16), b(1, 3, 16, 16);
    for (auto& v : a.values()) v = std::uniform_real_distribution<float>(0, 1)(rng);
    for (auto& v : b.values()) v = std::uniform_real_distribution<float>(0, 1)(rng);
    const auto ex = make_extractor<float>("random_conv", 7);
    EXPECT_EQ(loss_perceptual(a, a, *ex), 0.0f);
    EXPECT_EQ(loss_perceptual(a, b, *ex), loss_perceptual(b, a, *ex));
    EXPECT_GT(loss_perceptual(a, b, *ex), 0.0f);
    const auto id = make_extractor<float>("identity", 0);
    double mse = 0;
    for (size_t i = 0; i < a.size(); ++i) mse += double(a[i] - b[i]) * (a[i] - b[i]);
    EXPECT_NEAR(loss_perceptual(a, b, *id), mse / a.size(), 1e-6);
}

TEST(Losses, TotalLossExamples) {
    LossComponents c{0.5, 0.2, 0.0, 0.3, 0.1};
    EXPECT_NEAR(total_loss(c, 0.1, 1.0), 0.92, 1e-15);
    EXPECT_NEAR(total_loss(c, 0.0, 0.0), 0.6, 1e-15);
    EXPECT_EQ(total_loss(LossComponents{}, 0.1, 1.0), 0.0);
    c.perceptual = std::nan("");
    try {
        total_loss(c, 0.1, 1.0);
        FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("perceptual"), std::string::npos);
    }
}

TEST(Optimizer, ZeroGradientAndZeroLearningRate) {
    Param<double> p("p", 1, 1, 1, 3);
    p.value[0] = 1.0;
    p.value[1] = -2.0;
    ParamRefs<double> ps{&p};
    AdamState<double> st;
    const auto before = p.value.storage();
    for (int k = 0; k < 3; ++k) optimizer_step(ps, st, 0.1);
    EXPECT_EQ(p.value.storage(), before);
    EXPECT_EQ(st.m[0][0], 0.0);
    p.grad[0] = 0.5;
    optimizer_step(ps, st, 0.0);
    EXPECT_EQ(p.value.storage(), before);
    const double m0 = st.m[0][0], v0 = st.v[0][0];
    EXPECT_GT(m0, 0.0);
    p.grad.zero();
    optimizer_step(ps, st, 0.0);
    EXPECT_EQ(st.m[0][0], 0.9 * m0);
    EXPECT_EQ(st.v[0][0], 0.999 * v0);
    EXPECT_EQ(p.value.storage(), before);
}

TEST(Optimizer, ConstantGradientStepApproachesLearningRateTimesSign) {
    Param<double> p("p", 1, 1, 1, 2);
    ParamRefs<double> ps{&p};
    AdamState<double> st;
    const double lr = 1e-2;
    double last[2] = {};
    for (int k = 0; k < 2000; ++k) {
        p.grad[0] = 3.0;
        p.grad[1] = -0.02;
        const double v0 = p.value[0], v1 = p.value[1];
        optimizer_step(ps, st, lr);
        last[0] = p.value[0] - v0;
        last[1] = p.value[1] - v1;
    }
    EXPECT_NEAR(last[0], -lr, 1e-8);
    EXPECT_NEAR(last[1], lr, 1e-6);
}

TEST(Optimizer, GlobalNormClip) {
    Param<double> a("a", 1, 1, 1, 2), b("b", 1, 1, 1, 1);
    a.grad[0] = 3.0;
    a.grad[1] = 0.0;
    b.grad[0] = 4.0;
    ParamRefs<double> ps{&a, &b};
    EXPECT_NEAR(clip_grad_norm(ps, 1.0), 5.0, 1e-15);
    EXPECT_NEAR(grad_norm(ps), 1.0, 1e-12);
    EXPECT_NEAR(clip_grad_norm(ps, 2.0), 1.0, 1e-12);
    EXPECT_NEAR(a.grad[0], 0.6, 1e-12);
}

TEST(Schedule, WarmupThenLinearRamp) {
    TrainConfig c;
    c.gamma = 0.4;
    c.adversarial_warmup_steps = 4;
    const double want[] = {0, 0, 0, 0, 0.1, 0.2, 0.3, 0.4, 0.4, 0.4};
    for (int s = 0; s < 10; ++s) EXPECT_NEAR(adversarial_weight(c, s), want[s], 1e-15) << s;
    c.adversarial_warmup_steps = 0;
    EXPECT_EQ(adversarial_weight(c, 0), 0.4);
}

TEST(TrainStep, ZeroLearningRateKeepsParametersButCodebooksMove) {
    TrainConfig c = tiny_config();
    c.learning_rate = 0.0;
    c.gamma = 0.0;
    Trainer t(c);
    const auto ds = generate_toy_corpus(6, 16, 1);
    t.train_step(ds.batch({0, 1, 2}));
    std::vector<float> params;
    for (auto* p : t.model().params()) params.insert(params.end(), p->value.storage().begin(), p->value.storage().end());
    const auto vq_before = t.model().vq_codebook().entries();
    t.train_step(ds.batch({3, 4, 5}));
    std::vector<float> after;
    for (auto* p : t.model().params()) after.insert(after.end(), p->value.storage().begin(), p->value.storage().end());
    EXPECT_EQ(after, params);
    EXPECT_NE(t.model().vq_codebook().entries(), vq_before);
}

TEST(TrainStep, ReportFieldsFiniteAndDiscriminatorOnlyAfterWarmup) {
    TrainConfig c = tiny_config();
    c.gamma = 0.5;
    Trainer t(c);
    const auto ds = generate_toy_corpus(3, 16, 2);
    ParamRefs<float> dps;
    t.discriminator().params(dps);
    std::vector<float> d0;
    for (auto* p : dps) d0.insert(d0.end(), p->value.storage().begin(), p->value.storage().end());
    for (int s = 0; s < 5; ++s) {
        const auto r = t.train_step(ds.batch({0, 1, 2}));
        EXPECT_EQ(r.step, s + 1);
        EXPECT_EQ(r.gamma, adversarial_weight(c, s));
        for (double v : {r.loss.rec, r.loss.adv_g, r.loss.adv_d, r.loss.perceptual, r.loss.commitment, r.total})
            EXPECT_TRUE(std::isfinite(v));
        EXPECT_GE(r.total - r.gamma * r.loss.adv_g, 0.0);
        if (s < 2) {
            EXPECT_EQ(r.loss.adv_d, 0.0);
            std::vector<float> d;
            for (auto* p : dps) d.insert(d.end(), p->value.storage().begin(), p->value.storage().end());
            EXPECT_EQ(d, d0);
        } else {
            EXPECT_GT(r.loss.adv_d, 0.0);
        }
        for (const char* k : {"vq", "geo", "feat", "opacity"}) EXPECT_TRUE(r.utilization.count(k));
    }
    EXPECT_THROW(t.train_step(Tensor<float>(1, 3, 32, 32)), ContractError);
}

TEST(TrainStep, NonFiniteLossAbortsNamingTheComponent) {
    Trainer t(tiny_config());
    const Tensor<float> batch(1, 3, 16, 16, 0.5f);
    t.train_step(batch);
    for (auto* p : t.model().params())
        if (p->name == "decoder.conv_out.bias") p->value[0] = std::numeric_limits<float>::quiet_NaN();
    try {
        t.train_step(batch);
        FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("rec"), std::string::npos) << e.what();
    }
}

TEST(TrainLoop, SeededRunsAreBitwiseReproducible) {
    const auto ds = generate_toy_corpus(7, 16, 3);
    TrainConfig c = tiny_config();
    c.gamma = 0.2;
    Trainer a(c), b(c);
    const auto ha = train_loop(a, ds).history, hb = train_loop(b, ds).history;
    ASSERT_EQ(ha.size(), 6u);
    EXPECT_EQ(history_text(ha), history_text(hb));
    EXPECT_EQ(snapshot(a), snapshot(b));
    c.seed = 43;
    Trainer other(c);
    EXPECT_NE(history_text(train_loop(other, ds).history), history_text(ha));
}

TEST(TrainLoop, EpochsZeroWritesInitialCheckpointOnly) {
    const auto dir = scratch("epochs0");
    TrainConfig c = tiny_config();
    c.epochs = 0;
    Trainer t(c);
    const auto res = train_loop(t, generate_toy_corpus(2, 16, 4), {dir});
    EXPECT_TRUE(res.history.empty());
    EXPECT_TRUE(fs::exists(dir / "epoch_0000.vgqckpt"));
    EXPECT_TRUE(fs::exists(dir / "final.vgqckpt"));
    EXPECT_FALSE(fs::exists(dir / "epoch_0001.vgqckpt"));
    EXPECT_EQ(read_file(dir / "history.jsonl"), "");
    fs::remove_all(dir);
}

TEST(TrainLoop, WarmupLongerThanRunIsPurelyNonAdversarial) {
    TrainConfig c = tiny_config();
    c.gamma = 1.0;
    c.adversarial_warmup_steps = 1000;
    Trainer t(c);
    for (const auto& r : train_loop(t, generate_toy_corpus(6, 16, 5)).history) {
        EXPECT_EQ(r.gamma, 0.0);
        EXPECT_EQ(r.loss.adv_g, 0.0);
        EXPECT_EQ(r.loss.adv_d, 0.0);
    }
}

TEST(TrainLoop, FilesHistoryCheckpointsAndRetention) {
    const auto dir = scratch("files");
    TrainConfig c = tiny_config();
    c.epochs = 4;
    c.keep_checkpoints = 2;
    const auto ds = generate_toy_corpus(5, 16, 6);
    const auto val = generate_toy_corpus(2, 16, 60);
    Trainer t(c);
    LoopOptions opt{dir, &val, {}};
    const auto res = train_loop(t, ds, opt);
    EXPECT_EQ(res.validation.size(), 4u);
    EXPECT_FALSE(fs::exists(dir / "epoch_0002.vgqckpt"));
    EXPECT_TRUE(fs::exists(dir / "epoch_0003.vgqckpt"));
    EXPECT_TRUE(fs::exists(dir / "epoch_0004.vgqckpt"));
    EXPECT_EQ(res.final_checkpoint, dir / "epoch_0004.vgqckpt");
    std::ifstream in(dir / "history.jsonl");
    std::string line;
    int steps = 0, vals = 0;
    while (std::getline(in, line)) {
        const auto j = nlohmann::json::parse(line);
        if (j["type"] == "step") {
            ++steps;
            EXPECT_FALSE(j.contains("wall_time"));
            for (const char* k : {"rec", "adv_g", "adv_d", "perceptual", "commitment", "utilization"})
                EXPECT_TRUE(j.contains(k)) << k;
        } else {
            EXPECT_EQ(j["type"], "val");
            ++vals;
        }
    }
    EXPECT_EQ(steps, 8);
    EXPECT_EQ(vals, 4);
    fs::remove_all(dir);
}

TEST(Checkpoint, RoundTripRestoresEverything) {
    const auto dir = scratch("ckpt");
    TrainConfig c = tiny_config();
    Trainer t(c);
    train_loop(t, generate_toy_corpus(6, 16, 7));
    t.save(dir / "a.vgqckpt");
    Trainer back = Trainer::load(dir / "a.vgqckpt");
    EXPECT_EQ(snapshot(back), snapshot(t));
    EXPECT_EQ(back.step(), t.step());
    EXPECT_EQ(back.epoch(), t.epoch());
    EXPECT_EQ(serialize_config(back.config()), serialize_config(t.config()));
    EXPECT_EQ(back.to_archive().serialize(), t.to_archive().serialize());
    back.save(dir / "b.vgqckpt");
    EXPECT_EQ(read_file(dir / "b.vgqckpt"), read_file(dir / "a.vgqckpt"));
    const auto mine = t.model().codebooks(), theirs = back.model().codebooks();
    ASSERT_EQ(mine.size(), theirs.size());
    for (size_t k = 0; k < mine.size(); ++k) {
        EXPECT_EQ(mine[k].first, theirs[k].first);
        EXPECT_EQ(mine[k].second->ema_count(), theirs[k].second->ema_count()) << mine[k].first;
        EXPECT_EQ(mine[k].second->ema_sum(), theirs[k].second->ema_sum()) << mine[k].first;
        EXPECT_EQ(mine[k].second->idle_steps(), theirs[k].second->idle_steps()) << mine[k].first;
    }
    std::ofstream(dir / "junk.vgqckpt") << "garbage";
    EXPECT_THROW(Trainer::load(dir / "junk.vgqckpt"), DataError);
    fs::remove_all(dir);
}

TEST(Checkpoint, ResumeReproducesUninterruptedRunBitwise) {
    const auto dir = scratch("resume");
    const auto ds = generate_toy_corpus(7, 16, 8);
    TrainConfig c = tiny_config();
    c.gamma = 0.3;
    c.epochs = 4;
    Trainer full(c);
    const auto golden = train_loop(full, ds).history;

    TrainConfig half = c;
    half.epochs = 2;
    Trainer first(half);
    auto h = train_loop(first, ds, {dir}).history;
    Trainer resumed = Trainer::load(dir / "final.vgqckpt");
    resumed.override_schedule(c);
    const auto rest = train_loop(resumed, ds, {dir}).history;
    h.insert(h.end(), rest.begin(), rest.end());
    EXPECT_EQ(history_text(h), history_text(golden));
    EXPECT_EQ(snapshot(resumed), snapshot(full));

    std::ifstream in(dir / "history.jsonl");
    std::string line;
    int lines = 0;
    while (std::getline(in, line)) ++lines;
    EXPECT_EQ(lines, static_cast<int>(golden.size()));

    TrainConfig shape = c;
    shape.model.k_vq = 32;
    EXPECT_THROW(resumed.override_schedule(shape), ConfigError);
    fs::remove_all(dir);
}

TEST(Config, ParseSerializeRoundTripAndErrors) {
    const TrainConfig c = parse_config("# comment\n gamma = 0.5 \nfusion = cross_attention\nk_geo=32\nquantize = false\n");
    EXPECT_EQ(c.gamma, 0.5);
    EXPECT_EQ(c.model.fusion, FusionMode::cross_attention);
    EXPECT_EQ(c.model.k_geo, 32);
    EXPECT_FALSE(c.model.quantize);
    EXPECT_EQ(serialize_config(parse_config(serialize_config(c))), serialize_config(c));
    EXPECT_THROW(parse_config("no_such_key = 1\n"), ConfigError);
    EXPECT_THROW(parse_config("gamma\n"), ConfigError);
    EXPECT_THROW(parse_config("gamma = -1\n"), ConfigError);
    EXPECT_THROW(parse_config("batch_size = two\n"), ConfigError);
    EXPECT_THROW(parse_config("fusion = concat\n"), ConfigError);
    EXPECT_THROW(parse_config("resolution = 30\n"), ConfigError);
    EXPECT_THROW(load_config("/nonexistent/vgq.cfg"), ConfigError);
    const TrainConfig d;
    EXPECT_EQ(d.gamma, 0.1);
    EXPECT_EQ(d.eta, 1.0);
    EXPECT_EQ(d.learning_rate, 1e-4);
    EXPECT_EQ(d.batch_size, 16);
    EXPECT_EQ(d.adversarial_warmup_steps, 1000);
    EXPECT_EQ(d.grad_clip, 1.0);
}

TEST(Training, MemorizesSingleImage) {
    // gamma = eta = 0: pure L1 + commitment autoencoder on one image.
    const auto ds = generate_toy_corpus(1, 32, 9);
    double sum = 0;
    for (uint64_t seed : {1, 2, 3}) {
        TrainConfig c = desk_config(seed);
        c.eta = 0.0;
        c.learning_rate = 2e-3;
        Trainer t(c);
        double last = 0;
        for (int s = 0; s < 500; ++s) last = t.train_step(ds.batch({0})).loss.rec;
        sum += last;
    }
    EXPECT_LT(sum / 3, 0.05);
}

TEST(Training, TwoHundredStepsHalveReconstructionLoss) {
    const auto corpus = generate_toy_corpus(200, 32, 42);
    std::vector<double> ratios;
    for (uint64_t seed = 1; seed <= 5; ++seed) {
        TrainConfig c = desk_config(seed);
        c.model.k_vq = c.model.k_geo = c.model.k_feat = 1024;
        c.eta = 0.0;
        c.batch_size = 16;
        c.epochs = 100;
        c.max_steps = 200;
        Trainer t(c);
        const auto h = train_loop(t, corpus).history;
        ASSERT_EQ(h.size(), 200u);
        ratios.push_back(h.back().loss.rec / h.front().loss.rec);
    }
    std::sort(ratios.begin(), ratios.end());
    EXPECT_LE(ratios[2], 0.5) << "median L_rec(200) / L_rec(1)";
}
