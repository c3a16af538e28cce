// Copyright Contributors to the VGQ Project
// SPDX-License-Identifier: Apache-2.0
//
#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numbers>
#include <random>

#include "vgq/codebook.hpp"
#include "vgq/quant_site.hpp"

using namespace vgq;

namespace {

Codebook<double> make_cb(std::initializer_list<std::initializer_list<double>> rows, double decay = 0.99) {
    const int d = static_cast<int>(rows.begin()->size());
    Codebook<double> cb(static_cast<int>(rows.size()), d, decay);
    int j = 0;
    for (const auto& r : rows) {
        int i = 0;
        for (double v : r) cb.entry(j)[i++] = v;
        ++j;
    }
    return cb;
}

// Exhaustive scan kept independent of the library: float-accumulated
// distances in the query's own precision, strict < so the first minimum wins.
template <class T>
int brute_force(const std::vector<T>& entries, int K, int d, const T* q) {
    int best = 0;
    long double bd = std::numeric_limits<long double>::infinity();
    for (int j = 0; j < K; ++j) {
        long double s = 0;
        for (int i = 0; i < d; ++i) {
            const long double diff = static_cast<long double>(q[i]) - entries[static_cast<size_t>(j) * d + i];
            s += diff * diff;
        }
        if (s < bd) {
            bd = s;
            best = j;
        }
    }
    return best;
}

} // namespace

TEST(QuantizeNn, NearestOfTwo) {
    const auto cb = make_cb({{0, 0}, {1, 1}});
    const std::vector<double> v{0.2, 0.1};
    const auto r = quantize_nn<double>(v, cb, 0.25);
    EXPECT_EQ(r.indices[0], 0);
    EXPECT_EQ(r.quantized[0], 0.0);
    EXPECT_EQ(r.quantized[1], 0.0);
    EXPECT_NEAR(r.commitment_loss, 0.0125, 1e-15);
}

TEST(QuantizeNn, ExactEntryHasZeroCommitment) {
    const auto cb = make_cb({{0.5, -1, 2}, {3, 3, 3}, {-4, 0, 1}});
    for (int j = 0; j < 3; ++j) {
        const std::vector<double> v(cb.entry(j).begin(), cb.entry(j).end());
        const auto r = quantize_nn<double>(v, cb);
        EXPECT_EQ(r.indices[0], j);
        EXPECT_EQ(r.commitment_loss, 0.0);
    }
}

TEST(QuantizeNn, DimensionMismatchIsContractError) {
    const auto cb = make_cb({{0, 0, 0}});
    const std::vector<double> v{1, 2, 3, 4};
    EXPECT_THROW(quantize_nn<double>(v, cb), ContractError);
}

TEST(QuantizeNn, MatchesBruteForceOnRandomQueries) {
    Rng rng(21);
    std::normal_distribution<float> n(0, 1);
    const int K = 512, d = 8;
    Codebook<float> cb(K, d);
    for (auto& v : cb.entries()) v = n(rng);
    std::vector<float> q(10000 * d);
    for (auto& v : q) v = n(rng);
    const auto r = quantize_nn<float>(q, cb);
    int mismatches = 0;
    for (int i = 0; i < 10000; ++i) mismatches += r.indices[i] != brute_force(cb.entries(), K, d, &q[i * d]);
    EXPECT_EQ(mismatches, 0);
}

TEST(QuantizeNn, Idempotent) {
    Rng rng(22);
    std::uniform_real_distribution<double> u(-2, 2);
    Codebook<double> cb(64, 5);
    for (auto& v : cb.entries()) v = u(rng);
    std::vector<double> q(500 * 5);
    for (auto& v : q) v = u(rng);
    const auto r1 = quantize_nn<double>(q, cb);
    const auto r2 = quantize_nn<double>(r1.quantized, cb);
    EXPECT_EQ(r1.quantized, r2.quantized);
    EXPECT_EQ(r2.commitment_loss, 0.0);
}

TEST(QuantizeNn, UniformPositiveScalingKeepsIndices) {
    Rng rng(23);
    std::uniform_real_distribution<double> u(-1, 1);
    Codebook<double> cb(100, 4), scaled(100, 4);
    for (auto& v : cb.entries()) v = u(rng);
    std::vector<double> q(1000 * 4);
    for (auto& v : q) v = u(rng);
    for (double c : {0.5, 4.0, 1024.0}) {
        for (size_t i = 0; i < cb.entries().size(); ++i) scaled.entries()[i] = cb.entries()[i] * c;
        std::vector<double> qs(q);
        for (auto& v : qs) v *= c;
        EXPECT_EQ(quantize_nn<double>(q, cb).indices, quantize_nn<double>(qs, scaled).indices);
    }
}

TEST(QuantizeNn, GeometryAngleUsesPlainEuclideanDistance) {
    // Angles are stored as theta / 2pi; 0.01 rad and 2pi - 0.01 rad are ~1
    // apart in code units, so a mid-range angle is nearer.
    const double two_pi = 2 * std::numbers::pi;
    const auto cb = make_cb({{0.5, 0.5, 0.01 / two_pi, 0, 0}, {0.5, 0.5, 0.5, 0, 0}});
    const std::vector<double> q{0.5, 0.5, (two_pi - 0.01) / two_pi, 0, 0};
    EXPECT_EQ(quantize_nn<double>(q, cb).indices[0], 1);
}

TEST(TieBreak, LowestIndexWins) {
    EXPECT_EQ(tie_break<double>(std::vector<double>{1, 1, 2}), 0);
    EXPECT_EQ(tie_break<double>(std::vector<double>{3, 2, 2}), 1);
    EXPECT_EQ(tie_break<double>(std::vector<double>{7}), 0);
    const auto cb = make_cb({{1, 0}, {0, 1}, {1, 0}});
    const std::vector<double> q{0.5, 0.5};
    EXPECT_EQ(quantize_nn<double>(q, cb).indices[0], 0);
    const std::vector<double> q2{1, 0};
    EXPECT_EQ(quantize_nn<double>(q2, cb).indices[0], 0);
}

TEST(StraightThrough, ForwardIsQuantizedBackwardIsIdentity) {
    const std::vector<double> raw{0.3, -1.2, 5.0}, q{0.0, -1.0, 4.5}, g{1.5, -0.5, 2.0};
    EXPECT_EQ(StraightThrough<double>::forward(raw, q), q);
    EXPECT_EQ(StraightThrough<double>::backward_raw(g), g);
    for (double v : StraightThrough<double>::backward_quantized(g)) EXPECT_EQ(v, 0.0);
}

TEST(StraightThrough, HalfSquaredNormGradientIsQuantized) {
    // Composite loss(v) = |v + sg(q - v)|^2 / 2 evaluated through the frozen
    // surrogate; its derivative is q.
    const auto cb = make_cb({{0, 0, 0}, {1, 2, -1}, {-3, 0.5, 2}});
    const std::vector<double> v{0.8, 1.7, -0.6};
    QuantSite<double> site;
    const auto r = site.run(v, cb, QuantMode::nearest);
    const double h = 1e-5;
    for (int i = 0; i < 3; ++i) {
        auto vp = v, vm = v;
        vp[i] += h;
        vm[i] -= h;
        auto loss = [&](const std::vector<double>& x) {
            const auto f = site.run(x, cb, QuantMode::frozen);
            double s = 0;
            for (double e : f.values) s += 0.5 * e * e;
            return s;
        };
        EXPECT_NEAR((loss(vp) - loss(vm)) / (2 * h), r.values[i], 1e-8);
    }
}

TEST(QuantSite, FrozenRequiresNearestPass) {
    const auto cb = make_cb({{0, 0}});
    QuantSite<double> site;
    EXPECT_THROW(site.run({1.0, 2.0}, cb, QuantMode::frozen), ContractError);
}

TEST(EmaUpdate, SingleStepDirectRule) {
    auto cb = make_cb({{1.0}, {5.0}}, 0.9);
    const std::vector<int> idx{0};
    const std::vector<double> v{2.0};
    ema_update<double>(cb, idx, v);
    EXPECT_NEAR(cb.entry(0)[0], 1.1, 1e-15);
    EXPECT_EQ(cb.entry(1)[0], 5.0);
    EXPECT_EQ(cb.hit_count()[0], 1);
    EXPECT_EQ(cb.hit_count()[1], 0);
}

TEST(EmaUpdate, UnitDecayLeavesEntries) {
    auto cb = make_cb({{1.0, 2.0}, {3.0, 4.0}}, 1.0);
    const auto before = cb.entries();
    const std::vector<int> idx{0, 1, 1};
    const std::vector<double> v{9, 9, -9, -9, 0, 0};
    ema_update<double>(cb, idx, v);
    EXPECT_EQ(cb.entries(), before);
}

TEST(EmaUpdate, StationaryAssignmentDecaysGeometrically) {
    const double m = 0.9, e0 = -3.0, f = 2.0;
    auto cb = make_cb({{e0}}, m);
    const std::vector<int> idx{0};
    const std::vector<double> v{f};
    for (int t = 1; t <= 50; ++t) {
        ema_update<double>(cb, idx, v);
        const double predicted = std::pow(m, t) * std::abs(e0 - f);
        EXPECT_NEAR(std::abs(cb.entry(0)[0] - f), predicted, 1e-12 * std::abs(e0 - f));
    }
    EXPECT_LE(std::abs(cb.entry(0)[0] - f), 0.006 * std::abs(e0 - f));
}

TEST(EmaUpdate, UnassignedEntriesBitwiseUnchanged) {
    Rng rng(24);
    std::normal_distribution<float> n(0, 1);
    Codebook<float> cb(16, 3, 0.95f);
    for (auto& v : cb.entries()) v = n(rng);
    const auto before = cb.entries();
    const std::vector<int> idx{2, 5, 5, 11};
    std::vector<float> v(12);
    for (auto& x : v) x = n(rng);
    ema_update<float>(cb, idx, v);
    for (int j = 0; j < 16; ++j) {
        const bool hit = j == 2 || j == 5 || j == 11;
        for (int i = 0; i < 3; ++i) {
            if (hit)
                EXPECT_NE(cb.entry(j)[i], before[j * 3 + i]);
            else
                EXPECT_EQ(cb.entry(j)[i], before[j * 3 + i]);
        }
    }
}

TEST(EmaUpdate, NeverAssignedEntriesStayFinite) {
    Codebook<float> cb(8, 2, 0.99f);
    const std::vector<int> idx{0, 0};
    const std::vector<float> v{1, 1, 2, 2};
    for (int t = 0; t < 1000; ++t) ema_update<float>(cb, idx, v);
    for (float e : cb.entries()) EXPECT_TRUE(std::isfinite(e));
    for (float c : cb.smoothed_counts()) EXPECT_TRUE(std::isfinite(c));
    for (float c : cb.ema_count()) EXPECT_GE(c, 0.0f);
    EXPECT_EQ(cb.idle_steps()[3], 1000);
}

TEST(Revival, NoStaleEntriesNoChange) {
    Rng rng(25);
    auto cb = make_cb({{1, 2}, {3, 4}});
    const auto before = cb.entries();
    const std::vector<double> cand{9, 9};
    EXPECT_EQ(reinit_dead_entries<double>(cb, cand, 5, rng), 0);
    EXPECT_EQ(cb.entries(), before);
}

TEST(Revival, AllStaleMoveNearCandidate) {
    Rng rng(26);
    Codebook<double> cb(32, 3);
    for (auto& s : cb.idle_steps()) s = 10;
    const std::vector<double> cand{0.25, -1.0, 3.0, 0.25, -1.0, 3.0};
    EXPECT_EQ(reinit_dead_entries<double>(cb, cand, 10, rng), 32);
    for (int j = 0; j < 32; ++j)
        for (int i = 0; i < 3; ++i) EXPECT_NEAR(cb.entry(j)[i], cand[i], 0.05);
    for (auto s : cb.idle_steps()) EXPECT_EQ(s, 0);
}

TEST(Revival, SeededRunIsReproducible) {
    auto run = [] {
        Rng rng(27);
        Codebook<double> cb(6, 2);
        for (auto& s : cb.idle_steps()) s = 3;
        const std::vector<double> cand{0, 0, 1, 1, 2, 2};
        reinit_dead_entries<double>(cb, cand, 3, rng);
        return cb.entries();
    };
    EXPECT_EQ(run(), run());
}

TEST(Revival, NeverSentinelDisables) {
    Rng rng(28);
    Codebook<double> cb(4, 2);
    for (auto& s : cb.idle_steps()) s = std::numeric_limits<int64_t>::max();
    const std::vector<double> cand{1, 1};
    EXPECT_EQ(reinit_dead_entries<double>(cb, cand, kNeverRevive, rng), 0);
}

TEST(Utilization, Fractions) {
    UsageWindow all(4), none(4), half(4);
    all.record(std::vector<int>{0, 1, 2, 3, 3});
    half.record(std::vector<int>{0, 2, 2});
    EXPECT_EQ(utilization(all), 1.0);
    EXPECT_EQ(utilization(none), 0.0);
    EXPECT_EQ(utilization(half), 0.5);
}

TEST(Codebook, BoundsClampUpdates) {
    auto cb = make_cb({{0.9, 0.5}}, 0.0);
    cb.set_bounds({0.0, 0.0}, {1.0, 1.0});
    const std::vector<int> idx{0};
    const std::vector<double> v{1.7, -0.3};
    ema_update<double>(cb, idx, v);
    EXPECT_EQ(cb.entry(0)[0], 1.0);
    EXPECT_EQ(cb.entry(0)[1], 0.0);
}
