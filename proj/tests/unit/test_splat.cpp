// Copyright Contributors to the VGQ Project
// SPDX-License-Identifier: Apache-2.0
//
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "vgq/gradcheck.hpp"
#include "vgq/splat.hpp"

using namespace vgq;

namespace {

template <class T>
SplatBatch<T> random_batch(Rng& rng, int n, int d, double smin = 0.01, double smax = 0.2) {
    std::uniform_real_distribution<double> u(0, 1), s(smin, smax), r(0, 2 * std::numbers::pi), a(0.05, 1.0);
    std::normal_distribution<double> f(0, 1);
    SplatBatch<T> b;
    for (int k = 0; k < n; ++k) {
        Gaussian2D<T> g;
        g.position = {T(u(rng)), T(u(rng))};
        g.rotation = T(r(rng));
        g.scales = {T(s(rng)), T(s(rng))};
        g.opacity = T(a(rng));
        for (int c = 0; c < d; ++c) g.feature.push_back(T(f(rng)));
        b.gaussians.push_back(g);
        b.token_of_gaussian.push_back(k);
    }
    return b;
}

// Per-pixel scalar oracle written from the definition, no shared helpers.
double oracle_value(const Gaussian2D<double>& g, double px, double py, int ch) {
    const double c = std::cos(g.rotation), s = std::sin(g.rotation);
    const double dx = px - g.position[0], dy = py - g.position[1];
    const double u = (c * dx + s * dy) / g.scales[0], v = (-s * dx + c * dy) / g.scales[1];
    return g.opacity * std::exp(-0.5 * (u * u + v * v)) * g.feature[ch];
}

template <class T>
T max_abs_diff(const FeatureMap<T>& a, const FeatureMap<T>& b) {
    T m = 0;
    for (size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
    return m;
}

} // namespace

TEST(SplatForward, EmptyBatchIsZero) {
    const auto f = splat_forward(SplatBatch<float>{}, {8, 8});
    for (float v : f.data) EXPECT_EQ(v, 0.0f);
    const auto r = splat_reference(SplatBatch<float>{}, {8, 8});
    for (float v : r.data) EXPECT_EQ(v, 0.0f);
}

TEST(SplatForward, GaussianAtPixelCenterReproducesFeature) {
    const GridShape grid{8, 8};
    SplatBatch<double> b;
    Gaussian2D<double> g;
    g.position = pixel_center<double>(3, 5, grid);
    g.rotation = 0.4;
    g.scales = {0.1, 0.07};
    g.opacity = 1.0;
    g.feature = {0.5, -2.0, 1.25};
    b.gaussians.push_back(g);
    b.token_of_gaussian.push_back(0);
    const auto f = splat_forward(b, grid);
    for (int c = 0; c < 3; ++c) EXPECT_EQ(f.at(5, 3, c), g.feature[c]);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x)
            if (x != 3 || y != 5)
                for (int c = 0; c < 3; ++c) EXPECT_LT(std::abs(f.at(y, x, c)), std::abs(g.feature[c]));
}

TEST(SplatForward, AdditiveOverUnion) {
    Rng rng(11);
    const auto A = random_batch<double>(rng, 20, 4), B = random_batch<double>(rng, 15, 4);
    SplatBatch<double> U = A;
    U.gaussians.insert(U.gaussians.end(), B.gaussians.begin(), B.gaussians.end());
    for (size_t k = 0; k < B.gaussians.size(); ++k) U.token_of_gaussian.push_back(static_cast<int>(A.gaussians.size() + k));
    const GridShape grid{24, 20};
    const auto fu = splat_forward(U, grid), fa = splat_forward(A, grid), fb = splat_forward(B, grid);
    for (size_t i = 0; i < fu.data.size(); ++i) EXPECT_NEAR(fu.data[i], fa.data[i] + fb.data[i], 1e-12);
}

TEST(SplatForward, TiledMatchesTruncatedReferenceBitwise) {
    Rng rng(12);
    for (int t = 0; t < 50; ++t) {
        const auto b = random_batch<float>(rng, 1 + t * 5, 1 + t % 8);
        const GridShape grid{1 + t % 40, 3 + (t * 7) % 50};
        const auto f = splat_forward(b, grid);
        const auto r = splat_reference(b, grid, std::optional<float>(static_cast<float>(kSplatCutoffSigma)));
        EXPECT_EQ(f.data, r.data);
    }
}

TEST(SplatForward, OmittedContributionPerGaussianBelowCutoffValue) {
    Rng rng(14);
    const GridShape grid{40, 40};
    const double bound = std::exp(-4.5);
    for (int t = 0; t < 200; ++t) {
        const auto b = random_batch<double>(rng, 1, 2);
        const auto f = splat_forward(b, grid);
        const auto r = splat_reference(b, grid);
        const auto& g = b.gaussians[0];
        const double amp = g.opacity * std::max(std::abs(g.feature[0]), std::abs(g.feature[1]));
        EXPECT_LE(max_abs_diff(f, r), bound * amp * (1 + 1e-12));
    }
}

TEST(SplatReference, SingleOffGridGaussianMatchesScalarOracle) {
    SplatBatch<double> b;
    Gaussian2D<double> g;
    g.position = {0.37, 0.61};
    g.rotation = 0.9;
    g.scales = {0.3, 0.12};
    g.opacity = 0.7;
    g.feature = {1.5, -0.25};
    b.gaussians.push_back(g);
    b.token_of_gaussian.push_back(0);
    const GridShape grid{5, 7};
    const auto r = splat_reference(b, grid);
    for (int y = 0; y < 5; ++y)
        for (int x = 0; x < 7; ++x)
            for (int c = 0; c < 2; ++c)
                EXPECT_NEAR(r.at(y, x, c), oracle_value(g, (x + 0.5) / 7, (y + 0.5) / 5, c), 1e-15);
}

TEST(SplatReference, OrderInvariant) {
    Rng rng(15);
    auto b = random_batch<double>(rng, 30, 3);
    const GridShape grid{16, 16};
    const auto r0 = splat_reference(b, grid);
    std::shuffle(b.gaussians.begin(), b.gaussians.end(), rng);
    const auto r1 = splat_reference(b, grid);
    for (size_t i = 0; i < r0.data.size(); ++i) EXPECT_NEAR(r0.data[i], r1.data[i], 1e-13);
}

TEST(SplatForward, LinearInFeaturesAndOpacity) {
    Rng rng(16);
    const auto b = random_batch<float>(rng, 40, 5);
    const GridShape grid{20, 20};
    const auto f = splat_forward(b, grid);
    for (float c : {2.0f, 0.25f}) {
        auto bf = b, bo = b;
        for (auto& g : bf.gaussians)
            for (auto& v : g.feature) v *= c;
        for (auto& g : bo.gaussians) g.opacity *= c;
        const auto ff = splat_forward(bf, grid), fo = splat_forward(bo, grid);
        for (size_t i = 0; i < f.data.size(); ++i) {
            EXPECT_EQ(ff.data[i], c * f.data[i]);
            EXPECT_EQ(fo.data[i], c * f.data[i]);
        }
    }
}

TEST(SplatForward, WorkerCountDoesNotChangeBits) {
    Rng rng(17);
    const auto b = random_batch<float>(rng, 300, 6);
    const GridShape grid{64, 48};
    FeatureMap<float> cot(64, 48, 6);
    std::normal_distribution<float> n(0, 1);
    for (auto& v : cot.data) v = n(rng);
    const auto f1 = splat_forward(b, grid, {1});
    const auto g1 = splat_backward(b, grid, cot, {1});
    for (int w : {2, 3, 8}) {
        EXPECT_EQ(splat_forward(b, grid, {w}).data, f1.data);
        const auto gw = splat_backward(b, grid, cot, {w});
        EXPECT_EQ(gw.opacity, g1.opacity);
        EXPECT_EQ(gw.feature, g1.feature);
        for (size_t k = 0; k < b.gaussians.size(); ++k) {
            EXPECT_EQ(gw.geometry[k].position, g1.geometry[k].position);
            EXPECT_EQ(gw.geometry[k].rotation, g1.geometry[k].rotation);
            EXPECT_EQ(gw.geometry[k].scales, g1.geometry[k].scales);
        }
    }
}

TEST(SplatBackward, ZeroCotangentGivesZeroGradients) {
    Rng rng(18);
    const auto b = random_batch<double>(rng, 10, 3);
    const auto g = splat_backward(b, {12, 12}, FeatureMap<double>(12, 12, 3));
    for (size_t k = 0; k < 10; ++k) {
        EXPECT_EQ(g.opacity[k], 0.0);
        for (double v : g.feature[k]) EXPECT_EQ(v, 0.0);
        EXPECT_EQ(g.geometry[k].position[0], 0.0);
        EXPECT_EQ(g.geometry[k].rotation, 0.0);
        EXPECT_EQ(g.geometry[k].scales[1], 0.0);
    }
}

TEST(SplatBackward, IndicatorAtCenterPixel) {
    const GridShape grid{9, 9};
    SplatBatch<double> b;
    Gaussian2D<double> g;
    g.position = pixel_center<double>(4, 4, grid);
    g.scales = {0.15, 0.15};
    g.opacity = 0.6;
    g.feature = {1.0, 2.0};
    b.gaussians.push_back(g);
    b.token_of_gaussian.push_back(0);
    FeatureMap<double> cot(9, 9, 2);
    cot.at(4, 4, 0) = 0.3;
    cot.at(4, 4, 1) = -0.7;
    const auto gr = splat_backward(b, grid, cot);
    EXPECT_NEAR(gr.geometry[0].position[0], 0.0, 1e-15);
    EXPECT_NEAR(gr.geometry[0].position[1], 0.0, 1e-15);
    EXPECT_DOUBLE_EQ(gr.feature[0][0], 0.6 * 0.3);
    EXPECT_DOUBLE_EQ(gr.feature[0][1], 0.6 * -0.7);
}

TEST(SplatBackward, ShapeMismatchIsContractError) {
    Rng rng(19);
    const auto b = random_batch<double>(rng, 3, 2);
    EXPECT_THROW(splat_backward(b, {8, 8}, FeatureMap<double>(8, 8, 3)), ContractError);
    EXPECT_THROW(splat_backward(b, {8, 8}, FeatureMap<double>(8, 7, 2)), ContractError);
}

TEST(SplatBackward, HalfSquaredNormLossMatchesFiniteDifferences) {
    Rng rng(20);
    const double h = 1e-5;
    int checked = 0;
    while (checked < 100) {
        const auto b0 = random_batch<double>(rng, 1 + checked % 6, 1 + checked % 3, 0.05, 0.5);
        const GridShape grid{3 + checked % 5, 4 + checked % 3};
        if (gc::cutoff_margin(b0, grid) < 1e-3) continue;
        ++checked;
        const auto out = splat_forward(b0, grid);
        const auto gr = splat_backward(b0, grid, out); // d(|F|^2/2)/dF = F
        auto loss = [&](const SplatBatch<double>& b) {
            double s = 0;
            for (double v : splat_forward(b, grid).data) s += 0.5 * v * v;
            return s;
        };
        // Each parameter group independently.
        for (int group = 0; group < 5; ++group) {
            std::vector<double> a, n;
            for (size_t k = 0; k < b0.gaussians.size(); ++k) {
                auto probe = [&](auto mutate, double analytic) {
                    auto bp = b0, bm = b0;
                    mutate(bp.gaussians[k], h);
                    mutate(bm.gaussians[k], -h);
                    a.push_back(analytic);
                    n.push_back((loss(bp) - loss(bm)) / (2 * h));
                };
                switch (group) {
                case 0:
                    probe([](auto& g, double e) { g.position[0] += e; }, gr.geometry[k].position[0]);
                    probe([](auto& g, double e) { g.position[1] += e; }, gr.geometry[k].position[1]);
                    break;
                case 1: probe([](auto& g, double e) { g.rotation += e; }, gr.geometry[k].rotation); break;
                case 2:
                    probe([](auto& g, double e) { g.scales[0] += e; }, gr.geometry[k].scales[0]);
                    probe([](auto& g, double e) { g.scales[1] += e; }, gr.geometry[k].scales[1]);
                    break;
                case 3: probe([](auto& g, double e) { g.opacity += e; }, gr.opacity[k]); break;
                case 4:
                    for (size_t c = 0; c < b0.gaussians[k].feature.size(); ++c)
                        probe([c](auto& g, double e) { g.feature[c] += e; }, gr.feature[k][c]);
                    break;
                }
            }
            EXPECT_LE(relative_error(a, n), 1e-4) << "group " << group;
        }
    }
}
