// Copyright Contributors to the VGQ Project
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "vgq/codebook.hpp"
#include "vgq/data.hpp"
#include "vgq/model.hpp"
#include "vgq/tensor.hpp"

namespace vgq {

inline constexpr double kPsnrCap = 99.0;
inline constexpr double kPsnrMseFloor = 1e-12;

inline double psnr_from_mse(double mse, double peak = 1.0) {
    if (mse < kPsnrMseFloor) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(peak * peak / mse));
}

template <class T>
double mse(std::span<const T> a, std::span<const T> b) {
    require(a.size() == b.size() && !a.empty(), "mse: size mismatch");
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        s += d * d;
    }
    return s / static_cast<double>(a.size());
}

/// 10 log10(peak^2 / MSE) over every element, capped at 99 dB.
template <class T>
double psnr(const Tensor<T>& a, const Tensor<T>& b, double peak = 1.0) {
    require_same_shape(a, b, "psnr");
    return psnr_from_mse(mse<T>(a.values(), b.values()), peak);
}

inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimK1 = 0.01;
inline constexpr double kSsimK2 = 0.03;

inline const std::array<double, kSsimWindow>& ssim_kernel_1d() {
    static const auto k = [] {
        std::array<double, kSsimWindow> w{};
        double s = 0.0;
        for (int i = 0; i < kSsimWindow; ++i) {
            const double x = i - kSsimWindow / 2;
            w[i] = std::exp(-x * x / (2.0 * kSsimSigma * kSsimSigma));
            s += w[i];
        }
        for (auto& v : w) v /= s;
        return w;
    }();
    return k;
}

/// Single-channel SSIM map mean over valid 11x11 windows.
inline double ssim_channel(const double* a, const double* b, int H, int W, double peak = 1.0) {
    require(H >= kSsimWindow && W >= kSsimWindow, "ssim: images must be at least 11x11");
    const auto& k = ssim_kernel_1d();
    const double C1 = (kSsimK1 * peak) * (kSsimK1 * peak), C2 = (kSsimK2 * peak) * (kSsimK2 * peak);
    const int oh = H - kSsimWindow + 1, ow = W - kSsimWindow + 1;
    double total = 0.0;
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
            double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
            for (int i = 0; i < kSsimWindow; ++i)
                for (int j = 0; j < kSsimWindow; ++j) {
                    const double w = k[i] * k[j];
                    const double va = a[(y + i) * W + x + j], vb = b[(y + i) * W + x + j];
                    ma += w * va;
                    mb += w * vb;
                    saa += w * (va * va);
                    sbb += w * (vb * vb);
                    sab += w * (va * vb);
                }
            const double va = saa - ma * ma, vb = sbb - mb * mb, cab = sab - ma * mb;
            total += ((2 * (ma * mb) + C1) * (2 * cab + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
        }
    return total / (static_cast<double>(oh) * ow);
}

/// SSIM of image n of each tensor, averaged over channels.
template <class T>
double ssim_image(const Tensor<T>& a, const Tensor<T>& b, int n, double peak = 1.0) {
    const int H = a.h(), W = a.w();
    std::vector<double> ca(static_cast<size_t>(H) * W), cb(ca.size());
    double s = 0.0;
    for (int c = 0; c < a.c(); ++c) {
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                ca[y * W + x] = a.at(n, c, y, x);
                cb[y * W + x] = b.at(n, c, y, x);
            }
        s += ssim_channel(ca.data(), cb.data(), H, W, peak);
    }
    return s / a.c();
}

/// Mean SSIM over the images of a batch.
template <class T>
double ssim(const Tensor<T>& a, const Tensor<T>& b, double peak = 1.0) {
    require_same_shape(a, b, "ssim");
    double s = 0.0;
    for (int n = 0; n < a.n(); ++n) s += ssim_image(a, b, n, peak);
    return s / a.n();
}

/// Squared-error sum and sample count over pixels labelled `region`.
template <class T>
std::optional<std::pair<double, size_t>> region_sse(const Tensor<T>& a, const Tensor<T>& b, int n,
                                                    std::span<const uint8_t> labels, int region) {
    double s = 0.0;
    size_t count = 0;
    for (int y = 0; y < a.h(); ++y)
        for (int x = 0; x < a.w(); ++x) {
            if (labels[static_cast<size_t>(y) * a.w() + x] != region) continue;
            for (int c = 0; c < a.c(); ++c) {
                const double d = static_cast<double>(a.at(n, c, y, x)) - b.at(n, c, y, x);
                s += d * d;
            }
            count += a.c();
        }
    if (count == 0) return std::nullopt;
    return std::make_pair(s, count);
}

struct EvalReport {
    std::vector<std::string> ids;
    std::vector<double> psnr;
    std::vector<double> ssim;
    std::vector<double> l1;
    double mean_psnr = 0.0;
    double mean_ssim = 0.0;
    double mean_l1 = 0.0;
    std::map<std::string, double> utilization;
    std::map<std::string, double> region_psnr;
    int count = 0;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["type"] = "eval";
        j["count"] = count;
        j["mean_psnr"] = mean_psnr;
        j["mean_ssim"] = mean_ssim;
        j["mean_l1"] = mean_l1;
        j["utilization"] = utilization;
        j["region_psnr"] = region_psnr;
        j["images"] = nlohmann::json::array();
        for (int i = 0; i < count; ++i)
            j["images"].push_back({{"id", ids[i]}, {"psnr", psnr[i]}, {"ssim", ssim[i]}, {"l1", l1[i]}});
        return j;
    }
};

/// Per-image metrics of `recon` against the dataset images (region PSNR
/// pooled over the dataset when labels are present).
inline EvalReport evaluate_reconstructions(const ImageDataset& ds, const Tensor<float>& recon) {
    require(ds.size() >= 1, "evaluate: empty dataset");
    require_same_shape(ds.images, recon, "evaluate");
    EvalReport r;
    r.count = ds.size();
    std::vector<double> sse(kRegionCount, 0.0);
    std::vector<size_t> cnt(kRegionCount, 0);
    const size_t sz = ds.images.image_size();
    for (int n = 0; n < ds.size(); ++n) {
        const std::span<const float> a(ds.images.image(n), sz), b(recon.image(n), sz);
        double l1 = 0.0;
        for (size_t i = 0; i < sz; ++i) l1 += std::abs(static_cast<double>(a[i]) - b[i]);
        r.ids.push_back(ds.ids[n]);
        r.psnr.push_back(psnr_from_mse(mse<float>(a, b)));
        r.ssim.push_back(ssim_image(ds.images, recon, n));
        r.l1.push_back(l1 / static_cast<double>(sz));
        if (ds.has_labels())
            for (int k = 0; k < kRegionCount; ++k)
                if (auto s = region_sse(ds.images, recon, n, ds.label_map(n), k)) {
                    sse[k] += s->first;
                    cnt[k] += s->second;
                }
    }
    for (int n = 0; n < r.count; ++n) {
        r.mean_psnr += r.psnr[n];
        r.mean_ssim += r.ssim[n];
        r.mean_l1 += r.l1[n];
    }
    r.mean_psnr /= r.count;
    r.mean_ssim /= r.count;
    r.mean_l1 /= r.count;
    for (int k = 0; k < kRegionCount; ++k)
        if (cnt[k]) r.region_psnr[region_name(k)] = psnr_from_mse(sse[k] / static_cast<double>(cnt[k]));
    return r;
}

/// Full deterministic pass in fixed batches; usage windows span the pass.
template <class T>
EvalReport evaluate(VgqModel<T>& model, const ImageDataset& ds, int batch_size = 16) {
    require(ds.size() >= 1, "evaluate: empty dataset");
    require(batch_size >= 1, "evaluate: batch_size must be >= 1");
    Tensor<float> recon(ds.images.shape());
    std::map<std::string, UsageWindow> windows;
    for (auto& [name, cb] : model.codebooks()) windows.emplace(name, UsageWindow(cb->size()));
    if (model.gaussian()) windows.emplace("opacity", UsageWindow(model.opacity_codebook().size()));
    for (int start = 0; start < ds.size(); start += batch_size) {
        const int count = std::min(batch_size, ds.size() - start);
        std::vector<int> idx(count);
        for (int k = 0; k < count; ++k) idx[k] = start + k;
        const auto f = model.forward(ds.batch(idx).template cast<T>(), QuantMode::nearest);
        const auto out = f.recon.template cast<float>();
        std::copy_n(out.data(), out.size(), recon.image(start));
        windows.at("vq").record(f.vq_out.indices);
        if (model.gaussian()) {
            windows.at("geo").record(f.gs_out.geo_indices);
            windows.at("feat").record(f.gs_out.feat_indices);
            windows.at("opacity").record(f.gs_out.opacity_indices);
        } else {
            windows.at("vq2").record(f.vq2_out.indices);
        }
    }
    EvalReport r = evaluate_reconstructions(ds, recon);
    for (const auto& [name, w] : windows) r.utilization[name] = utilization(w);
    return r;
}

} // namespace vgq
