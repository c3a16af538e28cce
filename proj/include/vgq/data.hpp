// Copyright Contributors to the VGQ Project
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "vgq/errors.hpp"
#include "vgq/param.hpp"
#include "vgq/tensor.hpp"

namespace vgq {

namespace fs = std::filesystem;

/// Interleaved HxWxC image with values in [0, 1].
struct Image {
    int width = 0;
    int height = 0;
    int channels = 3;
    std::vector<float> pixels;

    Image() = default;
    Image(int w, int h, int c = 3) : width(w), height(h), channels(c), pixels(static_cast<size_t>(w) * h * c, 0.0f) {}

    float& at(int y, int x, int c) { return pixels[(static_cast<size_t>(y) * width + x) * channels + c]; }
    float at(int y, int x, int c) const { return pixels[(static_cast<size_t>(y) * width + x) * channels + c]; }
};

/// Per-pixel region classes of the toy corpus.
enum class Region : uint8_t { background = 0, rectangle = 1, stroke = 2, texture = 3 };
inline constexpr int kRegionCount = 4;
inline const char* region_name(int r) {
    static const char* names[] = {"background", "rectangle", "stroke", "texture"};
    return names[r];
}

/// Images stacked as (N,3,R,R) plus optional per-pixel region labels.
struct ImageDataset {
    std::string split = "train";
    int resolution = 0;
    std::vector<std::string> ids;
    Tensor<float> images;
    std::vector<uint8_t> labels; // N*R*R when present

    int size() const { return static_cast<int>(ids.size()); }
    bool has_labels() const { return !labels.empty(); }

    Tensor<float> batch(const std::vector<int>& idx) const {
        Tensor<float> out(static_cast<int>(idx.size()), 3, resolution, resolution);
        for (size_t k = 0; k < idx.size(); ++k) {
            require(idx[k] >= 0 && idx[k] < size(), "ImageDataset::batch: index out of range");
            std::copy_n(images.image(idx[k]), images.image_size(), out.image(static_cast<int>(k)));
        }
        return out;
    }

    ImageDataset subset(const std::vector<int>& idx, const std::string& split_name) const {
        ImageDataset out;
        out.split = split_name;
        out.resolution = resolution;
        out.images = batch(idx);
        const size_t px = static_cast<size_t>(resolution) * resolution;
        for (int i : idx) {
            out.ids.push_back(ids[i]);
            if (has_labels()) out.labels.insert(out.labels.end(), labels.begin() + i * px, labels.begin() + (i + 1) * px);
        }
        return out;
    }

    std::span<const uint8_t> label_map(int n) const {
        const size_t px = static_cast<size_t>(resolution) * resolution;
        return {labels.data() + n * px, px};
    }
};

inline float quantize8(float v) { return std::round(std::clamp(v, 0.0f, 1.0f) * 255.0f) / 255.0f; }

// ---------------------------------------------------------------- file I/O

namespace detail {

inline std::string read_token(std::istream& in) {
    std::string tok;
    char ch;
    while (in.get(ch)) {
        if (ch == '#') {
            std::string skip;
            std::getline(in, skip);
            continue;
        }
        if (std::isspace(static_cast<unsigned char>(ch))) {
            if (!tok.empty()) break;
            continue;
        }
        tok.push_back(ch);
    }
    return tok;
}

} // namespace detail

/// Binary PPM (P6) or PGM (P5), 8-bit.
inline Image read_pnm(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open '" + path.string() + "'");
    const std::string magic = detail::read_token(in);
    if (magic != "P6" && magic != "P5") throw DataError("'" + path.string() + "': not a binary PPM/PGM");
    int w = 0, h = 0, maxv = 0;
    try {
        w = std::stoi(detail::read_token(in));
        h = std::stoi(detail::read_token(in));
        maxv = std::stoi(detail::read_token(in));
    } catch (const std::exception&) {
        throw DataError("'" + path.string() + "': malformed header");
    }
    if (w <= 0 || h <= 0 || maxv <= 0 || maxv > 255) throw DataError("'" + path.string() + "': unsupported header");
    const int c = magic == "P6" ? 3 : 1;
    std::vector<unsigned char> raw(static_cast<size_t>(w) * h * c);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (in.gcount() != static_cast<std::streamsize>(raw.size())) throw DataError("'" + path.string() + "': truncated");
    Image img(w, h, c);
    for (size_t i = 0; i < raw.size(); ++i) img.pixels[i] = static_cast<float>(raw[i]) / static_cast<float>(maxv);
    return img;
}

inline void write_pnm(const fs::path& path, const Image& img) {
    require(img.channels == 3 || img.channels == 1, "write_pnm: 1 or 3 channels");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write '" + path.string() + "'");
    out << (img.channels == 3 ? "P6" : "P5") << "\n" << img.width << " " << img.height << "\n255\n";
    std::vector<unsigned char> raw(img.pixels.size());
    for (size_t i = 0; i < raw.size(); ++i)
        raw[i] = static_cast<unsigned char>(std::lround(std::clamp(img.pixels[i], 0.0f, 1.0f) * 255.0f));
    out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
}

inline Image read_png(const fs::path& path) {
    png_image png{};
    png.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&png, path.string().c_str()))
        throw DataError("'" + path.string() + "': " + png.message);
    png.format = PNG_FORMAT_RGB;
    std::vector<unsigned char> raw(PNG_IMAGE_SIZE(png));
    if (!png_image_finish_read(&png, nullptr, raw.data(), 0, nullptr)) {
        png_image_free(&png);
        throw DataError("'" + path.string() + "': " + png.message);
    }
    Image img(static_cast<int>(png.width), static_cast<int>(png.height), 3);
    for (size_t i = 0; i < raw.size(); ++i) img.pixels[i] = static_cast<float>(raw[i]) / 255.0f;
    return img;
}

inline void write_png(const fs::path& path, const Image& img) {
    require(img.channels == 3, "write_png: RGB only");
    png_image png{};
    png.version = PNG_IMAGE_VERSION;
    png.width = static_cast<png_uint_32>(img.width);
    png.height = static_cast<png_uint_32>(img.height);
    png.format = PNG_FORMAT_RGB;
    std::vector<unsigned char> raw(img.pixels.size());
    for (size_t i = 0; i < raw.size(); ++i)
        raw[i] = static_cast<unsigned char>(std::lround(std::clamp(img.pixels[i], 0.0f, 1.0f) * 255.0f));
    if (!png_image_write_to_file(&png, path.string().c_str(), 0, raw.data(), 0, nullptr))
        throw DataError("cannot write '" + path.string() + "': " + png.message);
}

inline bool is_image_file(const fs::path& p) {
    std::string ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    return ext == ".png" || ext == ".ppm";
}

inline bool is_label_file(const fs::path& p) {
    const std::string name = p.filename().string();
    return name.size() > 11 && name.ends_with(".labels.pgm");
}

inline Image read_image(const fs::path& path) {
    std::string ext = path.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".png") return read_png(path);
    Image img = read_pnm(path);
    if (img.channels != 3) throw DataError("'" + path.string() + "': expected an RGB image");
    return img;
}

// ----------------------------------------------------------- preprocessing

/// Largest centered square.
inline Image center_crop(const Image& img) {
    const int s = std::min(img.width, img.height);
    const int x0 = (img.width - s) / 2, y0 = (img.height - s) / 2;
    Image out(s, s, img.channels);
    for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x)
            for (int c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(y0 + y, x0 + x, c);
    return out;
}

/// Bilinear resampling with pixel-center alignment and border clamping.
inline Image resize_bilinear(const Image& img, int w, int h) {
    if (img.width == w && img.height == h) return img;
    Image out(w, h, img.channels);
    const double sx = static_cast<double>(img.width) / w, sy = static_cast<double>(img.height) / h;
    for (int y = 0; y < h; ++y) {
        const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, img.height - 1.0);
        const int y0 = static_cast<int>(fy), y1 = std::min(y0 + 1, img.height - 1);
        const double ty = fy - y0;
        for (int x = 0; x < w; ++x) {
            const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, img.width - 1.0);
            const int x0 = static_cast<int>(fx), x1 = std::min(x0 + 1, img.width - 1);
            const double tx = fx - x0;
            for (int c = 0; c < img.channels; ++c) {
                const double top = img.at(y0, x0, c) * (1 - tx) + img.at(y0, x1, c) * tx;
                const double bot = img.at(y1, x0, c) * (1 - tx) + img.at(y1, x1, c) * tx;
                out.at(y, x, c) = static_cast<float>(top * (1 - ty) + bot * ty);
            }
        }
    }
    return out;
}

inline Image resize_nearest(const Image& img, int w, int h) {
    if (img.width == w && img.height == h) return img;
    Image out(w, h, img.channels);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const int sy = std::min(img.height - 1, static_cast<int>((y + 0.5) * img.height / h));
            const int sx = std::min(img.width - 1, static_cast<int>((x + 0.5) * img.width / w));
            for (int c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(sy, sx, c);
        }
    return out;
}

inline void store_image(Tensor<float>& t, int n, const Image& img) {
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) t.at(n, c, y, x) = img.at(y, x, c);
}

template <class T>
Image tensor_image(const Tensor<T>& t, int n) {
    Image img(t.w(), t.h(), 3);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < t.h(); ++y)
            for (int x = 0; x < t.w(); ++x) img.at(y, x, c) = static_cast<float>(t.at(n, c, y, x));
    return img;
}

/// Deterministic seeded train/val partition: round(ratio * n) train items.
inline std::pair<std::vector<int>, std::vector<int>> split_indices(int n, double ratio, uint64_t seed) {
    require(ratio >= 0.0 && ratio <= 1.0, "split ratio must be in [0, 1]");
    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i;
    Rng rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    const int ntrain = static_cast<int>(std::lround(ratio * n));
    std::vector<int> train(order.begin(), order.begin() + ntrain), val(order.begin() + ntrain, order.end());
    std::sort(train.begin(), train.end());
    std::sort(val.begin(), val.end());
    return {train, val};
}

struct LoadResult {
    ImageDataset train;
    ImageDataset val;
    std::vector<std::string> warnings;
};

/// Reads every PNG/PPM in `dir` (sorted by name), center-crops, resizes to
/// `resolution` and splits. Undecodable files are skipped with a warning.
/// `<stem>.labels.pgm` next to an image is read as its region label map.
inline LoadResult load_directory(const fs::path& dir, int resolution, double split_ratio, uint64_t seed,
                                 std::ostream* log = &std::cerr) {
    if (!fs::is_directory(dir)) throw DataError("data directory '" + dir.string() + "' does not exist");
    require(resolution >= 1, "load_directory: resolution must be >= 1");
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && is_image_file(e.path()) && !is_label_file(e.path())) files.push_back(e.path());
    std::sort(files.begin(), files.end());

    LoadResult res;
    ImageDataset all;
    all.resolution = resolution;
    std::vector<Image> imgs;
    std::vector<std::optional<Image>> label_maps;
    for (const auto& f : files) {
        try {
            imgs.push_back(resize_bilinear(center_crop(read_image(f)), resolution, resolution));
        } catch (const DataError& e) {
            res.warnings.push_back(std::string("skipping undecodable file: ") + e.what());
            if (log) *log << "vgq: warning: " << res.warnings.back() << "\n";
            continue;
        }
        all.ids.push_back(f.stem().string());
        const fs::path lp = f.parent_path() / (f.stem().string() + ".labels.pgm");
        std::optional<Image> lab;
        if (fs::exists(lp)) {
            Image l = read_pnm(lp);
            if (l.channels == 1) {
                Image tmp(l.width, l.height, 1);
                for (size_t i = 0; i < l.pixels.size(); ++i) tmp.pixels[i] = std::round(l.pixels[i] * 255.0f);
                lab = resize_nearest(center_crop(tmp), resolution, resolution);
            }
        }
        label_maps.push_back(std::move(lab));
    }
    if (imgs.empty()) throw DataError("no decodable images in '" + dir.string() + "'");

    all.images = Tensor<float>(static_cast<int>(imgs.size()), 3, resolution, resolution);
    for (size_t i = 0; i < imgs.size(); ++i) store_image(all.images, static_cast<int>(i), imgs[i]);
    const bool labelled = std::all_of(label_maps.begin(), label_maps.end(), [](const auto& l) { return l.has_value(); });
    if (labelled)
        for (const auto& l : label_maps)
            for (float v : l->pixels) all.labels.push_back(static_cast<uint8_t>(std::clamp(v, 0.0f, 255.0f)));

    const auto [tr, va] = split_indices(all.size(), split_ratio, seed);
    res.train = all.subset(tr, "train");
    res.val = all.subset(va, "val");
    return res;
}

// -------------------------------------------------------------- toy corpus

namespace detail {

inline uint64_t item_seed(uint64_t seed, int index) {
    std::seed_seq seq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32), static_cast<uint32_t>(index)};
    std::array<uint32_t, 2> words{};
    seq.generate(words.begin(), words.end());
    return (static_cast<uint64_t>(words[0]) << 32) | words[1];
}

inline double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
    const double vx = bx - ax, vy = by - ay;
    const double len2 = vx * vx + vy * vy;
    double t = len2 > 0 ? ((px - ax) * vx + (py - ay) * vy) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const double dx = px - (ax + t * vx), dy = py - (ay + t * vy);
    return std::sqrt(dx * dx + dy * dy);
}

} // namespace detail

/// One synthetic image: background, a texture patch, 1-4 rectangles (some
/// rotated) and 1-3 glyph-like polylines 2 px wide. Pixels are snapped to
/// 8-bit levels so a PPM export reloads bit-identically.
inline std::pair<Image, std::vector<uint8_t>> generate_toy_image(int resolution, uint64_t seed) {
    Rng rng(seed);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    auto uni = [&](double a, double b) { return a + (b - a) * u01(rng); };
    auto color = [&] { return std::array<double, 3>{u01(rng), u01(rng), u01(rng)}; };
    const int R = resolution;
    Image img(R, R, 3);
    std::vector<uint8_t> label(static_cast<size_t>(R) * R, static_cast<uint8_t>(Region::background));
    auto paint = [&](int y, int x, const std::array<double, 3>& c, Region r) {
        for (int k = 0; k < 3; ++k) img.at(y, x, k) = static_cast<float>(c[k]);
        label[static_cast<size_t>(y) * R + x] = static_cast<uint8_t>(r);
    };

    const auto bg = color();
    for (int y = 0; y < R; ++y)
        for (int x = 0; x < R; ++x) paint(y, x, bg, Region::background);

    {
        const int pw = std::max(2, static_cast<int>(uni(0.2, 0.4) * R)), ph = std::max(2, static_cast<int>(uni(0.2, 0.4) * R));
        const int px = static_cast<int>(uni(0, R - pw)), py = static_cast<int>(uni(0, R - ph));
        const auto c0 = color(), c1 = color();
        const double fx = uni(0.6, 1.4) * std::numbers::pi, fy = uni(0.6, 1.4) * std::numbers::pi;
        const double phase = uni(0, 2 * std::numbers::pi);
        for (int y = py; y < py + ph; ++y)
            for (int x = px; x < px + pw; ++x) {
                const double t = 0.5 + 0.5 * std::sin(fx * x + phase) * std::sin(fy * y);
                paint(y, x, {c0[0] * t + c1[0] * (1 - t), c0[1] * t + c1[1] * (1 - t), c0[2] * t + c1[2] * (1 - t)},
                      Region::texture);
            }
    }

    const int rects = 1 + static_cast<int>(u01(rng) * 4) % 4;
    for (int k = 0; k < rects; ++k) {
        const double cx = uni(0.15, 0.85) * R, cy = uni(0.15, 0.85) * R;
        const double hw = uni(0.06, 0.22) * R, hh = uni(0.06, 0.22) * R;
        const double ang = u01(rng) < 0.5 ? 0.0 : uni(0.0, std::numbers::pi);
        const double ca = std::cos(ang), sa = std::sin(ang);
        const auto c = color();
        for (int y = 0; y < R; ++y)
            for (int x = 0; x < R; ++x) {
                const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
                const double lx = ca * dx + sa * dy, ly = -sa * dx + ca * dy;
                if (std::abs(lx) <= hw && std::abs(ly) <= hh) paint(y, x, c, Region::rectangle);
            }
    }

    const int strokes = 1 + static_cast<int>(u01(rng) * 3) % 3;
    for (int k = 0; k < strokes; ++k) {
        const int verts = 2 + static_cast<int>(u01(rng) * 3) % 3;
        std::vector<std::pair<double, double>> pts;
        for (int v = 0; v < verts; ++v) pts.emplace_back(uni(0.1, 0.9) * R, uni(0.1, 0.9) * R);
        const auto c = color();
        for (int y = 0; y < R; ++y)
            for (int x = 0; x < R; ++x)
                for (int v = 0; v + 1 < verts; ++v)
                    if (detail::segment_distance(x + 0.5, y + 0.5, pts[v].first, pts[v].second, pts[v + 1].first,
                                                 pts[v + 1].second) <= 1.0) {
                        paint(y, x, c, Region::stroke);
                        break;
                    }
    }

    for (auto& v : img.pixels) v = quantize8(v);
    return {img, label};
}

/// `count` seeded toy images; item i depends only on (seed, i).
inline ImageDataset generate_toy_corpus(int count, int resolution, uint64_t seed) {
    if (count < 1) throw ContractError("generate_toy_corpus: count must be >= 1");
    require(resolution >= 4, "generate_toy_corpus: resolution must be >= 4");
    ImageDataset ds;
    ds.resolution = resolution;
    ds.images = Tensor<float>(count, 3, resolution, resolution);
    for (int i = 0; i < count; ++i) {
        auto [img, lab] = generate_toy_image(resolution, detail::item_seed(seed, i));
        char id[32];
        std::snprintf(id, sizeof(id), "toy_%05d", i);
        ds.ids.emplace_back(id);
        store_image(ds.images, i, img);
        ds.labels.insert(ds.labels.end(), lab.begin(), lab.end());
    }
    return ds;
}

/// Writes `<id>.ppm`, `<id>.labels.pgm` and a manifest.json into `dir`.
inline void export_dataset(const ImageDataset& ds, const fs::path& dir, uint64_t seed) {
    fs::create_directories(dir);
    std::ostringstream manifest;
    manifest << "{\"count\":" << ds.size() << ",\"resolution\":" << ds.resolution << ",\"seed\":" << seed
             << ",\"regions\":[\"background\",\"rectangle\",\"stroke\",\"texture\"],\"items\":[";
    for (int n = 0; n < ds.size(); ++n) {
        write_pnm(dir / (ds.ids[n] + ".ppm"), tensor_image(ds.images, n));
        if (ds.has_labels()) {
            Image l(ds.resolution, ds.resolution, 1);
            const auto m = ds.label_map(n);
            for (size_t i = 0; i < m.size(); ++i) l.pixels[i] = static_cast<float>(m[i]) / 255.0f;
            write_pnm(dir / (ds.ids[n] + ".labels.pgm"), l);
        }
        manifest << (n ? "," : "") << "{\"id\":\"" << ds.ids[n] << "\",\"image\":\"" << ds.ids[n] << ".ppm\"";
        if (ds.has_labels()) manifest << ",\"labels\":\"" << ds.ids[n] << ".labels.pgm\"";
        manifest << "}";
    }
    manifest << "]}\n";
    std::ofstream(dir / "manifest.json") << manifest.str();
}

/// FNV-1a over the image bytes and labels; pins corpus regeneration.
inline uint64_t dataset_checksum(const ImageDataset& ds) {
    uint64_t h = 1469598103934665603ull;
    auto mix = [&](const unsigned char* p, size_t n) {
        for (size_t i = 0; i < n; ++i) {
            h ^= p[i];
            h *= 1099511628211ull;
        }
    };
    mix(reinterpret_cast<const unsigned char*>(ds.images.data()), ds.images.size() * sizeof(float));
    mix(ds.labels.data(), ds.labels.size());
    return h;
}

} // namespace vgq
