// Copyright Contributors to the VGQ Project
// SPDX-License-Identifier: Apache-2.0
//
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "vgq/data.hpp"
#include "vgq/gradcheck.hpp"
#include "vgq/io/archive.hpp"
#include "vgq/io/tokens.hpp"
#include "vgq/metrics.hpp"
#include "vgq/splat.hpp"
#include "vgq/train.hpp"

namespace fs = std::filesystem;
using namespace vgq;

namespace {

constexpr uint64_t kDefaultSeed = 42;
constexpr const char* kReconMagic = "VGQRECN1";

class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Images {
    std::vector<std::string> ids;
    Tensor<float> pixels;
};

/// Files and directories (expanded, sorted) resized to `resolution`.
Images read_image_list(const std::vector<std::string>& paths, int resolution) {
    std::vector<fs::path> files;
    for (const auto& p : paths) {
        if (fs::is_directory(p)) {
            std::vector<fs::path> dir;
            for (const auto& e : fs::directory_iterator(p))
                if (e.is_regular_file() && is_image_file(e.path()) && !is_label_file(e.path())) dir.push_back(e.path());
            std::sort(dir.begin(), dir.end());
            files.insert(files.end(), dir.begin(), dir.end());
        } else if (fs::exists(p)) {
            files.emplace_back(p);
        } else {
            throw DataError("image path '" + p + "' does not exist");
        }
    }
    if (files.empty()) throw UsageError("no images given");
    Images out;
    out.pixels = Tensor<float>(static_cast<int>(files.size()), 3, resolution, resolution);
    for (size_t i = 0; i < files.size(); ++i) {
        store_image(out.pixels, static_cast<int>(i), resize_bilinear(center_crop(read_image(files[i])), resolution, resolution));
        out.ids.push_back(files[i].stem().string());
    }
    return out;
}

Tensor<float> one_image(const Tensor<float>& t, int n) { return t.slice(n, 1); }

void apply_overrides(TrainConfig& cfg, const std::vector<std::string>& sets) {
    for (const auto& s : sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + s + "'");
        set_config_value(cfg, detail::trim(s.substr(0, eq)), detail::trim(s.substr(eq + 1)));
    }
    cfg.validate();
}

TrainConfig config_from(const std::string& path, const std::vector<std::string>& sets, std::optional<uint64_t> seed) {
    TrainConfig cfg = path.empty() ? TrainConfig{} : load_config(path);
    apply_overrides(cfg, sets);
    if (seed) cfg.seed = *seed;
    return cfg;
}

LoadResult load_data(const std::string& dir, const TrainConfig& cfg) {
    return load_directory(dir, cfg.model.resolution, cfg.train_split, cfg.seed);
}

void print_step(const StepReport& r) {
    if (r.step == 1 || r.step % 50 == 0)
        std::printf("step %6lld  epoch %3d  total %.5f  rec %.5f  commit %.5f  gamma %.3f\n",
                    static_cast<long long>(r.step), r.epoch, r.total, r.loss.rec, r.loss.commitment, r.gamma);
}

// ------------------------------------------------------------------- gen-data

int cmd_gen_data(int count, int resolution, uint64_t seed, const std::string& out) {
    if (count < 1) throw UsageError("--count must be >= 1");
    if (resolution < 1) throw UsageError("--resolution must be >= 1");
    const auto ds = generate_toy_corpus(count, resolution, seed);
    export_dataset(ds, out, seed);
    std::printf("wrote %d images (%dx%d) to %s  checksum %016llx\n", count, resolution, resolution, out.c_str(),
                static_cast<unsigned long long>(dataset_checksum(ds)));
    return 0;
}

// ---------------------------------------------------------------------- train

int cmd_train(const std::string& config, const std::vector<std::string>& sets, std::optional<uint64_t> seed,
              const std::string& data, const std::string& out, const std::string& resume, bool quiet) {
    std::unique_ptr<Trainer> t;
    TrainConfig cfg;
    if (!resume.empty()) {
        t = std::make_unique<Trainer>(Trainer::load(resume));
        cfg = t->config();
        if (!config.empty() || !sets.empty()) {
            cfg = config_from(config, sets, seed.value_or(t->config().seed));
            t->override_schedule(cfg);
        }
    } else {
        cfg = config_from(config, sets, seed);
    }
    auto split = load_data(data, cfg);
    if (!t) t = std::make_unique<Trainer>(cfg);
    LoopOptions opt;
    opt.out_dir = out;
    opt.val = split.val.size() ? &split.val : nullptr;
    if (!quiet) opt.on_step = print_step;
    const auto res = train_loop(*t, split.train, opt);
    std::printf("trained %lld steps over %d images (val %d); checkpoint %s\n", static_cast<long long>(t->step()),
                split.train.size(), split.val.size(), res.final_checkpoint.string().c_str());
    if (!res.validation.empty()) {
        const auto& v = res.validation.back().second;
        std::printf("val psnr %.3f dB  ssim %.4f  l1 %.5f\n", v.mean_psnr, v.mean_ssim, v.mean_l1);
    }
    return 0;
}

// ------------------------------------------------------------ encode / decode

int cmd_encode(const std::string& ckpt, const std::vector<std::string>& images, const std::string& out, bool binary) {
    Trainer t = Trainer::load(ckpt);
    auto& model = t.model();
    if (!model.config().quantize) throw UsageError("checkpoint was trained without quantization; nothing to encode");
    const Images in = read_image_list(images, model.config().resolution);
    std::vector<TokenSequence> seqs;
    for (int n = 0; n < in.pixels.n(); ++n) {
        auto s = model.tokenize(one_image(in.pixels, n));
        s[0].id = in.ids[n];
        seqs.push_back(std::move(s[0]));
    }
    const auto header = io::TokenHeader::from_config(model.config());
    if (binary)
        io::write_tokens_binary(out, header, seqs);
    else
        io::write_tokens_jsonl(out, header, seqs);
    std::printf("encoded %zu images to %s (%d tokens each)\n", seqs.size(), out.c_str(), model.config().tokens());
    return 0;
}

int cmd_decode(const std::string& ckpt, const std::string& tokens, const std::string& out) {
    Trainer t = Trainer::load(ckpt);
    auto& model = t.model();
    const auto file = io::read_tokens(tokens);
    io::check_header(file.header, model.config());
    if (file.records.empty()) throw UsageError("token stream has no records");
    model.validate_tokens(file.records);
    const int R = model.config().resolution;
    Tensor<float> recon(static_cast<int>(file.records.size()), 3, R, R);
    fs::create_directories(out);
    std::string ids;
    for (size_t i = 0; i < file.records.size(); ++i) {
        const Tensor<float> img = model.detokenize({file.records[i]});
        std::copy_n(img.data(), img.size(), recon.image(static_cast<int>(i)));
        const std::string id = file.records[i].id.empty() ? "image_" + std::to_string(i) : file.records[i].id;
        write_png(fs::path(out) / (id + ".png"), tensor_image(img, 0));
        ids += (i ? "\n" : "") + id;
    }
    io::Archive a(kReconMagic);
    a.put_bytes("ids", ids);
    a.put_f32("recon", recon.values(), {recon.n(), 3, R, R});
    a.save(fs::path(out) / "recon.vgqrec");
    std::printf("decoded %zu images to %s\n", file.records.size(), out.c_str());
    return 0;
}

// ----------------------------------------------------------------------- eval

int cmd_eval(const std::string& ckpt, const std::string& data, const std::string& report, const std::string& split) {
    Trainer t = Trainer::load(ckpt);
    const auto& cfg = t.config();
    LoadResult lr = load_directory(data, cfg.model.resolution, split == "all" ? 1.0 : cfg.train_split, cfg.seed);
    const ImageDataset& ds = split == "val" ? lr.val : lr.train;
    if (ds.size() == 0) throw DataError("split '" + split + "' is empty");
    const EvalReport r = evaluate(t.model(), ds, cfg.batch_size);
    if (!report.empty()) {
        std::ofstream f(report);
        if (!f) throw DataError("cannot write '" + report + "'");
        f << r.to_json().dump(2) << "\n";
    }
    std::printf("images %d  psnr %.3f dB  ssim %.4f  l1 %.5f\n", r.count, r.mean_psnr, r.mean_ssim, r.mean_l1);
    for (const auto& [name, u] : r.utilization) std::printf("utilization %-8s %.4f\n", name.c_str(), u);
    for (const auto& [name, p] : r.region_psnr) std::printf("region %-10s psnr %.3f dB\n", name.c_str(), p);
    return 0;
}

// ------------------------------------------------------------------ gradcheck

int cmd_gradcheck(uint64_t seed, int size, int configs, const std::string& fault, const std::vector<std::string>& only) {
    if (size < 1 || size > kGradcheckMaxSize)
        throw UsageError("--size must be in [1, " + std::to_string(kGradcheckMaxSize) + "]");
    if (configs < 1) throw UsageError("--configs must be >= 1");
    GradcheckOptions opt;
    opt.seed = seed;
    opt.size = size;
    opt.configs = configs;
    opt.fault = fault;
    opt.only = only;
    const auto names = gradcheck_ops();
    for (const auto& o : only)
        if (std::none_of(names.begin(), names.end(), [&](const auto& n) { return n.name == o; }))
            throw UsageError("unknown gradcheck op '" + o + "'");
    const auto results = run_gradcheck(opt);
    std::vector<std::string> failed;
    std::printf("%-24s %8s %14s %8s %9s\n", "op", "configs", "worst_rel_err", "skipped", "seconds");
    for (const auto& r : results) {
        std::printf("%-24s %8d %14.3e %8d %9.3f %s\n", r.op.c_str(), r.configs, r.worst, r.skipped, r.seconds,
                    r.passed ? "ok" : "FAIL");
        if (!r.passed) failed.push_back(r.op);
    }
    if (!failed.empty()) {
        std::string list;
        for (const auto& f : failed) list += (list.empty() ? "" : ", ") + f;
        throw NumericError("gradcheck failed for: " + list);
    }
    return 0;
}

// ---------------------------------------------------------------------- bench

/// Untruncated per-pixel backward, the counterpart of splat_reference.
template <class T>
SplatGradients<T> splat_backward_reference(const SplatBatch<T>& b, GridShape grid, const FeatureMap<T>& cot) {
    SplatGradients<T> g;
    const size_t K = b.gaussians.size();
    const int d = b.channels();
    g.geometry.resize(K);
    g.opacity.assign(K, T(0));
    g.feature.assign(K, std::vector<T>(d, T(0)));
    for (size_t k = 0; k < K; ++k) {
        const auto& gs = b.gaussians[k];
        for (int y = 0; y < grid.height; ++y)
            for (int x = 0; x < grid.width; ++x) {
                const auto c = pixel_center<T>(x, y, grid);
                const T v = eval_gaussian(gs, c);
                T dot = 0;
                for (int ch = 0; ch < d; ++ch) {
                    const T w = cot.at(y, x, ch);
                    dot += w * gs.feature[ch];
                    g.feature[k][ch] += w * gs.opacity * v;
                }
                g.opacity[k] += dot * v;
                const auto gg = eval_gaussian_grad(gs, c);
                const T s = dot * gs.opacity;
                g.geometry[k].position[0] += s * gg.position[0];
                g.geometry[k].position[1] += s * gg.position[1];
                g.geometry[k].rotation += s * gg.rotation;
                g.geometry[k].scales[0] += s * gg.scales[0];
                g.geometry[k].scales[1] += s * gg.scales[1];
            }
    }
    return g;
}

int cmd_bench(int gaussians, int grid_side, int channels, int iters, int workers, uint64_t seed) {
    if (gaussians < 1) throw UsageError("--gaussians must be >= 1");
    if (grid_side < 1 || grid_side > 4096) throw UsageError("--grid must be in [1, 4096]");
    if (channels < 1) throw UsageError("--channels must be >= 1");
    if (iters < 1) throw UsageError("--iters must be >= 1");
    if (workers < 1) throw UsageError("--workers must be >= 1");
    Rng rng(seed);
    std::uniform_real_distribution<float> u(0, 1), sc(0.01f, 0.08f);
    std::normal_distribution<float> nrm(0, 1);
    SplatBatch<float> b;
    for (int k = 0; k < gaussians; ++k) {
        Gaussian2D<float> g;
        g.position = {u(rng), u(rng)};
        g.rotation = u(rng) * 6.2831853f;
        g.scales = {sc(rng), sc(rng)};
        g.opacity = 0.05f + 0.95f * u(rng);
        for (int c = 0; c < channels; ++c) g.feature.push_back(nrm(rng));
        b.gaussians.push_back(std::move(g));
        b.token_of_gaussian.push_back(k);
    }
    const GridShape grid{grid_side, grid_side};
    FeatureMap<float> cot(grid_side, grid_side, channels);
    for (auto& v : cot.data) v = nrm(rng);
    SplatOptions opt;
    opt.workers = workers;
    const double work = static_cast<double>(gaussians) * grid_side * grid_side;
    auto time = [&](auto&& fn) {
        const auto t0 = std::chrono::steady_clock::now();
        for (int i = 0; i < iters; ++i) fn();
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / iters;
    };
    volatile float sink = 0;
    const double tf = time([&] { sink = sink + splat_forward(b, grid, opt).data[0]; });
    const double rf = time([&] { sink = sink + splat_reference(b, grid).data[0]; });
    const double tb = time([&] { sink = sink + splat_backward(b, grid, cot, opt).opacity[0]; });
    const double rb = time([&] { sink = sink + splat_backward_reference(b, grid, cot).opacity[0]; });
    std::printf("gaussians %d  grid %dx%d  channels %d  iters %d  workers %d\n", gaussians, grid_side, grid_side,
                channels, iters, workers);
    std::printf("%-10s %-9s %12s %18s\n", "kernel", "pass", "ms/iter", "gaussian*px/s");
    auto row = [&](const char* k, const char* p, double s) {
        std::printf("%-10s %-9s %12.3f %18.4e\n", k, p, s * 1e3, work / s);
    };
    row("tiled", "forward", tf);
    row("reference", "forward", rf);
    row("tiled", "backward", tb);
    row("reference", "backward", rb);
    std::printf("speedup forward %.2fx  backward %.2fx\n", rf / tf, rb / tb);
    return 0;
}

// --------------------------------------------------------------------- ablate

struct AblationRow {
    std::string value;
    double first_rec = 0, last_rec = 0;
    EvalReport val;
    bool finite = true;
};

int cmd_ablate(const std::string& config, const std::vector<std::string>& sets, std::optional<uint64_t> seed,
               const std::string& axis, const std::string& data, const std::string& out, bool quiet) {
    std::vector<std::string> values;
    if (axis == "fusion")
        values = {"hadamard", "add", "mask_adding", "cross_attention"};
    else if (axis == "num_gaussians")
        values = {"1", "2", "3", "4"};
    else
        throw UsageError("--axis must be fusion or num_gaussians");
    const TrainConfig base = config_from(config, sets, seed);
    const auto split = load_data(data, base);
    const ImageDataset& eval_set = split.val.size() ? split.val : split.train;
    std::vector<AblationRow> rows;
    for (const auto& v : values) {
        TrainConfig cfg = base;
        set_config_value(cfg, axis == "fusion" ? "fusion" : "gaussians_per_token", v);
        cfg.validate();
        Trainer t(cfg);
        LoopOptions opt;
        opt.out_dir = fs::path(out) / (axis + "_" + v);
        if (!quiet) opt.on_step = [&](const StepReport& r) {
            if (r.step % 100 == 0) std::printf("[%s=%s] step %lld rec %.5f\n", axis.c_str(), v.c_str(),
                                               static_cast<long long>(r.step), r.loss.rec);
        };
        AblationRow row;
        row.value = v;
        const auto res = train_loop(t, split.train, opt);
        if (!res.history.empty()) {
            row.first_rec = res.history.front().loss.rec;
            row.last_rec = res.history.back().loss.rec;
            for (const auto& h : res.history) row.finite = row.finite && std::isfinite(h.total);
        }
        row.val = evaluate(t.model(), eval_set, cfg.batch_size);
        rows.push_back(std::move(row));
    }
    nlohmann::json j{{"axis", axis}, {"seed", base.seed}, {"rows", nlohmann::json::array()}};
    std::ostringstream table;
    table << "| " << axis << " | first L_rec | last L_rec | val PSNR | val SSIM | val L1 | min util | finite |\n"
          << "|---|---|---|---|---|---|---|---|\n";
    for (const auto& r : rows) {
        double umin = 1.0;
        for (const auto& [name, u] : r.val.utilization)
            if (name != "opacity") umin = std::min(umin, u);
        char line[256];
        std::snprintf(line, sizeof(line), "| %s | %.5f | %.5f | %.3f | %.4f | %.5f | %.3f | %s |\n", r.value.c_str(),
                      r.first_rec, r.last_rec, r.val.mean_psnr, r.val.mean_ssim, r.val.mean_l1, umin,
                      r.finite ? "yes" : "no");
        table << line;
        auto e = r.val.to_json();
        e.erase("images");
        j["rows"].push_back({{"value", r.value}, {"first_rec", r.first_rec}, {"last_rec", r.last_rec},
                             {"finite", r.finite}, {"val", e}});
    }
    fs::create_directories(out);
    std::ofstream(fs::path(out) / "ablation.md") << table.str();
    std::ofstream(fs::path(out) / "ablation.json") << j.dump(2) << "\n";
    std::cout << table.str();
    for (const auto& r : rows)
        if (!r.finite) throw NumericError("ablation row " + axis + "=" + r.value + " produced a non-finite loss");
    return 0;
}

// --------------------------------------------------------------------- report

int cmd_report(const std::string& history) {
    std::ifstream in(history);
    if (!in) throw DataError("cannot open history '" + history + "'");
    std::string line;
    size_t lineno = 0, steps = 0;
    double first = 0, last = 0, min_rec = std::numeric_limits<double>::infinity();
    std::vector<nlohmann::json> vals;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw DataError("history line " + std::to_string(lineno) + ": " + e.what());
        }
        if (j.value("type", "") == "val") {
            vals.push_back(j);
            continue;
        }
        const double rec = j.at("rec").get<double>();
        if (steps == 0) first = rec;
        last = rec;
        min_rec = std::min(min_rec, rec);
        ++steps;
    }
    if (steps == 0 && vals.empty()) throw DataError("history '" + history + "' has no records");
    std::printf("steps %zu  L_rec first %.5f  last %.5f  min %.5f", steps, first, last, min_rec);
    if (steps && first > 0) std::printf("  reduction %.1f%%", 100.0 * (1.0 - last / first));
    std::printf("\n");
    if (!vals.empty()) {
        std::printf("%6s %8s %10s %8s %9s\n", "epoch", "step", "psnr", "ssim", "l1");
        for (const auto& v : vals)
            std::printf("%6d %8lld %10.3f %8.4f %9.5f\n", v.value("epoch", 0), v.value("step", 0LL),
                        v.value("mean_psnr", 0.0), v.value("mean_ssim", 0.0), v.value("mean_l1", 0.0));
    }
    return 0;
}

int fail(const char* kind, const std::string& msg, int code) {
    std::string one = msg;
    std::replace(one.begin(), one.end(), '\n', ' ');
    std::fprintf(stderr, "vgq: error[%s]: %s\n", kind, one.c_str());
    return code;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"vgq: discrete Gaussian image tokenizer"};
    app.require_subcommand(1);
    app.set_version_flag("--version", "vgq 0.1.0");

    std::optional<uint64_t> seed;
    auto add_seed = [&](CLI::App* c) { c->add_option("--seed", seed, "RNG seed (default 42)"); };
    auto seed_or_default = [&] { return seed.value_or(kDefaultSeed); };
    bool quiet = false;

    int count = 200, resolution = 32;
    std::string out;
    auto* gen = app.add_subcommand("gen-data", "write the synthetic toy corpus as PPM files");
    gen->add_option("--count", count, "number of images")->capture_default_str();
    gen->add_option("--resolution", resolution, "image side in pixels")->capture_default_str();
    gen->add_option("--out", out, "output directory")->required();
    add_seed(gen);

    std::string config, data, resume;
    std::vector<std::string> sets;
    auto* train = app.add_subcommand("train", "train a tokenizer");
    train->add_option("--config", config, "key = value config file");
    train->add_option("--set", sets, "override one config key (key=value)");
    train->add_option("--data", data, "image directory")->required();
    train->add_option("--out", out, "run directory")->required();
    train->add_option("--resume", resume, "checkpoint to continue from");
    train->add_flag("--quiet", quiet, "no per-step output");
    add_seed(train);

    std::string checkpoint, tokens, report, split = "all";
    std::vector<std::string> images;
    bool binary = false;
    auto* enc = app.add_subcommand("encode", "images -> token stream");
    enc->add_option("--checkpoint", checkpoint)->required();
    enc->add_option("--images", images, "image files or directories")->required();
    enc->add_option("--out", out, "token stream path")->required();
    enc->add_flag("--binary", binary, "packed binary stream");
    add_seed(enc);

    auto* dec = app.add_subcommand("decode", "token stream -> images");
    dec->add_option("--checkpoint", checkpoint)->required();
    dec->add_option("--tokens", tokens)->required();
    dec->add_option("--out", out, "output directory")->required();
    add_seed(dec);

    auto* ev = app.add_subcommand("eval", "reconstruction metrics and codebook utilization");
    ev->add_option("--checkpoint", checkpoint)->required();
    ev->add_option("--data", data)->required();
    ev->add_option("--report", report, "JSON report path");
    ev->add_option("--split", split, "all, train or val")->check(CLI::IsMember({"all", "train", "val"}));
    add_seed(ev);

    int size = 1, configs = 100;
    std::string fault;
    std::vector<std::string> only;
    auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every backward pass");
    gc->add_option("--size", size, "miniature scale 1..4")->capture_default_str();
    gc->add_option("--configs", configs, "random configurations per op")->capture_default_str();
    gc->add_option("--inject-fault", fault, "corrupt the analytic gradient of this op");
    gc->add_option("--only", only, "restrict to these ops");
    add_seed(gc);

    int gaussians = 256, grid = 64, channels = 8, iters = 10, workers = 1;
    auto* bench = app.add_subcommand("bench", "splatting throughput, tiled vs reference");
    bench->add_option("--gaussians", gaussians)->capture_default_str();
    bench->add_option("--grid", grid)->capture_default_str();
    bench->add_option("--channels", channels)->capture_default_str();
    bench->add_option("--iters", iters)->capture_default_str();
    bench->add_option("--workers", workers)->capture_default_str();
    add_seed(bench);

    std::string axis;
    auto* abl = app.add_subcommand("ablate", "one run per fusion mode or Gaussian count");
    abl->add_option("--config", config);
    abl->add_option("--set", sets, "override one config key (key=value)");
    abl->add_option("--axis", axis, "fusion or num_gaussians")->required();
    abl->add_option("--data", data)->required();
    abl->add_option("--out", out)->required();
    abl->add_flag("--quiet", quiet);
    add_seed(abl);

    std::string history;
    auto* rep = app.add_subcommand("report", "summarize a history.jsonl");
    rep->add_option("--history", history)->required();
    add_seed(rep);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        return fail("usage", e.what(), 1);
    }

    try {
        if (*gen) return cmd_gen_data(count, resolution, seed_or_default(), out);
        if (*train) return cmd_train(config, sets, seed, data, out, resume, quiet);
        if (*enc) return cmd_encode(checkpoint, images, out, binary);
        if (*dec) return cmd_decode(checkpoint, tokens, out);
        if (*ev) return cmd_eval(checkpoint, data, report, split);
        if (*gc) return cmd_gradcheck(seed_or_default(), size, configs, fault, only);
        if (*bench) return cmd_bench(gaussians, grid, channels, iters, workers, seed_or_default());
        if (*abl) return cmd_ablate(config, sets, seed, axis, data, out, quiet);
        if (*rep) return cmd_report(history);
    } catch (const UsageError& e) {
        return fail("usage", e.what(), 1);
    } catch (const ConfigError& e) {
        return fail("config", e.what(), 1);
    } catch (const ContractError& e) {
        return fail("usage", e.what(), 1);
    } catch (const DomainError& e) {
        return fail("usage", e.what(), 1);
    } catch (const DataError& e) {
        return fail("data", e.what(), 2);
    } catch (const fs::filesystem_error& e) {
        return fail("data", e.what(), 2);
    } catch (const NumericError& e) {
        return fail("numeric", e.what(), 3);
    } catch (const std::exception& e) {
        return fail("internal", e.what(), 2);
    }
    return 1;
}
