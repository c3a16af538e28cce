// Copyright Contributors to the VGQ Project
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "vgq/config.hpp"
#include "vgq/io/archive.hpp"
#include "vgq/model.hpp"

namespace vgq::io {

inline constexpr const char* kTokenMagic = "VGQTOKB1";

struct TokenHeader {
    int grid_h = 0;
    int grid_w = 0;
    int gaussians_per_token = 1;
    std::string branch = "gaussian";
    std::string feature_layout = "shared";
    std::map<std::string, int> codebook_sizes;

    static TokenHeader from_config(const ModelConfig& cfg) {
        TokenHeader h;
        h.grid_h = h.grid_w = cfg.grid();
        h.gaussians_per_token = cfg.gaussians_per_token;
        h.branch = to_string(cfg.branch);
        h.feature_layout = to_string(cfg.feature_layout);
        h.codebook_sizes["vq"] = cfg.k_vq;
        if (cfg.branch == BranchMode::gaussian) {
            h.codebook_sizes["geo"] = cfg.k_geo;
            h.codebook_sizes["feat"] = cfg.k_feat;
            h.codebook_sizes["opacity"] = cfg.opacity_levels;
        } else {
            h.codebook_sizes["vq2"] = cfg.k_vq;
        }
        return h;
    }

    nlohmann::json to_json() const {
        return {{"type", "header"},
                {"format", "vgq-tokens"},
                {"version", 1},
                {"grid", {grid_h, grid_w}},
                {"gaussians_per_token", gaussians_per_token},
                {"branch", branch},
                {"feature_layout", feature_layout},
                {"codebook_sizes", codebook_sizes}};
    }

    static TokenHeader from_json(const nlohmann::json& j) {
        if (j.value("type", "") != "header" || j.value("format", "") != "vgq-tokens")
            throw DataError("token stream: first record is not a vgq-tokens header");
        if (j.value("version", 0) != 1) throw DataError("token stream: unsupported version");
        TokenHeader h;
        h.grid_h = j.at("grid").at(0).get<int>();
        h.grid_w = j.at("grid").at(1).get<int>();
        h.gaussians_per_token = j.at("gaussians_per_token").get<int>();
        h.branch = j.at("branch").get<std::string>();
        h.feature_layout = j.at("feature_layout").get<std::string>();
        h.codebook_sizes = j.at("codebook_sizes").get<std::map<std::string, int>>();
        return h;
    }

    bool operator==(const TokenHeader&) const = default;
};

/// Throws DataError when the stream was produced for a different model shape.
inline void check_header(const TokenHeader& h, const ModelConfig& cfg) {
    const TokenHeader want = TokenHeader::from_config(cfg);
    if (!(h == want))
        throw DataError("token stream header " + h.to_json().dump() + " does not match checkpoint " + want.to_json().dump());
}

namespace detail {

inline nlohmann::json record_json(const TokenSequence& s) {
    nlohmann::json j{{"id", s.id}, {"vq", s.vq}};
    if (!s.vq2.empty()) j["vq2"] = s.vq2;
    if (!s.geo.empty() || !s.opacity.empty() || !s.feat.empty()) {
        j["geo"] = s.geo;
        j["feat"] = s.feat;
        j["opacity"] = s.opacity;
    }
    return j;
}

inline std::vector<int> int_list(const nlohmann::json& j, const char* key, size_t line) {
    if (!j.contains(key)) return {};
    const auto& a = j.at(key);
    if (!a.is_array()) throw DataError("token stream line " + std::to_string(line) + ": '" + key + "' is not a list");
    std::vector<int> out;
    out.reserve(a.size());
    for (size_t i = 0; i < a.size(); ++i) {
        if (!a[i].is_number_integer())
            throw DataError("token stream line " + std::to_string(line) + ": '" + key + "' position " + std::to_string(i) +
                            " is not an integer");
        const auto v = a[i].get<int64_t>();
        if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max())
            throw DataError("token stream line " + std::to_string(line) + ": '" + key + "' position " + std::to_string(i) +
                            " overflows");
        out.push_back(static_cast<int>(v));
    }
    return out;
}

} // namespace detail

inline void write_tokens_jsonl(const std::filesystem::path& path, const TokenHeader& h,
                               const std::vector<TokenSequence>& seqs) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot write '" + path.string() + "'");
    out << h.to_json().dump() << "\n";
    for (const auto& s : seqs) out << detail::record_json(s).dump() << "\n";
}

inline void write_tokens_binary(const std::filesystem::path& path, const TokenHeader& h,
                                const std::vector<TokenSequence>& seqs) {
    Archive a(kTokenMagic);
    a.text() = h.to_json().dump();
    std::string ids;
    for (const auto& s : seqs) {
        if (s.id.find('\n') != std::string::npos) throw ContractError("write_tokens_binary: id contains a newline");
        ids += s.id + "\n";
    }
    a.put_bytes("ids", ids);
    auto field = [&](const char* name, auto member) {
        std::vector<int64_t> flat;
        size_t per = seqs.empty() ? 0 : (seqs[0].*member).size();
        for (const auto& s : seqs) {
            require((s.*member).size() == per, "write_tokens_binary: ragged field");
            flat.insert(flat.end(), (s.*member).begin(), (s.*member).end());
        }
        a.put_i64(name, flat, {static_cast<int64_t>(seqs.size()), static_cast<int64_t>(per)});
    };
    field("vq", &TokenSequence::vq);
    field("geo", &TokenSequence::geo);
    field("feat", &TokenSequence::feat);
    field("opacity", &TokenSequence::opacity);
    field("vq2", &TokenSequence::vq2);
    a.save(path);
}

struct TokenFile {
    TokenHeader header;
    std::vector<TokenSequence> records;
};

inline TokenFile read_tokens_binary(const std::filesystem::path& path) {
    const Archive a = Archive::load(path, kTokenMagic);
    TokenFile f;
    try {
        f.header = TokenHeader::from_json(nlohmann::json::parse(a.text()));
    } catch (const nlohmann::json::exception& e) {
        throw DataError("token stream '" + path.string() + "': bad header: " + e.what());
    }
    std::vector<std::string> ids;
    {
        std::istringstream in(a.get_bytes("ids"));
        std::string line;
        while (std::getline(in, line)) ids.push_back(line);
    }
    f.records.resize(ids.size());
    for (size_t i = 0; i < ids.size(); ++i) f.records[i].id = ids[i];
    auto field = [&](const char* name, auto member) {
        const auto& e = a.entry(name);
        if (e.shape.size() != 2 || static_cast<size_t>(e.shape[0]) != ids.size())
            throw DataError("token stream '" + path.string() + "': field '" + name + "' shape does not match id count");
        const auto flat = a.get_i64(name);
        const size_t per = static_cast<size_t>(e.shape[1]);
        for (size_t i = 0; i < ids.size(); ++i)
            for (size_t k = 0; k < per; ++k) {
                const int64_t v = flat[i * per + k];
                if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max())
                    throw DataError("token stream '" + path.string() + "': field '" + name + "' overflows");
                (f.records[i].*member).push_back(static_cast<int>(v));
            }
    };
    field("vq", &TokenSequence::vq);
    field("geo", &TokenSequence::geo);
    field("feat", &TokenSequence::feat);
    field("opacity", &TokenSequence::opacity);
    field("vq2", &TokenSequence::vq2);
    return f;
}

/// Reads either format (binary detected by its magic).
inline TokenFile read_tokens(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open token stream '" + path.string() + "'");
    char magic[8] = {};
    in.read(magic, 8);
    if (in.gcount() == 8 && std::string(magic, 8) == kTokenMagic) return read_tokens_binary(path);
    in.clear();
    in.seekg(0);
    TokenFile f;
    std::string line;
    size_t lineno = 0;
    bool have_header = false;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw DataError("token stream line " + std::to_string(lineno) + ": malformed record: " + e.what());
        }
        if (!have_header) {
            try {
                f.header = TokenHeader::from_json(j);
            } catch (const nlohmann::json::exception& e) {
                throw DataError("token stream line " + std::to_string(lineno) + ": bad header: " + e.what());
            }
            have_header = true;
            continue;
        }
        TokenSequence s;
        s.id = j.value("id", "");
        s.vq = detail::int_list(j, "vq", lineno);
        s.geo = detail::int_list(j, "geo", lineno);
        s.feat = detail::int_list(j, "feat", lineno);
        s.opacity = detail::int_list(j, "opacity", lineno);
        s.vq2 = detail::int_list(j, "vq2", lineno);
        f.records.push_back(std::move(s));
    }
    if (!have_header) throw DataError("token stream '" + path.string() + "' is empty");
    return f;
}

} // namespace vgq::io
