// Copyright Contributors to the VGQ Project
// SPDX-License-Identifier: Apache-2.0
//
#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "vgq/io/archive.hpp"
#include "vgq/io/tokens.hpp"
#include "vgq/model.hpp"

using namespace vgq;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("vgq_test_io_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

io::Archive sample_archive() {
    io::Archive a;
    a.text() = "k = v\n";
    const float f[] = {1.5f, -2.0f, 3.25f, 0.0f, 1e-30f, -7.0f};
    a.put_f32("weights", f, {2, 3});
    const int64_t i[] = {-1, 0, 1LL << 40};
    a.put_i64("counters", i);
    a.put_bytes("blob", std::string("a\0b\nc", 5));
    return a;
}

ModelConfig token_config() {
    ModelConfig m;
    m.resolution = 16;
    m.downsample = 4;
    m.channels = 2;
    m.base_width = 2;
    m.res_blocks = 0;
    m.head_width = 2;
    m.gaussians_per_token = 2;
    m.feature_layout = FeatureLayout::per_gaussian;
    m.k_vq = m.k_geo = m.k_feat = 8;
    m.opacity_levels = 4;
    return m;
}

std::vector<TokenSequence> sample_tokens(const ModelConfig& m, int count) {
    std::vector<TokenSequence> out;
    const int T = m.tokens(), M = m.gaussians_per_token;
    for (int n = 0; n < count; ++n) {
        TokenSequence s;
        s.id = "img" + std::to_string(n);
        for (int t = 0; t < T; ++t) s.vq.push_back((t + n) % m.k_vq);
        for (int t = 0; t < T * M; ++t) {
            s.geo.push_back((3 * t + n) % m.k_geo);
            s.opacity.push_back(t % m.opacity_levels);
            s.feat.push_back((5 * t) % m.k_feat);
        }
        out.push_back(s);
    }
    return out;
}

} // namespace

TEST(Archive, SerializeRoundTrip) {
    const auto a = sample_archive();
    const auto bytes = a.serialize();
    EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 8), "VGQCKPT1");
    const auto b = io::Archive::deserialize(bytes, "VGQCKPT1", "test");
    EXPECT_EQ(b.text(), a.text());
    EXPECT_EQ(b.names(), a.names());
    EXPECT_EQ(b.get_f32("weights", 6), a.get_f32("weights"));
    EXPECT_EQ(b.entry("weights").shape, (std::vector<int64_t>{2, 3}));
    EXPECT_EQ(b.get_i64("counters"), a.get_i64("counters"));
    EXPECT_EQ(b.get_bytes("blob"), std::string("a\0b\nc", 5));
    EXPECT_EQ(b.serialize(), bytes);
}

TEST(Archive, FileRoundTripIsAtomic) {
    const auto dir = scratch("file");
    sample_archive().save(dir / "x.vgqckpt");
    EXPECT_FALSE(fs::exists(dir / "x.vgqckpt.tmp"));
    EXPECT_EQ(io::Archive::load(dir / "x.vgqckpt").get_bytes("blob").size(), 5u);
    EXPECT_THROW(io::Archive::load(dir / "missing.vgqckpt"), DataError);
    fs::remove_all(dir);
}

TEST(Archive, CorruptInputsAreDataErrors) {
    const auto bytes = sample_archive().serialize();
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    EXPECT_THROW(io::Archive::deserialize(bad_magic, "VGQCKPT1", "t"), DataError);
    EXPECT_THROW(io::Archive::deserialize(bytes, "VGQTOKB1", "t"), DataError);
    auto version = bytes;
    version[8] = 9;
    EXPECT_THROW(io::Archive::deserialize(version, "VGQCKPT1", "t"), DataError);
    for (size_t cut : {size_t(4), size_t(12), bytes.size() / 2, bytes.size() - 1}) {
        const std::vector<unsigned char> part(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
        EXPECT_THROW(io::Archive::deserialize(part, "VGQCKPT1", "t"), DataError) << cut;
    }
    auto trailing = bytes;
    trailing.push_back(0);
    EXPECT_THROW(io::Archive::deserialize(trailing, "VGQCKPT1", "t"), DataError);
}

TEST(Archive, LookupErrors) {
    const auto a = sample_archive();
    EXPECT_THROW(a.get_f32("nope"), DataError);
    EXPECT_THROW(a.get_i64("weights"), DataError);
    EXPECT_THROW(a.get_f32("weights", 5), DataError);
    io::Archive b;
    const float v[] = {1.0f};
    b.put_f32("x", v);
    EXPECT_THROW(b.put_f32("x", v), ContractError);
    EXPECT_THROW(b.put_f32("y", v, {2}), ContractError);
    EXPECT_THROW(io::Archive("short"), ContractError);
}

TEST(Tokens, JsonlAndBinaryRoundTrip) {
    const auto dir = scratch("tokens");
    const auto m = token_config();
    const auto h = io::TokenHeader::from_config(m);
    const auto seqs = sample_tokens(m, 3);
    io::write_tokens_jsonl(dir / "t.jsonl", h, seqs);
    io::write_tokens_binary(dir / "t.vgqtok", h, seqs);
    for (const auto& p : {dir / "t.jsonl", dir / "t.vgqtok"}) {
        const auto f = io::read_tokens(p);
        EXPECT_EQ(f.header, h);
        ASSERT_EQ(f.records.size(), 3u);
        for (size_t i = 0; i < 3; ++i) {
            EXPECT_EQ(f.records[i].id, seqs[i].id);
            EXPECT_EQ(f.records[i].vq, seqs[i].vq);
            EXPECT_EQ(f.records[i].geo, seqs[i].geo);
            EXPECT_EQ(f.records[i].opacity, seqs[i].opacity);
            EXPECT_EQ(f.records[i].feat, seqs[i].feat);
        }
    }
    std::ifstream in(dir / "t.jsonl");
    std::string first;
    std::getline(in, first);
    const auto j = nlohmann::json::parse(first);
    EXPECT_EQ(j["type"], "header");
    EXPECT_EQ(j["codebook_sizes"]["opacity"], 4);
    fs::remove_all(dir);
}

TEST(Tokens, HeaderMismatchAndMalformedStreams) {
    const auto dir = scratch("bad_tokens");
    const auto m = token_config();
    auto other = m;
    other.k_geo = 16;
    EXPECT_THROW(io::check_header(io::TokenHeader::from_config(other), m), DataError);
    EXPECT_NO_THROW(io::check_header(io::TokenHeader::from_config(m), m));

    const auto h = io::TokenHeader::from_config(m).to_json().dump();
    auto write = [&](const std::string& body) {
        std::ofstream(dir / "b.jsonl", std::ios::trunc) << body;
        return dir / "b.jsonl";
    };
    EXPECT_THROW(io::read_tokens(write("")), DataError);
    EXPECT_THROW(io::read_tokens(write("{\"type\":\"record\"}\n")), DataError);
    EXPECT_THROW(io::read_tokens(write(h + "\n{not json\n")), DataError);
    EXPECT_THROW(io::read_tokens(write(h + "\n{\"id\":\"a\",\"vq\":[1,\"x\"]}\n")), DataError);
    EXPECT_THROW(io::read_tokens(write(h + "\n{\"id\":\"a\",\"vq\":[99999999999]}\n")), DataError);
    EXPECT_THROW(io::read_tokens(dir / "absent.jsonl"), DataError);
    fs::remove_all(dir);
}

TEST(Tokens, ValidationNamesRecordFieldAndPosition) {
    const auto m = token_config();
    VgqModel<float> model(m);
    auto seqs = sample_tokens(m, 2);
    EXPECT_NO_THROW(model.validate_tokens(seqs));
    seqs[1].geo[5] = m.k_geo;
    try {
        model.validate_tokens(seqs);
        FAIL() << "expected DataError";
    } catch (const DataError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("token record 1"), std::string::npos) << msg;
        EXPECT_NE(msg.find("'geo' position 5"), std::string::npos) << msg;
    }
    seqs = sample_tokens(m, 1);
    seqs[0].vq.pop_back();
    EXPECT_THROW(model.validate_tokens(seqs), DataError);
    seqs = sample_tokens(m, 1);
    seqs[0].opacity[0] = -1;
    EXPECT_THROW(model.validate_tokens(seqs), DataError);
}

TEST(Tokens, TokenizeDetokenizeThroughFileIsBitwise) {
    const auto dir = scratch("roundtrip");
    const auto m = token_config();
    Rng rng(5);
    VgqModel<float> model(m);
    model.init(rng);
    Tensor<float> x(2, 3, 16, 16);
    for (auto& v : x.values()) v = std::uniform_real_distribution<float>(0, 1)(rng);
    model.init_codebooks(x, rng);
    const auto f = model.forward(x);
    io::write_tokens_binary(dir / "t.vgqtok", io::TokenHeader::from_config(m), model.split_tokens(f, 2));
    const auto back = io::read_tokens(dir / "t.vgqtok");
    EXPECT_EQ(model.detokenize(back.records).storage(), f.recon.storage());
    fs::remove_all(dir);
}
