// Copyright Contributors to the VGQ Project
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "vgq/errors.hpp"

namespace vgq::io {

static_assert(std::endian::native == std::endian::little, "archives assume a little-endian host");

enum class DType : uint8_t { f32 = 0, i64 = 1, bytes = 2 };

inline const char* dtype_name(DType t) {
    switch (t) {
    case DType::f32: return "f32";
    case DType::i64: return "i64";
    case DType::bytes: return "bytes";
    }
    return "?";
}

inline size_t dtype_size(DType t) { return t == DType::f32 ? 4 : (t == DType::i64 ? 8 : 1); }

struct ArrayEntry {
    DType dtype = DType::f32;
    std::vector<int64_t> shape;
    std::vector<unsigned char> payload;

    size_t elements() const {
        size_t n = 1;
        for (auto d : shape) n *= static_cast<size_t>(d);
        return n;
    }
};

/// Named arrays behind an 8-byte magic, a format version, a text blob and a
/// length-prefixed manifest (name, dtype, shape); payloads follow in manifest
/// order, little-endian.
class Archive {
public:
    static constexpr uint32_t kVersion = 1;

    explicit Archive(std::string magic = "VGQCKPT1") : magic_(std::move(magic)) {
        require(magic_.size() == 8, "Archive: magic must be 8 bytes");
    }

    const std::string& magic() const { return magic_; }
    std::string& text() { return text_; }
    const std::string& text() const { return text_; }

    void put_f32(const std::string& name, std::span<const float> v, std::vector<int64_t> shape = {}) {
        put(name, DType::f32, v.data(), v.size(), std::move(shape));
    }
    void put_i64(const std::string& name, std::span<const int64_t> v, std::vector<int64_t> shape = {}) {
        put(name, DType::i64, v.data(), v.size(), std::move(shape));
    }
    void put_bytes(const std::string& name, const std::string& s) {
        put(name, DType::bytes, s.data(), s.size(), {});
    }

    bool has(const std::string& name) const { return entries_.count(name) != 0; }
    const std::vector<std::string>& names() const { return order_; }
    const ArrayEntry& entry(const std::string& name) const {
        const auto it = entries_.find(name);
        if (it == entries_.end()) throw DataError("archive: missing array '" + name + "'");
        return it->second;
    }

    std::vector<float> get_f32(const std::string& name, size_t expect = 0) const { return get<float>(name, DType::f32, expect); }
    std::vector<int64_t> get_i64(const std::string& name, size_t expect = 0) const {
        return get<int64_t>(name, DType::i64, expect);
    }
    std::string get_bytes(const std::string& name) const {
        const auto& e = checked(name, DType::bytes, 0);
        return {e.payload.begin(), e.payload.end()};
    }

    std::vector<unsigned char> serialize() const {
        std::vector<unsigned char> out(magic_.begin(), magic_.end());
        auto u32 = [&](uint32_t v) { append(out, &v, 4); };
        auto u64 = [&](uint64_t v) { append(out, &v, 8); };
        u32(kVersion);
        u64(text_.size());
        append(out, text_.data(), text_.size());
        u64(order_.size());
        for (const auto& name : order_) {
            const auto& e = entries_.at(name);
            u32(static_cast<uint32_t>(name.size()));
            append(out, name.data(), name.size());
            out.push_back(static_cast<unsigned char>(e.dtype));
            u32(static_cast<uint32_t>(e.shape.size()));
            for (auto d : e.shape) u64(static_cast<uint64_t>(d));
        }
        for (const auto& name : order_) {
            const auto& e = entries_.at(name);
            append(out, e.payload.data(), e.payload.size());
        }
        return out;
    }

    static Archive deserialize(std::span<const unsigned char> in, const std::string& magic, const std::string& what) {
        size_t pos = 0;
        auto need = [&](size_t n) {
            if (pos + n > in.size()) throw DataError(what + ": truncated at byte " + std::to_string(pos));
        };
        auto take = [&](void* dst, size_t n) {
            need(n);
            std::memcpy(dst, in.data() + pos, n);
            pos += n;
        };
        auto u32 = [&] { uint32_t v; take(&v, 4); return v; };
        auto u64 = [&] { uint64_t v; take(&v, 8); return v; };
        need(8);
        const std::string got(reinterpret_cast<const char*>(in.data()), 8);
        if (got != magic) throw DataError(what + ": bad magic (expected " + magic + ")");
        pos = 8;
        Archive a(magic);
        const uint32_t version = u32();
        if (version != kVersion)
            throw DataError(what + ": unsupported format version " + std::to_string(version) + " (expected " +
                            std::to_string(kVersion) + ")");
        const uint64_t tlen = u64();
        need(tlen);
        a.text_.assign(reinterpret_cast<const char*>(in.data() + pos), tlen);
        pos += tlen;
        const uint64_t count = u64();
        std::vector<std::pair<std::string, ArrayEntry>> manifest;
        for (uint64_t i = 0; i < count; ++i) {
            const uint32_t nlen = u32();
            need(nlen);
            std::string name(reinterpret_cast<const char*>(in.data() + pos), nlen);
            pos += nlen;
            ArrayEntry e;
            need(1);
            const uint8_t dt = in[pos++];
            if (dt > 2) throw DataError(what + ": unknown dtype for '" + name + "'");
            e.dtype = static_cast<DType>(dt);
            const uint32_t rank = u32();
            for (uint32_t r = 0; r < rank; ++r) e.shape.push_back(static_cast<int64_t>(u64()));
            manifest.emplace_back(std::move(name), std::move(e));
        }
        for (auto& [name, e] : manifest) {
            const size_t bytes = e.elements() * dtype_size(e.dtype);
            need(bytes);
            e.payload.assign(in.begin() + static_cast<std::ptrdiff_t>(pos), in.begin() + static_cast<std::ptrdiff_t>(pos + bytes));
            pos += bytes;
            a.order_.push_back(name);
            a.entries_.emplace(name, std::move(e));
        }
        if (pos != in.size()) throw DataError(what + ": trailing bytes after payload");
        return a;
    }

    void save(const std::filesystem::path& path) const {
        const auto bytes = serialize();
        const auto tmp = path.string() + ".tmp";
        {
            std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
            if (!out) throw DataError("cannot write '" + tmp + "'");
            out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
            if (!out) throw DataError("write failed for '" + tmp + "'");
        }
        std::filesystem::rename(tmp, path);
    }

    static Archive load(const std::filesystem::path& path, const std::string& magic = "VGQCKPT1") {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw DataError("cannot open '" + path.string() + "'");
        std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        return deserialize(bytes, magic, "'" + path.string() + "'");
    }

private:
    static void append(std::vector<unsigned char>& out, const void* p, size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        out.insert(out.end(), b, b + n);
    }

    void put(const std::string& name, DType dt, const void* data, size_t n, std::vector<int64_t> shape) {
        if (entries_.count(name)) throw ContractError("archive: duplicate array '" + name + "'");
        ArrayEntry e;
        e.dtype = dt;
        e.shape = shape.empty() ? std::vector<int64_t>{static_cast<int64_t>(n)} : std::move(shape);
        require(e.elements() == n, "archive: shape does not match element count for '" + name + "'");
        e.payload.resize(n * dtype_size(dt));
        if (n) std::memcpy(e.payload.data(), data, e.payload.size());
        order_.push_back(name);
        entries_.emplace(name, std::move(e));
    }

    const ArrayEntry& checked(const std::string& name, DType dt, size_t expect) const {
        const auto& e = entry(name);
        if (e.dtype != dt)
            throw DataError("archive: array '" + name + "' has dtype " + dtype_name(e.dtype) + ", expected " +
                            dtype_name(dt));
        if (expect && e.elements() != expect)
            throw DataError("archive: array '" + name + "' has " + std::to_string(e.elements()) + " elements, expected " +
                            std::to_string(expect));
        return e;
    }

    template <class V>
    std::vector<V> get(const std::string& name, DType dt, size_t expect) const {
        const auto& e = checked(name, dt, expect);
        std::vector<V> out(e.elements());
        if (!out.empty()) std::memcpy(out.data(), e.payload.data(), e.payload.size());
        return out;
    }

    std::string magic_;
    std::string text_;
    std::vector<std::string> order_;
    std::map<std::string, ArrayEntry> entries_;
};

} // namespace vgq::io
