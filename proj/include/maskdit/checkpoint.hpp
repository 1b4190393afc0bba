// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "maskdit/common.hpp"

namespace maskdit {

/// Checkpoint layout:
///   "MDIT" | u32 format version | u64 manifest length | JSON manifest |
///   payload (little-endian f32, buffers in manifest order, each holding the
///   parameter tensors in manifest order) | u64 FNV-1a checksum of the payload
///
/// The manifest carries parameter names/shapes, dtype, the step counter, the
/// config hash and the serialized RNG state. 64-bit values are stored as
/// decimal strings since JSON numbers cannot hold them exactly.
constexpr std::uint32_t kCheckpointVersion = 1;

inline std::uint64_t fnv1a64(const void* data, std::size_t len,
                             std::uint64_t seed = 14695981039346656037ULL) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < len; ++i) {
        h ^= bytes[i];
        h *= 1099511628211ULL;
    }
    return h;
}

struct TensorInfo {
    std::string name;
    long rows = 0;
    long cols = 0;
};

struct CheckpointData {
    std::uint64_t step = 0;
    int phase = 1;
    std::uint64_t config_hash = 0;
    std::string config_json;  // full run configuration, so tools can rebuild the model
    std::array<std::uint64_t, 6> rng_state{};
    std::vector<TensorInfo> tensors;
    // Buffers in payload order. Each spans sum(rows*cols) floats.
    std::vector<float> params;
    std::vector<float> ema;
    std::vector<float> adam_m;
    std::vector<float> adam_v;

    long scalar_count() const {
        long n = 0;
        for (const auto& t : tensors) n += t.rows * t.cols;
        return n;
    }
};

namespace detail {
inline std::uint64_t parse_u64(const std::string& s) {
    return std::strtoull(s.c_str(), nullptr, 10);
}
}  // namespace detail

inline void save_checkpoint(const std::string& path, const CheckpointData& ckpt) {
    const long n = ckpt.scalar_count();
    require(static_cast<long>(ckpt.params.size()) == n && static_cast<long>(ckpt.ema.size()) == n &&
                static_cast<long>(ckpt.adam_m.size()) == n &&
                static_cast<long>(ckpt.adam_v.size()) == n,
            "checkpoint: buffer sizes do not match the manifest");

    nlohmann::json manifest;
    manifest["dtype"] = "f32";
    manifest["step"] = ckpt.step;
    manifest["phase"] = ckpt.phase;
    manifest["config_hash"] = std::to_string(ckpt.config_hash);
    if (!ckpt.config_json.empty()) manifest["config"] = nlohmann::json::parse(ckpt.config_json);
    std::vector<std::string> rng_words;
    for (auto w : ckpt.rng_state) rng_words.push_back(std::to_string(w));
    manifest["rng_state"] = rng_words;
    manifest["buffers"] = {"params", "ema", "adam_m", "adam_v"};
    nlohmann::json tensors = nlohmann::json::array();
    for (const auto& t : ckpt.tensors)
        tensors.push_back({{"name", t.name}, {"rows", t.rows}, {"cols", t.cols}});
    manifest["tensors"] = std::move(tensors);
    const std::string manifest_str = manifest.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot open for writing: " + path);
    out.write("MDIT", 4);
    const std::uint32_t version = kCheckpointVersion;
    out.write(reinterpret_cast<const char*>(&version), sizeof(version));
    const std::uint64_t manifest_len = manifest_str.size();
    out.write(reinterpret_cast<const char*>(&manifest_len), sizeof(manifest_len));
    out.write(manifest_str.data(), static_cast<std::streamsize>(manifest_str.size()));

    std::uint64_t checksum = 14695981039346656037ULL;
    for (const auto* buf : {&ckpt.params, &ckpt.ema, &ckpt.adam_m, &ckpt.adam_v}) {
        const auto bytes = buf->size() * sizeof(float);
        out.write(reinterpret_cast<const char*>(buf->data()), static_cast<std::streamsize>(bytes));
        checksum = fnv1a64(buf->data(), bytes, checksum);
    }
    out.write(reinterpret_cast<const char*>(&checksum), sizeof(checksum));
    if (!out) throw CheckpointError("write failed: " + path);
}

inline CheckpointData load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open: " + path);

    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, "MDIT", 4) != 0)
        throw CheckpointError("bad magic bytes (not a checkpoint): " + path);
    std::uint32_t version = 0;
    if (!in.read(reinterpret_cast<char*>(&version), sizeof(version)))
        throw CheckpointError("truncated header: " + path);
    if (version != kCheckpointVersion)
        throw CheckpointError("unsupported format version " + std::to_string(version));
    std::uint64_t manifest_len = 0;
    if (!in.read(reinterpret_cast<char*>(&manifest_len), sizeof(manifest_len)))
        throw CheckpointError("truncated header: " + path);
    std::string manifest_str(manifest_len, '\0');
    if (!in.read(manifest_str.data(), static_cast<std::streamsize>(manifest_len)))
        throw CheckpointError("truncated manifest: " + path);

    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(manifest_str);
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("manifest parse error: ") + e.what());
    }
    if (manifest.value("dtype", "") != "f32")
        throw CheckpointError("unsupported dtype: " + manifest.value("dtype", "?"));

    CheckpointData ckpt;
    ckpt.step = manifest.at("step").get<std::uint64_t>();
    ckpt.phase = manifest.at("phase").get<int>();
    ckpt.config_hash = detail::parse_u64(manifest.at("config_hash").get<std::string>());
    if (manifest.contains("config")) ckpt.config_json = manifest.at("config").dump();
    const auto rng_words = manifest.at("rng_state").get<std::vector<std::string>>();
    require(rng_words.size() == ckpt.rng_state.size(), "checkpoint: bad rng state length");
    for (std::size_t i = 0; i < rng_words.size(); ++i)
        ckpt.rng_state[i] = detail::parse_u64(rng_words[i]);
    for (const auto& t : manifest.at("tensors"))
        ckpt.tensors.push_back(
            {t.at("name").get<std::string>(), t.at("rows").get<long>(), t.at("cols").get<long>()});

    const auto n = static_cast<std::size_t>(ckpt.scalar_count());
    std::uint64_t checksum = 14695981039346656037ULL;
    for (auto* buf : {&ckpt.params, &ckpt.ema, &ckpt.adam_m, &ckpt.adam_v}) {
        buf->resize(n);
        const auto bytes = n * sizeof(float);
        if (!in.read(reinterpret_cast<char*>(buf->data()), static_cast<std::streamsize>(bytes)))
            throw CheckpointError("truncated payload: " + path);
        checksum = fnv1a64(buf->data(), bytes, checksum);
    }
    std::uint64_t stored = 0;
    if (!in.read(reinterpret_cast<char*>(&stored), sizeof(stored)))
        throw CheckpointError("truncated checksum: " + path);
    if (stored != checksum) throw CheckpointError("checksum mismatch (corrupted payload): " + path);
    return ckpt;
}

}  // namespace maskdit
