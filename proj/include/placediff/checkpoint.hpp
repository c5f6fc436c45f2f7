#pragma once

// Self-describing checkpoint files: an 8-byte magic, a JSON header listing
// parameter names/shapes/frozen flags plus the config snapshot, schedule,
// optimizer step and RNG state, followed by one little-endian float64 blob
// per parameter (value, then Adam moments) in header order, and a trailing
// FNV-1a hash of everything before it.

#include <json.hpp>

#include <array>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "io.hpp"
#include "params.hpp"

namespace placediff {

inline constexpr char kCheckpointMagic[9] = "PDCK0001";
inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
    int version = kCheckpointVersion;
    nlohmann::json config;   // free-form snapshot of the producing config
    int sched_T = 0;
    double beta_start = 0.0;
    double beta_end = 0.0;
    std::uint64_t step = 0;
    std::array<std::uint64_t, 4> rng_state{};
    ParamStore params;
};

namespace detail {

inline void append_f64(std::string& out, const std::vector<double>& v) {
    static_assert(sizeof(double) == 8);
    const std::size_t at = out.size();
    out.resize(at + v.size() * 8);
    std::memcpy(out.data() + at, v.data(), v.size() * 8);   // little-endian host
}

inline void append_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t read_u64(const std::string& s, std::size_t at) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(s[at + i])) << (8 * i);
    return v;
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
    nlohmann::json h;
    h["version"] = ck.version;
    h["config"] = ck.config;
    h["schedule"] = {{"T", ck.sched_T}, {"beta_start", ck.beta_start}, {"beta_end", ck.beta_end}};
    h["step"] = ck.step;
    char hx[17];
    nlohmann::json rng = nlohmann::json::array();
    for (std::uint64_t s : ck.rng_state) {
        std::snprintf(hx, sizeof hx, "%016llx", static_cast<unsigned long long>(s));
        rng.push_back(std::string(hx));
    }
    h["rng"] = rng;
    nlohmann::json plist = nlohmann::json::array();
    for (const auto& e : ck.params.entries()) {
        plist.push_back({{"name", e.name}, {"shape", e.value.shape}, {"frozen", e.frozen}});
    }
    h["params"] = plist;

    const std::string header = h.dump();
    std::string out(kCheckpointMagic, 8);
    detail::append_u64(out, header.size());
    out += header;
    for (const auto& e : ck.params.entries()) {
        detail::append_f64(out, e.value.data);
        detail::append_f64(out, e.m.data);
        detail::append_f64(out, e.v.data);
    }
    detail::append_u64(out, fnv1a64(out));
    return out;
}

inline void save_checkpoint(const fs::path& path, const Checkpoint& ck) {
    write_file(path, serialize_checkpoint(ck));
}

inline Checkpoint parse_checkpoint(const std::string& bytes, const std::string& origin) {
    auto corrupt = [&](const std::string& why) -> std::runtime_error {
        return std::runtime_error("checkpoint " + origin + ": " + why);
    };
    if (bytes.size() < 24) throw corrupt("truncated (shorter than any valid file)");
    if (bytes.compare(0, 8, kCheckpointMagic, 8) != 0) throw corrupt("bad magic");
    const std::uint64_t stored_hash = detail::read_u64(bytes, bytes.size() - 8);
    if (fnv1a64(bytes.data(), bytes.size() - 8) != stored_hash) {
        throw corrupt("content hash mismatch (truncated or corrupted)");
    }
    const std::uint64_t hlen = detail::read_u64(bytes, 8);
    if (16 + hlen + 8 > bytes.size()) throw corrupt("header length exceeds file");
    nlohmann::json h = nlohmann::json::parse(bytes.substr(16, hlen));

    Checkpoint ck;
    ck.version = h.at("version").get<int>();
    if (ck.version != kCheckpointVersion) {
        throw corrupt("format version " + std::to_string(ck.version) + " unsupported (expected " +
                      std::to_string(kCheckpointVersion) + ")");
    }
    ck.config = h.at("config");
    ck.sched_T = h.at("schedule").at("T").get<int>();
    ck.beta_start = h.at("schedule").at("beta_start").get<double>();
    ck.beta_end = h.at("schedule").at("beta_end").get<double>();
    ck.step = h.at("step").get<std::uint64_t>();
    const auto rng = h.at("rng");
    for (int i = 0; i < 4; ++i) {
        ck.rng_state[i] = std::stoull(rng.at(i).get<std::string>(), nullptr, 16);
    }

    std::size_t at = 16 + hlen;
    for (const auto& p : h.at("params")) {
        Tensor t(p.at("shape").get<std::vector<int>>());
        const std::size_t bytes_needed = t.numel() * 8 * 3;
        if (at + bytes_needed > bytes.size() - 8) throw corrupt("parameter blobs truncated");
        Tensor& stored = ck.params.add(p.at("name").get<std::string>(), t, p.at("frozen").get<bool>());
        auto& entry = ck.params.entry(p.at("name").get<std::string>());
        std::memcpy(stored.data.data(), bytes.data() + at, t.numel() * 8);
        at += t.numel() * 8;
        std::memcpy(entry.m.data.data(), bytes.data() + at, t.numel() * 8);
        at += t.numel() * 8;
        std::memcpy(entry.v.data.data(), bytes.data() + at, t.numel() * 8);
        at += t.numel() * 8;
    }
    if (at != bytes.size() - 8) throw corrupt("trailing bytes after parameter blobs");
    return ck;
}

inline Checkpoint load_checkpoint(const fs::path& path) {
    return parse_checkpoint(read_file(path), path.string());
}

inline std::string file_hash_hex(const fs::path& path) {
    return hex64(fnv1a64(read_file(path)));
}

}  // namespace placediff
