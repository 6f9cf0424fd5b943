// Checkpoint serialization.
//
// Layout: magic line, one-line JSON header (format version, architecture,
// vocabulary, RNG algorithm tag, payload CRC-32, tensor manifest), then all
// parameter tensors as little-endian float64 in declaration order. Loads
// verify the CRC before accepting any value, and architecture mismatches are
// reported as shape errors rather than silently reinterpreted.

#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "opdlab/optim.hpp"
#include "opdlab/policy.hpp"
#include "opdlab/rng.hpp"
#include "opdlab/vocab.hpp"

namespace opdlab {

inline constexpr std::string_view kCheckpointMagic = "OPDLAB_CKPT v1";
inline constexpr int kCheckpointFormatVersion = 1;

namespace detail {

inline const std::array<uint32_t, 256>& crc32_table() {
    static const std::array<uint32_t, 256> table = [] {
        std::array<uint32_t, 256> t{};
        for (uint32_t i = 0; i < 256; ++i) {
            uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1u) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    return table;
}

}  // namespace detail

inline uint32_t crc32_bytes(const void* data, size_t n, uint32_t seed = 0) {
    const auto& table = detail::crc32_table();
    uint32_t c = seed ^ 0xFFFFFFFFu;
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) c = table[(c ^ p[i]) & 0xFFu] ^ (c >> 8);
    return c ^ 0xFFFFFFFFu;
}

inline nlohmann::ordered_json model_config_json(const ModelConfig& c) {
    return {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},   {"n_layers", c.n_layers},
            {"d_ff", c.d_ff},             {"max_ctx", c.max_ctx},   {"init_std", c.init_std},
            {"rms_eps", c.rms_eps}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.vocab_size = j.at("vocab_size").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.n_layers = j.at("n_layers").get<int>();
    c.d_ff = j.at("d_ff").get<int>();
    c.max_ctx = j.at("max_ctx").get<int>();
    c.init_std = j.at("init_std").get<double>();
    c.rms_eps = j.at("rms_eps").get<double>();
    return c;
}

struct Checkpoint {
    ModelConfig config;
    Vocabulary vocab;
    ParamSet params;
    std::string run_id;  // producing run, empty for checkpoints written outside the CLI
};

namespace detail {

// Payload bytes: every tensor's doubles in declaration order, little-endian.
// The build targets little-endian hosts, asserted rather than byte-swapped.
static_assert(std::endian::native == std::endian::little, "checkpoint payload assumes a little-endian host");

inline std::vector<char> checkpoint_payload(const ParamSet& params) {
    std::vector<char> bytes;
    bytes.reserve(params.total_scalars() * sizeof(double));
    for (const auto& e : params.entries()) {
        const char* p = reinterpret_cast<const char*>(e.value.data());
        bytes.insert(bytes.end(), p, p + e.value.size() * sizeof(double));
    }
    return bytes;
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    const std::vector<char> payload = detail::checkpoint_payload(ckpt.params);

    nlohmann::ordered_json header;
    header["format_version"] = kCheckpointFormatVersion;
    if (!ckpt.run_id.empty()) header["run_id"] = ckpt.run_id;
    header["architecture"] = model_config_json(ckpt.config);
    header["vocabulary"] = ckpt.vocab.tokens;
    header["rng_algorithm"] = std::string(kRngAlgoTag);
    nlohmann::ordered_json tensors = nlohmann::ordered_json::array();
    for (const auto& e : ckpt.params.entries()) {
        tensors.push_back({{"name", e.name}, {"shape", e.shape}});
    }
    header["tensors"] = std::move(tensors);
    header["payload_crc32"] = crc32_bytes(payload.data(), payload.size());

    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path);
        out << kCheckpointMagic << "\n" << header.dump() << "\n";
        out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
        if (!out) throw std::runtime_error("checkpoint write failed: " + path);
    }
    std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("missing checkpoint file: " + path);

    std::string magic, header_line;
    if (!std::getline(in, magic) || magic != kCheckpointMagic) {
        throw std::runtime_error("not a checkpoint file (bad magic): " + path);
    }
    if (!std::getline(in, header_line)) throw std::runtime_error("truncated checkpoint header: " + path);
    nlohmann::json header = nlohmann::json::parse(header_line);

    if (header.at("format_version").get<int>() != kCheckpointFormatVersion) {
        throw std::runtime_error("unsupported checkpoint format version in " + path);
    }
    if (header.at("rng_algorithm").get<std::string>() != kRngAlgoTag) {
        throw std::runtime_error("checkpoint was produced with a different RNG algorithm: " + path);
    }

    Checkpoint ckpt;
    ckpt.run_id = header.value("run_id", "");
    ckpt.config = model_config_from_json(header.at("architecture"));
    ckpt.vocab.tokens = header.at("vocabulary").get<std::vector<std::string>>();
    if (ckpt.vocab.size() != ckpt.config.vocab_size) {
        throw std::runtime_error("checkpoint vocabulary size disagrees with architecture: " + path);
    }

    for (const auto& t : header.at("tensors")) {
        ckpt.params.declare(t.at("name").get<std::string>(), t.at("shape").get<Shape>());
    }

    std::vector<char> payload(ckpt.params.total_scalars() * sizeof(double));
    in.read(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (static_cast<size_t>(in.gcount()) != payload.size()) {
        throw std::runtime_error("truncated checkpoint payload: " + path);
    }
    char extra;
    if (in.read(&extra, 1)) throw std::runtime_error("trailing bytes after checkpoint payload: " + path);

    const uint32_t expect = header.at("payload_crc32").get<uint32_t>();
    const uint32_t got = crc32_bytes(payload.data(), payload.size());
    if (got != expect) throw std::runtime_error("checkpoint payload CRC mismatch (corrupted file): " + path);

    size_t off = 0;
    for (auto& e : ckpt.params.entries()) {
        std::memcpy(e.value.data(), payload.data() + off, e.value.size() * sizeof(double));
        off += e.value.size() * sizeof(double);
    }
    return ckpt;
}

// Loads and additionally enforces an expected architecture; the error names
// the first differing dimension so config mistakes are diagnosable.
inline Checkpoint load_checkpoint(const std::string& path, const ModelConfig& expected) {
    Checkpoint ckpt = load_checkpoint(path);
    if (!(ckpt.config == expected)) {
        throw std::runtime_error("checkpoint architecture mismatch for " + path + ": stored " +
                                 model_config_json(ckpt.config).dump() + " vs expected " +
                                 model_config_json(expected).dump());
    }
    const ParamSet want = policy_param_shapes(expected);
    if (want.size() != ckpt.params.size()) {
        throw std::runtime_error("checkpoint tensor count mismatch for " + path);
    }
    for (size_t i = 0; i < want.size(); ++i) {
        const auto& w = want.entries()[i];
        const auto& h = ckpt.params.entries()[i];
        if (w.name != h.name || w.shape != h.shape) {
            throw std::runtime_error("checkpoint tensor shape mismatch at " + h.name + " in " + path);
        }
    }
    return ckpt;
}

inline uint64_t file_hash(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot hash missing file: " + path);
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return fnv1a64_bytes(bytes.data(), bytes.size());
}

}  // namespace opdlab
