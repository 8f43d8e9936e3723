// Model checkpoint file: fixed binary preamble, a JSON header describing the
// architecture, normalization stats and parameter manifest, then the raw
// little-endian parameter blobs in declaration order. Round-trips are
// bit-exact.
#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vaeloc/common.hpp"
#include "vaeloc/model.hpp"
#include "vaeloc/tensor.hpp"

namespace vaeloc {

inline constexpr char kCheckpointMagic[8] = {'V', 'A', 'E', 'L', 'O', 'C', 'K', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
struct Checkpoint {
    Vae<T> model;
    NormStats stats;
    std::string fingerprint;  // model fingerprint recorded at save time
};

namespace detail {

inline nlohmann::json model_config_json(const ModelConfig& cfg) {
    return {{"image_size", cfg.image_size},
            {"latent_dim", cfg.latent_dim},
            {"encoder_channels", cfg.encoder_channels},
            {"leaky_slope", cfg.leaky_slope},
            {"sigma_log_min", cfg.sigma_log_min},
            {"sigma_log_max", cfg.sigma_log_max},
            {"grad_through_noise", cfg.grad_through_noise}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    cfg.image_size = j.at("image_size").get<int>();
    cfg.latent_dim = j.at("latent_dim").get<int>();
    cfg.encoder_channels = j.at("encoder_channels").get<std::vector<int>>();
    cfg.leaky_slope = j.at("leaky_slope").get<double>();
    cfg.sigma_log_min = j.at("sigma_log_min").get<double>();
    cfg.sigma_log_max = j.at("sigma_log_max").get<double>();
    cfg.grad_through_noise = j.at("grad_through_noise").get<bool>();
    return cfg;
}

}  // namespace detail

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Vae<T>& model,
                     const NormStats& stats) {
    nlohmann::json header;
    header["model"] = detail::model_config_json(model.config());
    header["normalization_stats"] = {{"mean", stats.mean}, {"std", stats.std}};
    header["fingerprint"] = model.fingerprint();
    nlohmann::json manifest = nlohmann::json::array();
    for (const auto& p : model.params())
        manifest.push_back({{"name", p.name}, {"size", p.size}});
    header["params"] = manifest;
    const std::string hs = header.dump();

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open checkpoint for writing: " + path.string());
    f.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    const std::uint32_t version = kCheckpointVersion;
    const std::uint32_t scalar_size = sizeof(T);
    const std::uint64_t header_len = hs.size();
    f.write(reinterpret_cast<const char*>(&version), sizeof(version));
    f.write(reinterpret_cast<const char*>(&scalar_size), sizeof(scalar_size));
    f.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
    f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const auto& p : model.params())
        f.write(reinterpret_cast<const char*>(p.data),
                static_cast<std::streamsize>(p.size * sizeof(T)));
    if (!f) throw IoError("short write while saving checkpoint: " + path.string());
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint: " + path.string());

    char magic[sizeof(kCheckpointMagic)];
    std::uint32_t version = 0, scalar_size = 0;
    std::uint64_t header_len = 0;
    f.read(magic, sizeof(magic));
    f.read(reinterpret_cast<char*>(&version), sizeof(version));
    f.read(reinterpret_cast<char*>(&scalar_size), sizeof(scalar_size));
    f.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
    if (!f) throw FormatError("checkpoint truncated before header: " + path.string());
    if (std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
        throw FormatError("not a checkpoint file (bad magic): " + path.string());
    if (version != kCheckpointVersion)
        throw FormatError("unsupported checkpoint version " + std::to_string(version) +
                          " (expected " + std::to_string(kCheckpointVersion) + ")");
    if (scalar_size != sizeof(T))
        throw FormatError("checkpoint stores " + std::to_string(scalar_size) +
                          "-byte scalars but " + std::to_string(sizeof(T)) +
                          "-byte scalars were requested");
    std::error_code ec;
    const auto file_size = std::filesystem::file_size(path, ec);
    if (!ec && header_len > file_size)
        throw FormatError("checkpoint header length exceeds file size: " + path.string());

    std::string hs(header_len, '\0');
    f.read(hs.data(), static_cast<std::streamsize>(header_len));
    if (!f) throw FormatError("checkpoint truncated inside header: " + path.string());

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(hs);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("checkpoint header is not valid JSON: " + std::string(e.what()));
    }

    Checkpoint<T> out;
    try {
        if (!header.contains("normalization_stats"))
            throw FormatError("checkpoint missing field normalization_stats");
        const auto& ns = header.at("normalization_stats");
        out.stats.mean = ns.at("mean").get<double>();
        out.stats.std = ns.at("std").get<double>();
        const ModelConfig cfg = detail::model_config_from_json(header.at("model"));
        out.model = Vae<T>(cfg, 0);
        out.fingerprint = header.value("fingerprint", "");

        const auto& manifest = header.at("params");
        auto params = out.model.params();
        if (manifest.size() != params.size())
            throw FormatError("checkpoint parameter manifest has " +
                              std::to_string(manifest.size()) + " entries, model expects " +
                              std::to_string(params.size()));
        for (std::size_t i = 0; i < params.size(); ++i) {
            const std::string name = manifest[i].at("name").get<std::string>();
            const std::size_t size = manifest[i].at("size").get<std::size_t>();
            if (name != params[i].name || size != params[i].size)
                throw FormatError("checkpoint parameter " + name + " (" + std::to_string(size) +
                                  ") does not match model slot " + params[i].name + " (" +
                                  std::to_string(params[i].size) + ")");
            f.read(reinterpret_cast<char*>(params[i].data),
                   static_cast<std::streamsize>(size * sizeof(T)));
            if (!f) throw FormatError("checkpoint truncated in parameter " + name);
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("checkpoint header malformed: " + std::string(e.what()));
    }

    if (out.fingerprint.size() && out.model.fingerprint() != out.fingerprint)
        throw FormatError("checkpoint fingerprint mismatch (file " + out.fingerprint +
                          ", loaded " + out.model.fingerprint() + ")");
    return out;
}

}  // namespace vaeloc
