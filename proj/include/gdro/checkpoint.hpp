#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "gdro/config_json.hpp"
#include "gdro/model.hpp"

namespace gdro {

// Checkpoint layout: 4-byte magic, little-endian u64 header length, JSON
// header (version, seed, model config, tensor directory), then the raw
// float64 payload in directory order.

inline constexpr std::array<char, 4> kCheckpointMagic{'G', 'D', 'C', 'K'};
inline constexpr int kCheckpointVersion = 1;

namespace detail {

inline void write_u64_le(std::ostream& out, std::uint64_t v) {
    std::array<unsigned char, 8> bytes{};
    for (int i = 0; i < 8; ++i) bytes[static_cast<std::size_t>(i)] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
    out.write(reinterpret_cast<const char*>(bytes.data()), 8);
}

inline std::uint64_t read_u64_le(std::istream& in) {
    std::array<unsigned char, 8> bytes{};
    in.read(reinterpret_cast<char*>(bytes.data()), 8);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | bytes[static_cast<std::size_t>(i)];
    return v;
}

}  // namespace detail

inline void save_checkpoint(const ModelParams& model, const std::filesystem::path& path) {
    nlohmann::json tensors = nlohmann::json::array();
    std::int64_t offset = 0;
    for (const auto& p : model.params.all()) {
        tensors.push_back({{"name", p.name}, {"shape", p.value.shape()}, {"offset", offset}, {"count", p.value.numel()}});
        offset += p.value.numel();
    }
    const nlohmann::json header{{"version", kCheckpointVersion},
                                {"seed", model.seed},
                                {"config", model.config},
                                {"tensors", std::move(tensors)}};
    const std::string header_text = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path.string());
    out.write(kCheckpointMagic.data(), kCheckpointMagic.size());
    detail::write_u64_le(out, header_text.size());
    out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
    for (const auto& p : model.params.all()) {
        out.write(reinterpret_cast<const char*>(p.value.data()),
                  static_cast<std::streamsize>(p.value.numel() * static_cast<std::int64_t>(sizeof(double))));
    }
    if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path.string());
}

inline ModelParams load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path.string());

    std::array<char, 4> magic{};
    in.read(magic.data(), magic.size());
    if (!in || magic != kCheckpointMagic) {
        throw std::runtime_error("load_checkpoint: " + path.string() + " is not a checkpoint file");
    }
    const std::uint64_t header_len = detail::read_u64_le(in);
    std::string header_text(header_len, '\0');
    in.read(header_text.data(), static_cast<std::streamsize>(header_len));
    if (!in) throw std::runtime_error("load_checkpoint: truncated header in " + path.string());

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(header_text);
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("load_checkpoint: bad header in " + path.string() + ": " + e.what());
    }
    const int version = header.value("version", -1);
    if (version != kCheckpointVersion) {
        throw std::runtime_error("load_checkpoint: unsupported version " + std::to_string(version));
    }

    ModelConfig config;
    from_json(header.at("config"), config);
    ModelParams model = init_params(config, header.at("seed").get<std::uint64_t>());

    std::size_t listed = 0;
    for (const auto& entry : header.at("tensors")) {
        const std::string name = entry.at("name").get<std::string>();
        const Shape shape = entry.at("shape").get<Shape>();
        Parameter& p = model.params.at(name);  // throws on unknown name
        if (p.value.shape() != shape) {
            throw std::runtime_error("load_checkpoint: tensor " + name + " has shape " + shape_str(shape) +
                                     ", expected " + shape_str(p.value.shape()));
        }
        in.read(reinterpret_cast<char*>(p.value.data()),
                static_cast<std::streamsize>(p.value.numel() * static_cast<std::int64_t>(sizeof(double))));
        if (!in) throw std::runtime_error("load_checkpoint: truncated payload at tensor " + name);
        ++listed;
    }
    if (listed != model.params.size()) {
        throw std::runtime_error("load_checkpoint: header lists " + std::to_string(listed) + " tensors, model has " +
                                 std::to_string(model.params.size()));
    }
    return model;
}

}  // namespace gdro
