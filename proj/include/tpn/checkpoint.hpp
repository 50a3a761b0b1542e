#pragma once

// Parameter and frozen-prototype checkpoints.
//
//   offset  size  field
//   0       8     magic "TPNPARAM"
//   8       4     format version, uint32 little endian (currently 1)
//   12      4     reserved, zero
//   16      8     header length H, uint64 little endian
//   24      H     UTF-8 JSON header
//   24+H    ...   payload: float64 little endian, tensors back to back
//
// The header holds the network config, one entry {name, shape, offset} per
// tensor (offset in bytes from the payload start) and, when present, the
// prototype block: the tensors "prototypes.s", "prototypes.t" and
// "prototypes.st" plus their validity flags and the target fallback mask.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "tpn/embedding_net.hpp"
#include "tpn/error.hpp"
#include "tpn/trainer.hpp"

namespace tpn {

inline constexpr std::array<char, 8> kCheckpointMagic = {'T', 'P', 'N', 'P', 'A', 'R', 'A', 'M'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::size_t kCheckpointPreamble = 24;

inline void to_json(nlohmann::json& j, const NetworkConfig& c) {
  j = nlohmann::json{{"arch", to_string(c.arch)}, {"embedding_dim", c.embedding_dim}, {"seed", c.seed}};
  if (c.arch == Architecture::mlp) {
    j["input_dim"] = c.input_dim;
    j["hidden"] = c.hidden;
  } else {
    j["image_channels"] = c.image_channels;
    j["image_height"] = c.image_height;
    j["image_width"] = c.image_width;
    j["conv_filters"] = c.conv_filters;
    j["conv_kernel"] = c.conv_kernel;
    j["fc_width"] = c.fc_width;
  }
}

inline void from_json(const nlohmann::json& j, NetworkConfig& c) {
  c = NetworkConfig{};
  for (const auto& [key, value] : j.items()) {
    if (key == "arch") c.arch = architecture_from_string(value.get<std::string>());
    else if (key == "embedding_dim") c.embedding_dim = value.get<std::size_t>();
    else if (key == "seed") c.seed = value.get<std::uint64_t>();
    else if (key == "input_dim") c.input_dim = value.get<std::size_t>();
    else if (key == "hidden") c.hidden = value.get<std::vector<std::size_t>>();
    else if (key == "image_channels") c.image_channels = value.get<std::size_t>();
    else if (key == "image_height") c.image_height = value.get<std::size_t>();
    else if (key == "image_width") c.image_width = value.get<std::size_t>();
    else if (key == "conv_filters") c.conv_filters = value.get<std::vector<std::size_t>>();
    else if (key == "conv_kernel") c.conv_kernel = value.get<std::size_t>();
    else if (key == "fc_width") c.fc_width = value.get<std::size_t>();
    else throw DomainError("network: unknown key '" + key + "'");
  }
}

struct Checkpoint {
  NetworkConfig network;
  Parameters parameters;
  std::optional<FrozenPrototypes> prototypes;

  EmbeddingNet net() const { return EmbeddingNet(network, parameters); }
};

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint64_t get_le(std::span<const std::uint8_t> bytes, std::size_t offset, int width) {
  std::uint64_t v = 0;
  for (int i = 0; i < width; ++i) v |= std::uint64_t{bytes[offset + static_cast<std::size_t>(i)]} << (8 * i);
  return v;
}

inline nlohmann::json flags_json(const std::vector<bool>& flags) {
  auto j = nlohmann::json::array();
  for (bool f : flags) j.push_back(f);
  return j;
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize_checkpoint(const NetworkConfig& network, const Parameters& params,
                                                      const FrozenPrototypes* prototypes = nullptr) {
  std::vector<std::pair<std::string, const Tensor*>> tensors;
  for (const auto& e : params.entries()) tensors.emplace_back(e.name, &e.value);
  nlohmann::json header{{"format", "tpn-checkpoint"}, {"network", network}};
  if (prototypes) {
    tensors.emplace_back("prototypes.s", &prototypes->source.centroids);
    tensors.emplace_back("prototypes.t", &prototypes->target.centroids);
    tensors.emplace_back("prototypes.st", &prototypes->combined.centroids);
    header["prototypes"] = {{"valid",
                             {{"s", detail::flags_json(prototypes->source.valid)},
                              {"t", detail::flags_json(prototypes->target.valid)},
                              {"st", detail::flags_json(prototypes->combined.valid)}}},
                            {"target_fallback", detail::flags_json(prototypes->target_fallback)}};
  }
  auto list = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    list.push_back({{"name", name}, {"shape", t->shape()}, {"offset", offset}});
    offset += 8 * t->size();
  }
  header["tensors"] = list;
  const std::string text = header.dump();

  std::vector<std::uint8_t> out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, 0);
  detail::put_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  out.reserve(out.size() + offset);
  for (const auto& [name, t] : tensors)
    for (double v : t->data()) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

inline Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kCheckpointPreamble) throw FormatError("checkpoint: truncated preamble", bytes.size());
  if (!std::equal(kCheckpointMagic.begin(), kCheckpointMagic.end(), bytes.begin())) {
    throw FormatError("checkpoint: bad magic (expected TPNPARAM)", 0);
  }
  const auto version = detail::get_le(bytes, 8, 4);
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported version " + std::to_string(version), 8);
  }
  const std::uint64_t header_len = detail::get_le(bytes, 16, 8);
  if (header_len > bytes.size() - kCheckpointPreamble) throw FormatError("checkpoint: truncated header", bytes.size());
  const std::size_t payload = kCheckpointPreamble + header_len;

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + kCheckpointPreamble, bytes.begin() + static_cast<std::ptrdiff_t>(payload));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("checkpoint: header is not valid JSON: ") + e.what(), kCheckpointPreamble + e.byte);
  }

  Checkpoint ck;
  std::vector<std::pair<std::string, Tensor>> tensors;
  try {
    ck.network = header.at("network").get<NetworkConfig>();
    for (const auto& entry : header.at("tensors")) {
      const auto name = entry.at("name").get<std::string>();
      const auto shape = entry.at("shape").get<Shape>();
      const auto offset = entry.at("offset").get<std::uint64_t>();
      const std::size_t count = shape_numel(shape);
      if (offset % 8 || offset > bytes.size() - payload || 8 * count > bytes.size() - payload - offset) {
        throw FormatError("checkpoint: tensor '" + name + "' runs past the end of the file", payload + offset);
      }
      std::vector<double> values(count);
      for (std::size_t i = 0; i < count; ++i)
        values[i] = std::bit_cast<double>(detail::get_le(bytes, payload + offset + 8 * i, 8));
      tensors.emplace_back(name, Tensor(shape, std::move(values)));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: malformed header: ") + e.what(), kCheckpointPreamble);
  }

  auto take = [&](const std::string& name) {
    for (auto& [n, t] : tensors)
      if (n == name) return t;
    throw FormatError("checkpoint: missing tensor '" + name + "'", kCheckpointPreamble);
  };
  for (const auto& [name, t] : tensors)
    if (name.rfind("prototypes.", 0) != 0) ck.parameters.add(name, t);
  try {
    (void)EmbeddingNet(ck.network, ck.parameters);
  } catch (const ShapeError& e) {
    throw FormatError(std::string("checkpoint: ") + e.what(), kCheckpointPreamble);
  }

  if (header.contains("prototypes")) {
    try {
      const auto& block = header.at("prototypes");
      FrozenPrototypes f;
      f.source = {take("prototypes.s"), block.at("valid").at("s").get<std::vector<bool>>(), Domain::source};
      f.target = {take("prototypes.t"), block.at("valid").at("t").get<std::vector<bool>>(), Domain::target};
      f.combined = {take("prototypes.st"), block.at("valid").at("st").get<std::vector<bool>>(), Domain::combined};
      f.target_fallback = block.at("target_fallback").get<std::vector<bool>>();
      for (const auto* t : {&f.source, &f.target, &f.combined}) {
        if (t->centroids.rank() != 2 || t->centroids.shape()[0] != t->valid.size() ||
            t->centroids.shape()[1] != ck.network.embedding_dim) {
          throw FormatError("checkpoint: prototype block '" + to_string(t->tag) + "' has inconsistent shape",
                            kCheckpointPreamble);
        }
      }
      ck.prototypes = std::move(f);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("checkpoint: malformed prototype block: ") + e.what(), kCheckpointPreamble);
    }
  }
  return ck;
}

inline void save_checkpoint(const std::string& path, const NetworkConfig& network, const Parameters& params,
                            const FrozenPrototypes* prototypes = nullptr) {
  const auto bytes = serialize_checkpoint(network, params, prototypes);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("checkpoint: cannot write '" + path + "'", 0);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("checkpoint: cannot open '" + path + "'", 0);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes);
}

}  // namespace tpn
