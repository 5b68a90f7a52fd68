// SPDX-License-Identifier: Apache-2.0
#include "vexpert/checkpoint.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <vector>

#include <json.hpp>

#include "vexpert/error.hpp"

namespace vexpert {

namespace {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <class T>
T to_le(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    v = std::bit_cast<T>(bytes);
  }
  return v;
}

// Header length cap: a corrupt prefix should fail fast rather than allocate.
constexpr std::uint64_t kMaxHeader = 64ull << 20;

void write_f32(std::ostream& out, std::span<const double> values) {
  std::vector<std::uint32_t> buf(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    buf[i] = to_le(std::bit_cast<std::uint32_t>(static_cast<float>(values[i])));
  }
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
}

}  // namespace

void save_checkpoint(std::ostream& out, const Model& model) {
  nlohmann::json tensors = nlohmann::json::array();
  std::uint64_t offset = 0;
  const auto params = model.parameters();
  for (const auto& p : params) {
    tensors.push_back({{"name", p.name},
                       {"shape", p.tensor.shape()},
                       {"offset", offset},
                       {"frozen", !p.tensor.requires_grad()}});
    offset += static_cast<std::uint64_t>(p.tensor.numel()) * 4;
  }
  nlohmann::json header = {{"format_version", kCheckpointVersion}, {"config", to_json(model.config)}, {"tensors", tensors}};
  const std::string text = header.dump();
  const std::uint64_t len = to_le<std::uint64_t>(text.size());
  out.write(reinterpret_cast<const char*>(&len), 8);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& p : params) write_f32(out, p.tensor.data());
  if (!out) throw IoError("checkpoint write failed");
}

void save_checkpoint(const std::string& path, const Model& model) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  save_checkpoint(f, model);
  f.close();
  if (!f) throw IoError("checkpoint write to '" + path + "' failed");
}

Model load_checkpoint(std::istream& in) {
  std::uint64_t len = 0;
  if (!in.read(reinterpret_cast<char*>(&len), 8)) throw IoError("checkpoint truncated before header length");
  len = to_le(len);
  if (len == 0 || len > kMaxHeader) throw IoError("implausible checkpoint header length " + std::to_string(len));
  std::string text(len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(len))) throw IoError("checkpoint truncated inside header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint header is not JSON: ") + e.what());
  }
  if (!header.is_object() || !header.contains("format_version") || !header.contains("config") ||
      !header.contains("tensors")) {
    throw IoError("checkpoint header lacks format_version, config or tensors");
  }
  if (header["format_version"] != kCheckpointVersion) {
    throw IoError("unsupported checkpoint format_version " + header["format_version"].dump());
  }

  Model model = build_model(model_config_from_json(header["config"]));
  std::map<std::string, Tensor> by_name;
  for (const auto& p : model.parameters()) by_name.emplace(p.name, p.tensor);

  std::uint64_t expected_offset = 0;
  std::vector<std::uint32_t> buf;
  try {
    for (const auto& entry : header["tensors"]) {
      const auto name = entry.at("name").get<std::string>();
      auto it = by_name.find(name);
      if (it == by_name.end()) throw IoError("checkpoint tensor '" + name + "' is not part of the configured model");
      Tensor t = it->second;
      by_name.erase(it);
      const auto shape = entry.at("shape").get<Shape>();
      if (shape != t.shape()) {
        throw IoError("checkpoint tensor '" + name + "' has shape " + shape_str(shape) + ", config needs " +
                      shape_str(t.shape()));
      }
      if (entry.at("offset").get<std::uint64_t>() != expected_offset) {
        throw IoError("checkpoint tensor '" + name + "' is not contiguous with its predecessor");
      }
      const auto n = static_cast<std::size_t>(t.numel());
      expected_offset += n * 4;
      buf.resize(n);
      if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * 4))) {
        throw IoError("checkpoint payload truncated in tensor '" + name + "'");
      }
      auto dst = t.mutable_data();
      for (std::size_t i = 0; i < n; ++i) dst[i] = static_cast<double>(std::bit_cast<float>(to_le(buf[i])));
      t.set_requires_grad(!entry.at("frozen").get<bool>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed checkpoint tensor table: ") + e.what());
  }
  if (!by_name.empty()) throw IoError("checkpoint lacks tensor '" + by_name.begin()->first + "'");
  if (in.peek() != std::char_traits<char>::eof()) throw IoError("checkpoint has trailing bytes after the payload");
  return model;
}

Model load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint '" + path + "'");
  return load_checkpoint(f);
}

}  // namespace vexpert
