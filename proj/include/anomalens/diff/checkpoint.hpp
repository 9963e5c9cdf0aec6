#pragma once

// CKP1: magic | u32le header length | JSON {version, params:[{name, shape}], meta}
// | concatenated f32le payloads in header order.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "anomalens/container.hpp"
#include "anomalens/diff/tensor.hpp"

namespace anomalens::diff {

inline constexpr std::string_view kCheckpointMagic = "CKP1";

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<NamedArray> arrays;

  const NamedArray& at(const std::string& name) const {
    for (const auto& a : arrays)
      if (a.name == name) return a;
    throw FormatError("params: checkpoint has no array named '" + name + "'");
  }
};

inline void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckp) {
  nlohmann::json params = nlohmann::json::array();
  std::vector<std::uint8_t> payload;
  for (const auto& a : ckp.arrays) {
    require(a.values.size() == numel(a.shape), "write_checkpoint: '" + a.name + "' size does not match its shape");
    params.push_back({{"name", a.name}, {"shape", a.shape}});
    container::append_le(payload, std::span<const float>(a.values));
  }
  container::write(path, kCheckpointMagic, {{"version", 1}, {"params", params}, {"meta", ckp.meta}}, payload);
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  const auto raw = container::read(path, kCheckpointMagic);
  Checkpoint ckp;
  ckp.meta = raw.header.value("meta", nlohmann::json::object());
  if (!raw.header.contains("params") || !raw.header["params"].is_array()) throw FormatError("params: missing");
  std::size_t off = 0;
  for (const auto& p : raw.header["params"]) {
    NamedArray a;
    a.name = p.at("name").get<std::string>();
    a.shape = p.at("shape").get<Shape>();
    a.values = container::take_le<float>(raw.payload, off, numel(a.shape), "params." + a.name);
    ckp.arrays.push_back(std::move(a));
  }
  if (off != raw.payload.size()) throw FormatError("payload: trailing bytes after declared params");
  return ckp;
}

/// Snapshot of float parameters under their names.
inline void store(Checkpoint& ckp, const std::string& name, const Tensor<float>& t) {
  ckp.arrays.push_back({name, t.shape(), std::vector<float>(t.values().begin(), t.values().end())});
}

template <class T>
void load(const Checkpoint& ckp, const std::string& name, Tensor<T>& t) {
  const auto& a = ckp.at(name);
  if (a.shape != t.shape())
    throw FormatError("params." + name + ": shape " + shape_str(a.shape) + " differs from model " + shape_str(t.shape()));
  auto dst = t.mutable_values();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(a.values[i]);
}

}  // namespace anomalens::diff
