#pragma once

// Shared layout of the PVL1 / CKP1 / TOK1 files:
//   4-byte magic | u32le header length | UTF-8 JSON header | raw payload

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "anomalens/common.hpp"

namespace anomalens::container {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "payloads are little-endian; big-endian hosts are not supported");

struct RawFile {
  json header;
  std::vector<std::uint8_t> payload;
};

inline void write(const std::filesystem::path& path, std::string_view magic, const json& header,
                  std::span<const std::uint8_t> payload) {
  require(magic.size() == 4, "container magic must be 4 bytes");
  const std::string text = header.dump();
  const auto len = static_cast<std::uint32_t>(text.size());
  std::uint8_t len_le[4] = {static_cast<std::uint8_t>(len & 0xFF),
                            static_cast<std::uint8_t>((len >> 8) & 0xFF),
                            static_cast<std::uint8_t>((len >> 16) & 0xFF),
                            static_cast<std::uint8_t>((len >> 24) & 0xFF)};
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  out.write(magic.data(), 4);
  out.write(reinterpret_cast<const char*>(len_le), 4);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  out.write(reinterpret_cast<const char*>(payload.data()),
            static_cast<std::streamsize>(payload.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

inline RawFile read(const std::filesystem::path& path, std::string_view magic) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open for reading: " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (bytes.size() < 8) throw FormatError("magic: file too short for a container header");
  if (std::memcmp(bytes.data(), magic.data(), 4) != 0)
    throw FormatError("magic: expected '" + std::string(magic) + "'");
  const std::uint32_t len = static_cast<std::uint32_t>(bytes[4]) |
                            (static_cast<std::uint32_t>(bytes[5]) << 8) |
                            (static_cast<std::uint32_t>(bytes[6]) << 16) |
                            (static_cast<std::uint32_t>(bytes[7]) << 24);
  if (bytes.size() < 8 + static_cast<std::size_t>(len))
    throw FormatError("header_length: declares more bytes than the file holds");
  RawFile f;
  try {
    f.header = json::parse(bytes.begin() + 8, bytes.begin() + 8 + len);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("header: invalid JSON (") + e.what() + ")");
  }
  if (!f.header.is_object()) throw FormatError("header: not a JSON object");
  if (!f.header.contains("version") || !f.header["version"].is_number_integer())
    throw FormatError("version: missing");
  if (f.header["version"].get<int>() != 1)
    throw FormatError("version: unsupported value " + f.header["version"].dump());
  f.payload.assign(bytes.begin() + 8 + len, bytes.end());
  return f;
}

template <class T>
void append_le(std::vector<std::uint8_t>& out, std::span<const T> values) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(values.data());
  out.insert(out.end(), p, p + values.size_bytes());
}

template <class T>
std::vector<T> take_le(std::span<const std::uint8_t> bytes, std::size_t& offset, std::size_t count,
                       const std::string& field) {
  const std::size_t nbytes = count * sizeof(T);
  if (offset + nbytes > bytes.size())
    throw FormatError(field + ": payload shorter than the header declares");
  std::vector<T> out(count);
  std::memcpy(out.data(), bytes.data() + offset, nbytes);
  offset += nbytes;
  return out;
}

}  // namespace anomalens::container
