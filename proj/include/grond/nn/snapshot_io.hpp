#pragma once

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>
#include <string>
#include <vector>

#include "grond/nn/model.hpp"

namespace grond::io {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr const char* kSnapshotMagic = "GRONDSNAP";
inline constexpr const char* kTriggerMagic = "GRONDTRIG";
inline constexpr int kFormatVersion = 1;

inline std::uint32_t crc32_of(const void* data, std::size_t n) {
  uLong c = ::crc32(0L, Z_NULL, 0);
  const auto* p = static_cast<const Bytef*>(data);
  while (n > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    c = ::crc32(c, p, chunk);
    p += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(c);
}

inline std::vector<char> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const fs::path& path, const void* data, std::size_t n) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

/// Little-endian float32 encoding of consecutive tensors.
inline std::vector<char> encode_le(const std::vector<const Tensor*>& tensors) {
  std::size_t total = 0;
  for (const auto* t : tensors) total += t->size();
  std::vector<char> bytes(total * 4);
  std::size_t off = 0;
  for (const auto* t : tensors)
    for (float v : t->values()) {
      auto bits = std::bit_cast<std::uint32_t>(v);
      for (int b = 0; b < 4; ++b) bytes[off++] = static_cast<char>((bits >> (8 * b)) & 0xFF);
    }
  return bytes;
}

inline void decode_le(const std::vector<char>& bytes, std::size_t offset, Tensor& t) {
  for (std::size_t i = 0; i < t.size(); ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b)
      bits |= std::uint32_t(static_cast<unsigned char>(bytes[offset + 4 * i + b])) << (8 * b);
    t[i] = std::bit_cast<float>(bits);
  }
}

/// Writes "<magic> <version>\n<json>\n".
inline void write_manifest(const fs::path& path, const char* magic, const json& body) {
  std::string text = std::string(magic) + " " + std::to_string(kFormatVersion) + "\n" +
                     body.dump(2) + "\n";
  write_file(path, text.data(), text.size());
}

inline json read_manifest(const fs::path& path, const char* magic) {
  if (!fs::exists(path)) throw IoError("missing manifest '" + path.string() + "'");
  const auto bytes = read_file(path);
  const std::string text(bytes.begin(), bytes.end());
  const std::string m(magic);
  if (text.compare(0, m.size(), m) != 0)
    throw FormatError("bad magic header in '" + path.string() + "'", 0);
  const auto eol = text.find('\n');
  if (eol == std::string::npos || text.size() <= m.size() + 1)
    throw FormatError("truncated manifest header in '" + path.string() + "'", text.size());
  int version = -1;
  try {
    version = std::stoi(text.substr(m.size() + 1, eol - m.size() - 1));
  } catch (const std::exception&) {
    throw FormatError("unreadable format version in '" + path.string() + "'", m.size() + 1);
  }
  if (version != kFormatVersion)
    throw FormatError("format version mismatch in '" + path.string() + "': file has " +
                          std::to_string(version) + ", reader supports " +
                          std::to_string(kFormatVersion),
                      m.size() + 1);
  try {
    return json::parse(text.begin() + static_cast<std::ptrdiff_t>(eol + 1), text.end());
  } catch (const json::parse_error& e) {
    throw FormatError("malformed manifest '" + path.string() + "': " + e.what(), eol + 1 + e.byte);
  }
}

/// Reads a blob expected to hold `count` floats with the given checksum.
inline std::vector<char> read_blob(const fs::path& path, std::size_t bytes_expected,
                                   std::uint32_t crc_expected) {
  if (!fs::exists(path)) throw IoError("missing blob '" + path.string() + "'");
  auto bytes = read_file(path);
  if (bytes.size() < bytes_expected)
    throw FormatError("truncated blob '" + path.string() + "': expected " +
                          std::to_string(bytes_expected) + " bytes",
                      bytes.size());
  if (bytes.size() > bytes_expected)
    throw FormatError("oversized blob '" + path.string() + "'", bytes_expected);
  const std::uint32_t crc = crc32_of(bytes.data(), bytes.size());
  if (crc != crc_expected)
    throw FormatError("checksum failure for '" + path.string() + "'", 0);
  return bytes;
}

inline json meta_to_json(const nn::SnapshotMeta& m) {
  return {{"class_count", m.class_count}, {"input_shape", m.input_shape},
          {"channel_scale", m.channel_scale}, {"widths", m.widths},
          {"kernel", m.kernel},           {"seed", m.seed},
          {"epoch", m.epoch}};
}

inline nn::SnapshotMeta meta_from_json(const json& j) {
  nn::SnapshotMeta m;
  m.class_count = j.at("class_count").get<int>();
  m.input_shape = j.at("input_shape").get<Shape>();
  m.channel_scale = j.at("channel_scale").get<double>();
  m.widths = j.at("widths").get<std::vector<int>>();
  m.kernel = j.at("kernel").get<int>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.epoch = j.at("epoch").get<int>();
  return m;
}

/// Snapshot directory: `manifest` plus one `<block name>.bin` per parameter
/// block (its tensors concatenated, little-endian float32).
inline void save_snapshot(const nn::ModelSnapshot& model, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
  json blocks = json::array();
  for (const auto& b : model.blocks) {
    std::vector<const Tensor*> ts;
    json shapes = json::array();
    for (const auto& t : b.tensors) {
      ts.push_back(&t);
      shapes.push_back(t.shape());
    }
    const auto bytes = encode_le(ts);
    const std::string file = b.name + ".bin";
    write_file(dir / file, bytes.data(), bytes.size());
    json jb = {{"name", b.name},     {"kind", nn::to_string(b.kind)},
               {"file", file},       {"shapes", shapes},
               {"bytes", bytes.size()}, {"crc32", crc32_of(bytes.data(), bytes.size())}};
    if (b.kind == nn::BlockKind::Conv) {
      jb["stride"] = b.stride;
      jb["padding"] = b.padding;
      jb["bn_follows"] = b.bn_follows;
    } else if (b.kind == nn::BlockKind::BatchNorm) {
      jb["eps"] = b.eps;
      jb["momentum"] = b.momentum;
    }
    blocks.push_back(std::move(jb));
  }
  json body = {{"arch_id", model.arch_id}, {"meta", meta_to_json(model.meta)}, {"blocks", blocks}};
  write_manifest(dir / "manifest", kSnapshotMagic, body);
}

inline nn::ModelSnapshot load_snapshot(const fs::path& dir) {
  const json body = read_manifest(dir / "manifest", kSnapshotMagic);
  nn::ModelSnapshot model;
  try {
    model.arch_id = body.at("arch_id").get<std::string>();
    model.meta = meta_from_json(body.at("meta"));
    for (const auto& jb : body.at("blocks")) {
      nn::ParamBlock b;
      b.name = jb.at("name").get<std::string>();
      b.kind = nn::block_kind_from_string(jb.at("kind").get<std::string>());
      std::size_t count = 0;
      for (const auto& s : jb.at("shapes")) {
        b.tensors.emplace_back(s.get<Shape>());
        count += b.tensors.back().size();
      }
      if (b.kind == nn::BlockKind::Conv) {
        b.stride = jb.at("stride").get<int>();
        b.padding = jb.at("padding").get<int>();
        b.bn_follows = jb.at("bn_follows").get<bool>();
      } else if (b.kind == nn::BlockKind::BatchNorm) {
        b.eps = jb.at("eps").get<float>();
        b.momentum = jb.at("momentum").get<float>();
      }
      const auto bytes_expected = jb.at("bytes").get<std::size_t>();
      if (bytes_expected != count * 4)
        throw FormatError("manifest byte count disagrees with shapes for block '" + b.name + "'",
                          0);
      const auto bytes = read_blob(dir / jb.at("file").get<std::string>(), bytes_expected,
                                   jb.at("crc32").get<std::uint32_t>());
      std::size_t off = 0;
      for (auto& t : b.tensors) {
        decode_le(bytes, off, t);
        off += t.size() * 4;
      }
      model.blocks.push_back(std::move(b));
    }
  } catch (const json::exception& e) {
    throw FormatError("invalid snapshot manifest in '" + dir.string() + "': " + e.what(), 0);
  }
  nn::topology_of(model);
  model.validate();
  return model;
}

}  // namespace grond::io
