#pragma once

#include <filesystem>

#include "grond/nn/snapshot_io.hpp"
#include "grond/triggers/trigger.hpp"

namespace grond::io {

/// Trigger directory: `manifest` (kind, ε, ratio, surrogate_ref, seed, ...)
/// plus `payload.bin` in the snapshot blob format.
inline void save_trigger(const triggers::Trigger& t, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
  const auto bytes = encode_le({&t.payload});
  write_file(dir / "payload.bin", bytes.data(), bytes.size());
  json body = {{"kind", triggers::to_string(t.kind)},
               {"epsilon", t.epsilon},
               {"blend_ratio", t.blend_ratio},
               {"surrogate_ref", t.surrogate_ref},
               {"seed", t.seed},
               {"target", t.target},
               {"pgd_steps", t.pgd_steps},
               {"pgd_alpha", t.pgd_alpha},
               {"payload_shape", t.payload.shape()},
               {"bytes", bytes.size()},
               {"crc32", crc32_of(bytes.data(), bytes.size())},
               {"id", t.id()}};
  if (t.anchor) body["anchor"] = {t.anchor->first, t.anchor->second};
  write_manifest(dir / "manifest", kTriggerMagic, body);
}

inline triggers::Trigger load_trigger(const fs::path& dir) {
  const json body = read_manifest(dir / "manifest", kTriggerMagic);
  triggers::Trigger t;
  try {
    t.kind = triggers::trigger_kind_from_string(body.at("kind").get<std::string>());
    t.epsilon = body.at("epsilon").get<float>();
    t.blend_ratio = body.at("blend_ratio").get<float>();
    t.surrogate_ref = body.at("surrogate_ref").get<std::string>();
    t.seed = body.at("seed").get<std::uint64_t>();
    t.target = body.at("target").get<int>();
    t.pgd_steps = body.at("pgd_steps").get<int>();
    t.pgd_alpha = body.at("pgd_alpha").get<float>();
    if (body.contains("anchor"))
      t.anchor = std::make_pair(body["anchor"][0].get<int>(), body["anchor"][1].get<int>());
    t.payload = Tensor(body.at("payload_shape").get<Shape>());
    const auto bytes = read_blob(dir / "payload.bin", body.at("bytes").get<std::size_t>(),
                                 body.at("crc32").get<std::uint32_t>());
    if (bytes.size() != t.payload.size() * 4)
      throw FormatError("trigger payload size disagrees with its shape", 0);
    decode_le(bytes, 0, t.payload);
  } catch (const json::exception& e) {
    throw FormatError("invalid trigger manifest in '" + dir.string() + "': " + e.what(), 0);
  }
  t.validate();
  return t;
}

}  // namespace grond::io
