#pragma once

#include <openssl/evp.h>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "grond/error.hpp"
#include "grond/nn/snapshot_io.hpp"

#ifndef GROND_GIT_DESCRIBE
#define GROND_GIT_DESCRIBE "unknown"
#endif

namespace grond::cli {

namespace fs = std::filesystem;
using nlohmann::json;

inline std::string sha256_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw Error("sha256 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

inline std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// output_dir/manifest.json: config hash, per-command records with artifact
/// paths (relative to output_dir) and timestamps, and the code version.
class RunManifest {
 public:
  RunManifest(fs::path output_dir, std::string config_hash, json canonical_config)
      : dir_(std::move(output_dir)) {
    const auto path = dir_ / "manifest.json";
    if (fs::exists(path)) {
      std::ifstream in(path);
      try {
        body_ = json::parse(in);
      } catch (const json::parse_error& e) {
        throw FormatError("run manifest '" + path.string() + "' is not valid JSON", 0);
      }
      if (body_.value("config_hash", "") != config_hash)
        throw ConfigError("output_dir '" + dir_.string() +
                          "' belongs to a different config (hash " +
                          body_.value("config_hash", "?") + ")");
    } else {
      body_ = {{"config_hash", config_hash},
               {"config", std::move(canonical_config)},
               {"code_version", GROND_GIT_DESCRIBE},
               {"created", utc_now()},
               {"commands", json::array()}};
    }
  }

  const fs::path& dir() const { return dir_; }

  /// Latest recorded path for an artifact key, if any.
  std::optional<fs::path> artifact(const std::string& key) const {
    std::optional<fs::path> out;
    for (const auto& c : body_["commands"])
      if (c.contains("artifacts") && c["artifacts"].contains(key))
        out = dir_ / c["artifacts"][key].get<std::string>();
    return out;
  }

  void begin(const std::string& command, json args) {
    current_ = {{"command", command}, {"args", std::move(args)}, {"started", utc_now()},
                {"artifacts", json::object()}};
  }

  void add(const std::string& key, const fs::path& path) {
    current_["artifacts"][key] = fs::relative(path, dir_).generic_string();
  }

  /// Appends the current command record and rewrites the manifest.
  void commit(json extra = json::object()) {
    for (auto it = current_["artifacts"].begin(); it != current_["artifacts"].end(); ++it)
      if (!fs::exists(dir_ / it.value().get<std::string>()))
        throw IoError("artifact '" + it.key() + "' missing at manifest write: " +
                      it.value().get<std::string>());
    current_["finished"] = utc_now();
    for (auto it = extra.begin(); it != extra.end(); ++it) current_[it.key()] = it.value();
    body_["commands"].push_back(current_);
    const auto tmp = dir_ / "manifest.json.tmp";
    {
      std::ofstream out(tmp);
      if (!out) throw IoError("cannot write '" + tmp.string() + "'");
      out << body_.dump(2) << '\n';
    }
    fs::rename(tmp, dir_ / "manifest.json");
  }

  const json& body() const { return body_; }

 private:
  fs::path dir_;
  json body_;
  json current_;
};

}  // namespace grond::cli
