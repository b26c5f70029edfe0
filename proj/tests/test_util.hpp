#pragma once

#include <gtest/gtest.h>

#include <unistd.h>

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>

#include "grond/grond.hpp"

namespace grond::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("grond-test-" + tag + "-" + std::to_string(::getpid()) + "-" +
             std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

/// Bitwise reflected CRC-32 (poly 0xEDB88320), independent of zlib.
inline std::uint32_t crc32_reference(const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint32_t c = 0xFFFFFFFFu;
  for (std::size_t i = 0; i < n; ++i) {
    c ^= p[i];
    for (int b = 0; b < 8; ++b) c = (c >> 1) ^ (0xEDB88320u & (0u - (c & 1u)));
  }
  return c ^ 0xFFFFFFFFu;
}

inline Tensor random_tensor(const Shape& s, std::uint64_t seed, float lo = 0.0f, float hi = 1.0f) {
  Tensor t(s);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> d(lo, hi);
  for (float& v : t.values()) v = d(rng);
  return t;
}

/// Small plain conv net for fast tests.
inline nn::ModelSnapshot tiny_plain(int classes, std::vector<int> widths, Shape input,
                                    std::uint64_t seed = 1, int kernel = 3) {
  nn::ArchOptions o;
  o.input_shape = std::move(input);
  o.widths = std::move(widths);
  o.kernel = kernel;
  return nn::build_model("plain", classes, 1.0, seed, o);
}

inline nn::TrainConfig fast_config(int epochs, double lr = 0.05, int batch = 32) {
  nn::TrainConfig c;
  c.epochs = epochs;
  c.lr = lr;
  c.milestones = {};
  c.batch_size = batch;
  c.seed = 3;
  c.augment = false;
  return c;
}

// Three colour channels read by the head, plus one channel that only fires on
// bright white pixels (a 3×3 white patch) and votes for class 0.
inline nn::ModelSnapshot planted_backdoor() {
  auto m = tiny_plain(3, {4}, {3, 8, 8}, 1, 1);
  auto& w = m.block("layer1.conv").weight();
  w.fill(0.0f);
  for (int k = 0; k < 3; ++k) w[k * 3 + k] = 1.0f;
  for (int c = 0; c < 3; ++c) w[3 * 3 + c] = 1.0f;
  auto& bn = m.block("layer1.bn");
  for (float& v : bn.running_var().values()) v = 1.0f - bn.eps;
  bn.beta()[3] = -2.7f;
  auto& fc = m.block("fc");
  fc.weight().fill(0.0f);
  for (int k = 0; k < 3; ++k) fc.weight()[k * 4 + k] = 12.0f;
  fc.weight()[0 * 4 + 3] = 400.0f;
  fc.bias().fill(0.0f);
  return m;
}

}  // namespace grond::testing
