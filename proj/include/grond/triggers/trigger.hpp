#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <span>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <string>
#include <utility>

#include "grond/error.hpp"
#include "grond/rng.hpp"
#include "grond/tensor.hpp"

namespace grond::triggers {

enum class TriggerKind { Upgd, PgdPerSample, RandomNoise, Patch, Blend };

inline const char* to_string(TriggerKind k) {
  switch (k) {
    case TriggerKind::Upgd: return "upgd";
    case TriggerKind::PgdPerSample: return "pgd_per_sample";
    case TriggerKind::RandomNoise: return "random_noise";
    case TriggerKind::Patch: return "patch";
    case TriggerKind::Blend: return "blend";
  }
  return "?";
}

inline TriggerKind trigger_kind_from_string(const std::string& s) {
  if (s == "upgd") return TriggerKind::Upgd;
  if (s == "pgd_per_sample" || s == "pgd") return TriggerKind::PgdPerSample;
  if (s == "random_noise" || s == "noise") return TriggerKind::RandomNoise;
  if (s == "patch" || s == "badnets") return TriggerKind::Patch;
  if (s == "blend") return TriggerKind::Blend;
  throw ConfigError("unknown trigger kind '" + s + "'");
}

/// Kinds applied as clip(x + δ) under an l∞ budget.
inline bool is_additive(TriggerKind k) {
  return k == TriggerKind::Upgd || k == TriggerKind::PgdPerSample ||
         k == TriggerKind::RandomNoise;
}

/// A poisoning transform. Payload by kind:
///   upgd / random_noise  δ, C×H×W, ‖δ‖∞ ≤ epsilon
///   pgd_per_sample       zeros (δ is regenerated per image from the surrogate)
///   patch                1×side×side bitmap, written into every channel
///   blend                C×H×W pattern, x' = (1−ratio)·x + ratio·pattern
struct Trigger {
  TriggerKind kind = TriggerKind::Upgd;
  Tensor payload;
  float epsilon = 0.0f;
  float blend_ratio = 0.0f;
  std::optional<std::pair<int, int>> anchor;  // patch (row, col); unset = bottom-right
  int target = 0;                              // pgd_per_sample
  int pgd_steps = 0;
  float pgd_alpha = 0.0f;
  std::string surrogate_ref;
  std::uint64_t seed = 0;

  /// Stable identifier: kind, seed and a payload checksum.
  std::string id() const {
    std::uint32_t h = 2166136261u;
    for (float v : payload.values()) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, 4);
      for (int b = 0; b < 4; ++b) h = (h ^ ((bits >> (8 * b)) & 0xFF)) * 16777619u;
    }
    char buf[16];
    std::snprintf(buf, sizeof buf, "%08x", h);
    return std::string(to_string(kind)) + "-" + std::to_string(seed) + "-" + buf;
  }

  void validate() const {
    if (is_additive(kind)) {
      if (!(epsilon >= 0.0f && epsilon <= 1.0f)) throw ArgumentError("epsilon must be in [0, 1]");
      if (payload.abs_max() > epsilon + 1e-7f)
        throw ArgumentError("additive payload exceeds its epsilon budget");
    }
    if (kind == TriggerKind::Blend && !(blend_ratio >= 0.0f && blend_ratio <= 1.0f))
      throw ArgumentError("blend ratio must be in [0, 1]");
  }
};

inline float clip01(float v) { return v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v); }

/// BadNets-style side×side black/white checkerboard.
inline Trigger make_patch_trigger(int side = 3,
                                  std::optional<std::pair<int, int>> anchor = std::nullopt) {
  if (side < 1) throw ArgumentError("patch side must be >= 1");
  Trigger t;
  t.kind = TriggerKind::Patch;
  t.payload = Tensor({1, side, side});
  for (int i = 0; i < side; ++i)
    for (int j = 0; j < side; ++j) t.payload[std::size_t(i) * side + j] = float((i + j) % 2 == 0);
  t.anchor = anchor;
  return t;
}

/// Blend trigger over a seeded Gaussian pattern N(0.5, 0.25²) clipped to [0,1].
inline Trigger make_blend_trigger(float ratio, std::uint64_t seed, const Shape& image_shape) {
  if (!(ratio >= 0.0f && ratio < 1.0f)) throw ArgumentError("blend ratio must be in [0, 1)");
  Trigger t;
  t.kind = TriggerKind::Blend;
  t.blend_ratio = ratio;
  t.seed = seed;
  t.payload = Tensor(image_shape);
  Rng rng(seed);
  std::normal_distribution<float> dist(0.5f, 0.25f);
  for (float& v : t.payload.values()) v = clip01(dist(rng));
  return t;
}

/// Uniform noise in [−ε, ε].
inline Trigger make_noise_trigger(float epsilon, std::uint64_t seed, const Shape& image_shape) {
  if (!(epsilon >= 0.0f && epsilon <= 1.0f)) throw ArgumentError("epsilon must be in [0, 1]");
  Trigger t;
  t.kind = TriggerKind::RandomNoise;
  t.epsilon = epsilon;
  t.seed = seed;
  t.payload = Tensor(image_shape);
  if (epsilon > 0.0f) {
    Rng rng(seed);
    for (float& v : t.payload.values()) v = std::clamp(uniform(rng, -epsilon, epsilon), -epsilon, epsilon);
  }
  return t;
}

/// Applies a payload-defined trigger to one C×H×W image (values in [0,1]).
/// pgd_per_sample needs a surrogate; see triggers::TriggerApplier.
inline void apply_trigger_inplace(const Trigger& t, std::span<float> img, const Shape& shape) {
  const int c = shape.at(0), h = shape.at(1), w = shape.at(2);
  if (img.size() != std::size_t(c) * h * w) throw ArgumentError("image size does not match shape");
  switch (t.kind) {
    case TriggerKind::PgdPerSample:
      throw ArgumentError("pgd_per_sample triggers need a surrogate; use TriggerApplier");
    case TriggerKind::Upgd:
    case TriggerKind::RandomNoise: {
      if (t.payload.size() != img.size())
        throw ArgumentError("trigger payload shape " + shape_string(t.payload.shape()) +
                            " does not match image shape " + shape_string(shape));
      for (std::size_t i = 0; i < img.size(); ++i) img[i] = clip01(img[i] + t.payload[i]);
      break;
    }
    case TriggerKind::Patch: {
      const int side = t.payload.dim(1);
      const int r0 = t.anchor ? t.anchor->first : h - side;
      const int c0 = t.anchor ? t.anchor->second : w - side;
      if (r0 < 0 || c0 < 0 || r0 + side > h || c0 + side > w)
        throw ArgumentError("patch exceeds image bounds");
      for (int ch = 0; ch < c; ++ch)
        for (int i = 0; i < side; ++i)
          for (int j = 0; j < side; ++j)
            img[(std::size_t(ch) * h + r0 + i) * w + c0 + j] = t.payload[std::size_t(i) * side + j];
      break;
    }
    case TriggerKind::Blend: {
      if (t.payload.size() != img.size())
        throw ArgumentError("blend pattern shape " + shape_string(t.payload.shape()) +
                            " does not match image shape " + shape_string(shape));
      const float r = t.blend_ratio;
      if (r == 0.0f) break;
      for (std::size_t i = 0; i < img.size(); ++i)
        img[i] = clip01((1.0f - r) * img[i] + r * t.payload[i]);
      break;
    }
  }
}

inline Tensor apply_trigger(const Trigger& t, const Tensor& image) {
  if (image.rank() != 3) throw ArgumentError("apply_trigger expects a C×H×W image");
  Tensor out = image;
  apply_trigger_inplace(t, out.values(), image.shape());
  return out;
}

}  // namespace grond::triggers
