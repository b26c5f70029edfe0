#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

#include "grond/data/dataset.hpp"

namespace grond::data {

namespace detail {

// Fully saturated colour at hue k/classes.
inline std::array<float, 3> class_color(int k, int classes) {
  const float h = 6.0f * static_cast<float>(k) / static_cast<float>(classes);
  const int sector = static_cast<int>(h) % 6;
  const float f = h - std::floor(h);
  const float up = 0.1f + 0.8f * f, down = 0.9f - 0.8f * f, hi = 0.9f, lo = 0.1f;
  switch (sector) {
    case 0: return {hi, up, lo};
    case 1: return {down, hi, lo};
    case 2: return {lo, hi, up};
    case 3: return {lo, down, hi};
    case 4: return {up, lo, hi};
    default: return {hi, lo, down};
  }
}

}  // namespace detail

/// Desk-scale dataset: a class-coloured disc at a random position on a noisy
/// grey background. Deterministic for a fixed seed; classes are
/// interleaved (label of image i is i % classes).
inline LabeledDataset make_synthetic(int classes, int per_class, int side, std::uint64_t seed,
                                     Split split = Split::Train) {
  if (classes < 2) throw ArgumentError("synthetic dataset needs at least 2 classes");
  if (side < 8) throw ArgumentError("synthetic image side must be >= 8");
  if (per_class < 1) throw ArgumentError("synthetic dataset needs at least 1 image per class");
  const int n = classes * per_class;
  LabeledDataset d;
  d.num_classes = classes;
  d.split = split;
  d.images = Tensor({n, 3, side, side});
  d.labels.resize(n);
  Rng rng(seed);
  std::normal_distribution<float> noise(0.0f, 0.08f);
  const float base_r = side / 4.0f;
  for (int i = 0; i < n; ++i) {
    const int y = i % classes;
    d.labels[i] = y;
    const auto color = detail::class_color(y, classes);
    const float r = base_r * uniform(rng, 0.8f, 1.2f);
    const float cy = uniform(rng, r, side - r);
    const float cx = uniform(rng, r, side - r);
    auto img = d.image(i);
    for (int py = 0; py < side; ++py)
      for (int px = 0; px < side; ++px) {
        const float dy = py + 0.5f - cy, dx = px + 0.5f - cx;
        const bool inside = dy * dy + dx * dx <= r * r;
        for (int ch = 0; ch < 3; ++ch) {
          const float v = (inside ? color[ch] : 0.5f) + noise(rng);
          img[(std::size_t(ch) * side + py) * side + px] = std::clamp(v, 0.0f, 1.0f);
        }
      }
  }
  return d;
}

}  // namespace grond::data
