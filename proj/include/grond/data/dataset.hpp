#pragma once

#include <algorithm>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "grond/error.hpp"
#include "grond/rng.hpp"
#include "grond/tensor.hpp"

namespace grond::data {

enum class Split { Train, Val, Test };

inline const char* to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

/// N images (N×C×H×W, values in [0,1]) with integer labels in [0, num_classes).
struct LabeledDataset {
  Tensor images;
  std::vector<int> labels;
  int num_classes = 0;
  Split split = Split::Train;

  std::size_t size() const noexcept { return labels.size(); }
  bool empty() const noexcept { return labels.empty(); }
  Shape image_shape() const { return {images.dim(1), images.dim(2), images.dim(3)}; }
  std::size_t image_size() const { return images.row_size(); }

  std::span<const float> image(std::size_t i) const { return images.row(i); }
  std::span<float> image(std::size_t i) { return images.row(i); }

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> counts(num_classes, 0);
    for (int y : labels) ++counts.at(y);
    return counts;
  }

  std::vector<std::size_t> indices_of_class(int c) const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == c) idx.push_back(i);
    return idx;
  }

  void validate() const {
    if (images.rank() != 4) throw ArgumentError("dataset images must be N×C×H×W");
    if (static_cast<std::size_t>(images.dim(0)) != labels.size())
      throw ArgumentError("dataset image count != label count");
    for (int y : labels)
      if (y < 0 || y >= num_classes) throw ArgumentError("dataset label out of range");
  }
};

/// Copies the given rows (in order) into a new dataset.
inline LabeledDataset subset(const LabeledDataset& d, std::span<const std::size_t> indices,
                             Split split) {
  LabeledDataset out;
  out.num_classes = d.num_classes;
  out.split = split;
  if (indices.empty()) return out;
  Shape s = d.images.shape();
  s[0] = static_cast<int>(indices.size());
  std::vector<float> buf;
  buf.reserve(indices.size() * d.image_size());
  for (std::size_t i : indices) {
    if (i >= d.size()) throw ArgumentError("subset index out of range");
    auto img = d.image(i);
    buf.insert(buf.end(), img.begin(), img.end());
    out.labels.push_back(d.labels[i]);
  }
  out.images = Tensor(std::move(s), std::move(buf));
  return out;
}

/// Seeded split into (remaining, held-out) with `holdout` rows in the second part.
inline std::pair<LabeledDataset, LabeledDataset> split_holdout(const LabeledDataset& d,
                                                               std::size_t holdout,
                                                               std::uint64_t seed,
                                                               Split holdout_split = Split::Val) {
  if (holdout > d.size()) throw ArgumentError("holdout larger than dataset");
  Rng rng(seed);
  auto perm = permutation(d.size(), rng);
  std::vector<std::size_t> held(perm.begin(), perm.begin() + holdout);
  std::vector<std::size_t> rest(perm.begin() + holdout, perm.end());
  std::sort(held.begin(), held.end());
  std::sort(rest.begin(), rest.end());
  return {subset(d, rest, d.split), subset(d, held, holdout_split)};
}

/// Seeded uniform sample of `count` rows (e.g. the defender's 1% clean budget).
inline LabeledDataset sample(const LabeledDataset& d, std::size_t count, std::uint64_t seed) {
  std::vector<std::size_t> all(d.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  Rng rng(seed);
  auto idx = sample_without_replacement(std::move(all), count, rng);
  return subset(d, idx, d.split);
}

/// Gathers rows into a contiguous batch tensor.
inline Tensor gather_images(const LabeledDataset& d, std::span<const std::size_t> indices) {
  Shape s = d.images.shape();
  s[0] = static_cast<int>(indices.size());
  Tensor out(s);
  const std::size_t row = d.image_size();
  for (std::size_t k = 0; k < indices.size(); ++k) {
    auto img = d.image(indices[k]);
    std::copy(img.begin(), img.end(), out.data() + k * row);
  }
  return out;
}

}  // namespace grond::data
