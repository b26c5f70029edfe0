#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "grond/data/dataset.hpp"
#include "grond/triggers/pgd.hpp"

namespace grond::data {

enum class LabelMode { Clean, Dirty };

inline const char* to_string(LabelMode m) { return m == LabelMode::Clean ? "clean" : "dirty"; }

inline LabelMode label_mode_from_string(const std::string& s) {
  if (s == "clean") return LabelMode::Clean;
  if (s == "dirty") return LabelMode::Dirty;
  throw ConfigError("label_mode must be 'clean' or 'dirty', got '" + s + "'");
}

struct PoisonPlan {
  int target_class = 2;
  double rate = 0.05;
  LabelMode label_mode = LabelMode::Clean;
  std::uint64_t seed = 0;

  void validate(int num_classes) const {
    if (!(rate >= 0.0 && rate <= 1.0)) throw ConfigError("poisoning rate must be in [0, 1]");
    if (target_class < 0 || target_class >= num_classes)
      throw ConfigError("target class " + std::to_string(target_class) + " out of range");
  }

  std::size_t poison_count(std::size_t n) const {
    return static_cast<std::size_t>(std::llround(rate * static_cast<double>(n)));
  }
};

/// D_p: the training set with trigger-applied rows at `poisoned_indices`.
struct PoisonedDataset {
  LabeledDataset data;
  std::vector<std::size_t> poisoned_indices;  // sorted, unique
  std::string trigger_ref;
  PoisonPlan plan;

  bool is_poisoned(std::size_t i) const {
    return std::binary_search(poisoned_indices.begin(), poisoned_indices.end(), i);
  }
};

/// Poisons round(rate·N) rows in place. Clean-label draws them from the
/// target class and keeps labels; dirty-label draws from every class and
/// relabels to the target.
inline PoisonedDataset build_poisoned(const LabeledDataset& dataset,
                                      const triggers::TriggerApplier& trigger,
                                      const PoisonPlan& plan) {
  plan.validate(dataset.num_classes);
  const std::size_t k = plan.poison_count(dataset.size());
  std::vector<std::size_t> pool;
  if (plan.label_mode == LabelMode::Clean) {
    pool = dataset.indices_of_class(plan.target_class);
    if (k > pool.size()) throw CapacityError(k, pool.size());
  } else {
    pool.resize(dataset.size());
    std::iota(pool.begin(), pool.end(), std::size_t{0});
  }
  Rng rng(plan.seed);
  PoisonedDataset out;
  out.plan = plan;
  out.trigger_ref = trigger.trigger().id();
  out.poisoned_indices = sample_without_replacement(std::move(pool), k, rng);
  out.data = dataset;
  const Shape shape = dataset.image_shape();
  for (std::size_t i : out.poisoned_indices) {
    trigger.apply_inplace(out.data.image(i), shape);
    if (plan.label_mode == LabelMode::Dirty) out.data.labels[i] = plan.target_class;
  }
  return out;
}

/// One index per line, for auditing which rows were poisoned.
inline void export_poisoned_indices(const PoisonedDataset& p, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  for (std::size_t i : p.poisoned_indices) out << i << '\n';
}

}  // namespace grond::data
