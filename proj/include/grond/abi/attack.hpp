#pragma once

#include <optional>
#include <string>
#include <vector>

#include "grond/abi/abi.hpp"
#include "grond/analysis/metrics.hpp"
#include "grond/data/poison.hpp"

namespace grond::abi {

struct VictimSpec {
  std::string arch = "resnet18";
  double channel_scale = 1.0;
  std::uint64_t seed = 0;
  nn::ArchOptions options;
};

struct GrondOptions {
  VictimSpec victim;
  nn::TrainConfig train;
  std::optional<AbiConfig> abi = AbiConfig{};  // nullopt: plain backdoor training
  std::size_t val_size = 1000;
  std::uint64_t split_seed = 0;
  int jobs = 1;
};

struct EpochMetrics {
  int epoch = 0;
  double train_loss = 0.0;
  double val_ba = 0.0;
  double val_asr = 0.0;
};

struct GrondResult {
  nn::ModelSnapshot model;  // selected checkpoint
  analysis::AttackMetrics metrics;  // on the test set
  int selected_epoch = -1;
  std::vector<EpochMetrics> epochs;
  AbiReport abi_report;
  std::vector<std::size_t> poisoned_indices;  // into the post-split training set
  std::string trigger_ref;
};

/// Backdoor training: hold out a validation split, poison the rest, train
/// with the ABI hook (when enabled) and keep the epoch with the highest clean
/// validation accuracy (validation ASR is logged alongside).
inline GrondResult run_grond(const data::LabeledDataset& train_set,
                             const data::LabeledDataset& test_set,
                             const triggers::TriggerApplier& trigger,
                             const data::PoisonPlan& plan, const GrondOptions& opts) {
  if (opts.abi) opts.abi->validate();
  const std::size_t val_size = std::min(opts.val_size, train_set.size() / 2);
  auto [train_part, val] = data::split_holdout(train_set, val_size, opts.split_seed);
  auto poisoned = data::build_poisoned(train_part, trigger, plan);

  GrondResult result;
  result.poisoned_indices = poisoned.poisoned_indices;
  result.trigger_ref = poisoned.trigger_ref;

  nn::ModelSnapshot model =
      nn::build_model(opts.victim.arch, train_set.num_classes, opts.victim.channel_scale,
                      opts.victim.seed, [&] {
                        auto o = opts.victim.options;
                        o.input_shape = train_set.image_shape();
                        return o;
                      }());

  std::vector<nn::EpochCallback> hooks;
  if (opts.abi) hooks.push_back(make_abi_callback(*opts.abi, &result.abi_report));
  double best = -1.0;
  std::optional<nn::ModelSnapshot> best_model;
  hooks.push_back([&](nn::EpochContext& ctx) {
    EpochMetrics em;
    em.epoch = ctx.epoch;
    em.train_loss = ctx.history.back().loss;
    if (!val.empty()) {
      const auto m = analysis::evaluate(ctx.model, val, trigger, plan.target_class, opts.jobs);
      em.val_ba = m.ba;
      em.val_asr = m.asr;
    }
    log::info("epoch " + std::to_string(ctx.epoch) + " loss " + std::to_string(em.train_loss) +
              " val BA " + std::to_string(em.val_ba) + " val ASR " + std::to_string(em.val_asr));
    result.epochs.push_back(em);
    if (em.val_ba > best) {
      best = em.val_ba;
      best_model = ctx.model;
      result.selected_epoch = ctx.epoch;
    }
  });
  auto trained = nn::train(std::move(model), poisoned.data, opts.train, hooks);
  result.model = best_model ? std::move(*best_model) : std::move(trained.model);
  result.metrics = analysis::evaluate(result.model, test_set, trigger, plan.target_class, opts.jobs);
  return result;
}

}  // namespace grond::abi
