#pragma once

#include <chrono>
#include <limits>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "grond/abi/uclc.hpp"
#include "grond/analysis/metrics.hpp"
#include "grond/analysis/tac.hpp"
#include "grond/nn/train.hpp"

namespace grond::defenses {

/// Test set, trigger and target used to fill before/after metrics.
struct EvalContext {
  const data::LabeledDataset* test = nullptr;
  const triggers::TriggerApplier* trigger = nullptr;
  int target = 0;
  int jobs = 1;

  std::optional<analysis::AttackMetrics> measure(const nn::ModelSnapshot& m) const {
    if (!test || !trigger) return std::nullopt;
    return analysis::evaluate(m, *test, *trigger, target, jobs);
  }
};

struct ChannelRef {
  std::string layer;
  int channel = 0;
  bool operator==(const ChannelRef&) const = default;
};

struct DefenseReport {
  std::string defense_id;
  std::optional<double> ba_before, asr_before, ba_after, asr_after;
  std::vector<ChannelRef> pruned;
  std::string noise_spec;
  nlohmann::json params = nlohmann::json::object();
  double wall_time = 0.0;

  nlohmann::json to_json() const {
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); };
    nlohmann::json ch = nlohmann::json::array();
    for (const auto& c : pruned) ch.push_back({{"layer", c.layer}, {"channel", c.channel}});
    return {{"defense_id", defense_id}, {"ba_before", opt(ba_before)},
            {"asr_before", opt(asr_before)}, {"ba_after", opt(ba_after)},
            {"asr_after", opt(asr_after)}, {"pruned_or_noised", ch},
            {"noise_spec", noise_spec},     {"params", params},
            {"wall_time", wall_time}};
  }
};

namespace detail {

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

inline void fill_before(DefenseReport& r, const nn::ModelSnapshot& m, const EvalContext* ctx) {
  if (!ctx) return;
  if (auto met = ctx->measure(m)) r.ba_before = met->ba, r.asr_before = met->asr;
}

inline void fill_after(DefenseReport& r, const nn::ModelSnapshot& m, const EvalContext* ctx) {
  if (!ctx) return;
  if (auto met = ctx->measure(m)) r.ba_after = met->ba, r.asr_after = met->asr;
}

}  // namespace detail

/// Zeroes output channel k of conv block `conv_index`: its kernel slice and
/// the partner batch-norm's γ_k and β_k.
inline void zero_channel(nn::ModelSnapshot& model, std::size_t conv_index, int k) {
  auto& conv = model.blocks.at(conv_index);
  auto& w = conv.weight();
  const std::size_t slice = w.size() / conv.out_channels();
  std::fill(w.data() + k * slice, w.data() + (k + 1) * slice, 0.0f);
  if (auto p = model.bn_partner(conv_index)) {
    model.blocks[*p].gamma()[k] = 0.0f;
    model.blocks[*p].beta()[k] = 0.0f;
  }
}

/// Channel Lipschitzness pruning: zero every channel whose UCLC exceeds
/// mean + u·std of its layer. Data-free.
inline std::pair<nn::ModelSnapshot, DefenseReport> clp_defense(nn::ModelSnapshot model,
                                                               double u_clp,
                                                               const EvalContext* ctx = nullptr) {
  if (!(u_clp > 0.0)) throw ConfigError("CLP threshold u must be > 0");
  detail::Stopwatch sw;
  DefenseReport r;
  r.defense_id = "clp";
  r.params = {{"u", u_clp}};
  detail::fill_before(r, model, ctx);
  const auto table = abi::compute_uclc(model);
  for (const auto& layer : table.layers)
    for (int k : layer.above(u_clp)) {
      zero_channel(model, layer.block_index, k);
      r.pruned.push_back({layer.layer, k});
    }
  detail::fill_after(r, model, ctx);
  r.wall_time = sw.seconds();
  return {std::move(model), std::move(r)};
}

struct FinetuneConfig {
  int epochs = 20;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  int batch_size = 128;
  bool augment = true;
  std::uint64_t seed = 0;
};

/// Full-network supervised fine-tuning on a small clean subset.
/// `loss_trace` receives the per-epoch training loss when given.
inline std::pair<nn::ModelSnapshot, DefenseReport> vanilla_finetune(
    nn::ModelSnapshot model, const data::LabeledDataset& clean_subset, const FinetuneConfig& cfg,
    const EvalContext* ctx = nullptr, std::vector<double>* loss_trace = nullptr) {
  if (clean_subset.empty()) throw ArgumentError("fine-tuning subset is empty");
  detail::Stopwatch sw;
  DefenseReport r;
  r.defense_id = "ft";
  r.params = {{"epochs", cfg.epochs}, {"lr", cfg.lr}, {"subset_size", clean_subset.size()}};
  detail::fill_before(r, model, ctx);
  nn::TrainConfig tc;
  tc.lr = cfg.lr;
  tc.momentum = cfg.momentum;
  tc.weight_decay = cfg.weight_decay;
  tc.epochs = cfg.epochs;
  tc.milestones = {};
  tc.batch_size = cfg.batch_size;
  tc.seed = cfg.seed;
  tc.augment = cfg.augment;
  const int epoch0 = model.meta.epoch;
  auto res = nn::train(std::move(model), clean_subset, tc);
  res.model.meta.epoch = epoch0;
  if (loss_trace)
    for (const auto& h : res.history) loss_trace->push_back(h.loss);
  detail::fill_after(r, res.model, ctx);
  r.wall_time = sw.seconds();
  return {std::move(res.model), std::move(r)};
}

/// Whether the unit's activation is relu(a + b), i.e. a residual sum.
inline bool is_residual_unit(const nn::Topology& topo, const nn::Unit& unit) {
  for (const auto& node : topo.nodes)
    if (node.out == unit.slot && node.kind == nn::OpKind::Relu)
      for (const auto& prev : topo.nodes)
        if (prev.out == node.in0) return prev.kind == nn::OpKind::Add;
  return false;
}

/// Zeroes channel k of a feature unit: every producing conv/BN pair, and,
/// for a residual unit feeding the pooled head directly, the head's input
/// column k (the identity shortcut would otherwise carry the channel).
inline void prune_unit_channel(nn::ModelSnapshot& model, const nn::Topology& topo,
                               const nn::Unit& unit, int k) {
  for (int conv : unit.producer_convs) zero_channel(model, conv, k);
  if (!is_residual_unit(topo, unit)) return;
  for (const auto& node : topo.nodes)
    if (node.kind == nn::OpKind::GlobalAvgPool && node.in0 == unit.slot &&
        node.out == topo.pre_head_slot) {
      auto& fc = model.block("fc");
      const int fin = fc.weight().dim(1);
      for (int o = 0; o < fc.weight().dim(0); ++o) fc.weight()[std::size_t(o) * fin + k] = 0.0f;
    }
}

struct TacSweepEntry {
  double threshold = 0.0;
  nn::ModelSnapshot model;
  DefenseReport report;
};

/// Adaptive white-box pruning: for each threshold, zero the channels of
/// `layer_tag` whose TAC (under the true trigger) exceeds it.
inline std::vector<TacSweepEntry> tac_prune(const nn::ModelSnapshot& model,
                                            const triggers::TriggerApplier& trigger,
                                            const data::LabeledDataset& clean_subset,
                                            const std::vector<double>& thresholds,
                                            const std::string& layer_tag,
                                            const EvalContext* ctx = nullptr) {
  if (thresholds.empty()) throw ArgumentError("TAC pruning needs at least one threshold");
  const nn::Network net(model);
  const nn::Unit* unit = net.topology().find_unit(layer_tag);
  if (!unit) throw ArgumentError("TAC pruning needs a conv unit tag, got '" + layer_tag + "'");
  const auto tac = analysis::compute_tac(model, clean_subset, trigger, layer_tag);
  const auto& scores = tac.layers.front().scores;
  std::optional<analysis::AttackMetrics> before;
  if (ctx) before = ctx->measure(model);
  std::vector<TacSweepEntry> out;
  for (double thr : thresholds) {
    detail::Stopwatch sw;
    TacSweepEntry e;
    e.threshold = thr;
    e.model = model;
    e.report.defense_id = "tac_prune";
    e.report.params = {{"threshold", thr}, {"layer", layer_tag}};
    if (before) e.report.ba_before = before->ba, e.report.asr_before = before->asr;
    for (std::size_t k = 0; k < scores.size(); ++k)
      if (scores[k] > thr) {
        prune_unit_channel(e.model, net.topology(), *unit, static_cast<int>(k));
        e.report.pruned.push_back({layer_tag, static_cast<int>(k)});
      }
    detail::fill_after(e.report, e.model, ctx);
    e.report.wall_time = sw.seconds();
    out.push_back(std::move(e));
  }
  return out;
}

/// Seeded uniform noise in [−ε, ε] added to every batch-norm γ and β.
inline std::pair<nn::ModelSnapshot, DefenseReport> neuron_noise(nn::ModelSnapshot model,
                                                                double eps_noise,
                                                                std::uint64_t seed,
                                                                const EvalContext* ctx = nullptr) {
  if (!(eps_noise >= 0.0)) throw ConfigError("noise level must be >= 0");
  detail::Stopwatch sw;
  DefenseReport r;
  r.defense_id = "noise";
  r.params = {{"eps", eps_noise}, {"seed", seed}};
  r.noise_spec = "uniform[-" + std::to_string(eps_noise) + ", " + std::to_string(eps_noise) +
                 "] on batch-norm gamma/beta";
  detail::fill_before(r, model, ctx);
  if (eps_noise > 0.0) {
    Rng rng(seed);
    std::uniform_real_distribution<double> dist(-eps_noise, eps_noise);
    for (auto& b : model.blocks) {
      if (b.kind != nn::BlockKind::BatchNorm) continue;
      for (auto* t : {&b.gamma(), &b.beta()})
        for (float& v : t->values()) v = static_cast<float>(v + dist(rng));
    }
  }
  detail::fill_after(r, model, ctx);
  r.wall_time = sw.seconds();
  return {std::move(model), std::move(r)};
}

/// CSV "threshold,ba,asr,pruned" for a TAC sweep.
inline void write_sweep_csv(const std::vector<TacSweepEntry>& sweep, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << "threshold,ba,asr,pruned\n";
  for (const auto& e : sweep) {
    out << e.threshold << ',';
    if (e.report.ba_after) out << *e.report.ba_after;
    out << ',';
    if (e.report.asr_after) out << *e.report.asr_after;
    out << ',' << e.report.pruned.size() << '\n';
  }
}

}  // namespace grond::defenses
