#pragma once

#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "grond/abi/uclc.hpp"
#include "grond/nn/train.hpp"

namespace grond::abi {

struct AbiConfig {
  double u = 3.0;
  int apply_every = 1;

  void validate() const {
    if (!(u >= 0.0)) throw ConfigError("ABI threshold multiplier u must be >= 0");
    if (apply_every < 1) throw ConfigError("ABI apply_every must be >= 1");
  }
};

struct AbiEntry {
  int epoch = -1;
  std::string layer;
  int channel = 0;
  double old_score = 0.0;
  double new_score = 0.0;
};

struct AbiReport {
  std::vector<AbiEntry> entries;

  /// CSV "epoch,layer_id,channel,old_score,new_score".
  void write_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write '" + path + "'");
    out << "epoch,layer_id,channel,old_score,new_score\n";
    char buf[96];
    for (const auto& e : entries) {
      std::snprintf(buf, sizeof buf, "%.9g,%.9g", e.old_score, e.new_score);
      out << e.epoch << ',' << e.layer << ',' << e.channel << ',' << buf << '\n';
    }
  }
};

/// Replaces every UCLC-outlier kernel (score > mean + u·std within its layer)
/// with the elementwise mean kernel of that layer. Scores and the mean are
/// taken from the pre-step weights; batch-norm parameters are left alone.
inline std::pair<nn::ModelSnapshot, AbiReport> abi_step(nn::ModelSnapshot model,
                                                       const AbiConfig& config, int epoch = -1) {
  config.validate();
  AbiReport report;
  for (std::size_t i = 0; i < model.blocks.size(); ++i) {
    if (model.blocks[i].kind != nn::BlockKind::Conv || !model.bn_partner(i)) continue;
    LayerScores ls;
    ls.scores = channel_uclc(model, i);
    ls.recompute_stats();
    const auto flagged = ls.above(config.u);
    if (flagged.empty()) continue;

    auto& w = model.blocks[i].weight();
    const int cout = w.dim(0);
    const std::size_t slice = w.size() / cout;
    std::vector<double> acc(slice, 0.0);
    for (int k = 0; k < cout; ++k)
      for (std::size_t j = 0; j < slice; ++j) acc[j] += w[k * slice + j];
    std::vector<float> mean(slice);
    for (std::size_t j = 0; j < slice; ++j) mean[j] = static_cast<float>(acc[j] / cout);
    for (int k : flagged) std::copy(mean.begin(), mean.end(), w.data() + k * slice);

    const auto after = channel_uclc(model, i);
    for (int k : flagged)
      report.entries.push_back({epoch, model.blocks[i].name, k, ls.scores[k], after[k]});
  }
  return {std::move(model), std::move(report)};
}

/// Whether the hook fires after 0-based `epoch` of `total_epochs`.
inline bool abi_due(const AbiConfig& config, int epoch, int total_epochs) {
  return (epoch + 1) % config.apply_every == 0 || epoch + 1 == total_epochs;
}

/// End-of-epoch hook running abi_step every `apply_every` epochs and after
/// the final epoch. Flag records are appended to `sink` when given.
inline nn::EpochCallback make_abi_callback(AbiConfig config, AbiReport* sink = nullptr) {
  config.validate();
  return [config, sink](nn::EpochContext& ctx) {
    if (!abi_due(config, ctx.epoch, ctx.total_epochs)) return;
    auto [model, report] = abi_step(std::move(ctx.model), config, ctx.epoch);
    ctx.model = std::move(model);
    if (sink)
      sink->entries.insert(sink->entries.end(), report.entries.begin(), report.entries.end());
  };
}

}  // namespace grond::abi
