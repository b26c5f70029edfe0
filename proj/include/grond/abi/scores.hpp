#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "grond/error.hpp"

namespace grond::abi {

enum class ScoreKind { Uclc, Tac };

inline const char* to_string(ScoreKind k) { return k == ScoreKind::Uclc ? "uclc" : "tac"; }

struct LayerScores {
  std::string layer;    // conv block name (UCLC) or unit tag (TAC)
  int block_index = -1;  // conv block index, -1 for TAC
  std::vector<double> scores;
  double mean = 0.0;
  double std = 0.0;  // population

  void recompute_stats() {
    mean = scores.empty() ? 0.0 : std::accumulate(scores.begin(), scores.end(), 0.0) / scores.size();
    double ss = 0.0;
    for (double s : scores) ss += (s - mean) * (s - mean);
    std = scores.empty() ? 0.0 : std::sqrt(ss / scores.size());
  }

  double threshold(double u) const { return mean + u * std; }

  /// Channels whose score strictly exceeds mean + u·std.
  std::vector<int> above(double u) const {
    const double t = threshold(u);
    std::vector<int> out;
    for (std::size_t k = 0; k < scores.size(); ++k)
      if (scores[k] > t) out.push_back(static_cast<int>(k));
    return out;
  }
};

/// Per-(layer, channel) scores with per-layer population statistics.
struct ChannelScoreTable {
  ScoreKind kind = ScoreKind::Uclc;
  std::vector<LayerScores> layers;
  std::vector<std::string> skipped;  // conv blocks without a batch-norm partner

  const LayerScores& layer(const std::string& name) const {
    for (const auto& l : layers)
      if (l.layer == name) return l;
    throw ArgumentError("no scores for layer '" + name + "'");
  }

  bool stats_consistent(double tol = 1e-6) const {
    for (const auto& l : layers) {
      LayerScores c = l;
      c.recompute_stats();
      if (std::fabs(c.mean - l.mean) > tol || std::fabs(c.std - l.std) > tol) return false;
    }
    return true;
  }

  /// CSV "layer,channel,score"; `sorted` orders each layer by descending score.
  void write_csv(const std::string& path, bool sorted) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write '" + path + "'");
    out << "layer,channel,score\n";
    char buf[64];
    for (const auto& l : layers) {
      std::vector<int> order(l.scores.size());
      std::iota(order.begin(), order.end(), 0);
      if (sorted)
        std::stable_sort(order.begin(), order.end(),
                         [&](int a, int b) { return l.scores[a] > l.scores[b]; });
      for (int k : order) {
        std::snprintf(buf, sizeof buf, "%.9g", l.scores[k]);
        out << l.layer << ',' << k << ',' << buf << '\n';
      }
    }
    if (!out) throw IoError("write failed for '" + path + "'");
  }
};

}  // namespace grond::abi
