#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "grond/abi/scores.hpp"
#include "grond/nn/model.hpp"

namespace grond::abi {

/// Largest singular value of a row-major rows×cols matrix by power iteration
/// on the smaller Gram matrix.
inline double spectral_norm(std::span<const float> m, int rows, int cols, int max_iter = 2000,
                            double rel_tol = 1e-13) {
  const bool use_cols = cols <= rows;  // Gram = MᵀM (cols×cols) or MMᵀ (rows×rows)
  const int d = use_cols ? cols : rows;
  std::vector<double> gram(std::size_t(d) * d, 0.0);
  for (int a = 0; a < d; ++a)
    for (int b = a; b < d; ++b) {
      double s = 0.0;
      if (use_cols)
        for (int r = 0; r < rows; ++r) s += double(m[r * cols + a]) * m[r * cols + b];
      else
        for (int c = 0; c < cols; ++c) s += double(m[a * cols + c]) * m[b * cols + c];
      gram[a * d + b] = gram[b * d + a] = s;
    }
  // Start from the heaviest Gram column, nudged off any special subspace.
  int best = 0;
  double best_norm = -1.0;
  for (int j = 0; j < d; ++j) {
    double s = 0.0;
    for (int i = 0; i < d; ++i) s += gram[i * d + j] * gram[i * d + j];
    if (s > best_norm) best_norm = s, best = j;
  }
  if (best_norm <= 0.0) return 0.0;
  std::vector<double> v(d), w(d);
  for (int i = 0; i < d; ++i) v[i] = gram[i * d + best] + 1e-3 * std::sqrt(best_norm) * (1.0 + 0.37 * i) / d;
  double lambda = 0.0;
  for (int it = 0; it < max_iter; ++it) {
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    for (double& x : v) x /= norm;
    for (int i = 0; i < d; ++i) {
      double s = 0.0;
      for (int j = 0; j < d; ++j) s += gram[i * d + j] * v[j];
      w[i] = s;
    }
    double rq = 0.0;
    for (int i = 0; i < d; ++i) rq += v[i] * w[i];
    const bool done = it > 0 && std::fabs(rq - lambda) <= rel_tol * std::fabs(rq);
    lambda = rq;
    v.swap(w);
    if (done) break;
  }
  return std::sqrt(std::max(lambda, 0.0));
}

/// BN-scaled spectral norm of every output channel of conv block `conv_index`:
/// |γ_k| / sqrt(running_var_k + eps) · s_max(kernel_k as C_in × (k_h·k_w)).
inline std::vector<double> channel_uclc(const nn::ModelSnapshot& model, std::size_t conv_index) {
  const auto& conv = model.blocks.at(conv_index);
  const auto partner = model.bn_partner(conv_index);
  if (!partner) throw ArgumentError("conv block '" + conv.name + "' has no batch-norm partner");
  const auto& bn = model.blocks[*partner];
  const int cout = conv.out_channels(), cin = conv.in_channels();
  const int kk = conv.kernel_h() * conv.kernel_w();
  const std::size_t slice = std::size_t(cin) * kk;
  std::vector<double> scores(cout);
  for (int k = 0; k < cout; ++k) {
    std::span<const float> kernel(conv.weight().data() + k * slice, slice);
    const double s = spectral_norm(kernel, cin, kk);
    const double scale =
        std::fabs(double(bn.gamma()[k])) / std::sqrt(double(bn.running_var()[k]) + double(bn.eps));
    scores[k] = scale * s;
  }
  return scores;
}

/// Data-free UCLC table over every conv block followed by batch-norm.
inline ChannelScoreTable compute_uclc(const nn::ModelSnapshot& model) {
  ChannelScoreTable table;
  table.kind = ScoreKind::Uclc;
  for (std::size_t i = 0; i < model.blocks.size(); ++i) {
    const auto& b = model.blocks[i];
    if (b.kind != nn::BlockKind::Conv) continue;
    if (!model.bn_partner(i)) {
      table.skipped.push_back(b.name);
      continue;
    }
    LayerScores ls;
    ls.layer = b.name;
    ls.block_index = static_cast<int>(i);
    ls.scores = channel_uclc(model, i);
    ls.recompute_stats();
    table.layers.push_back(std::move(ls));
  }
  if (table.layers.empty())
    throw ArgumentError("model has no conv block followed by batch-norm");
  return table;
}

}  // namespace grond::abi
