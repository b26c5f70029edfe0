#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "grond/abi/scores.hpp"
#include "grond/data/dataset.hpp"
#include "grond/nn/network.hpp"
#include "grond/triggers/pgd.hpp"

namespace grond::analysis {

/// Trigger-activated change per channel of `layer_tag`: the mean over the
/// subset of ‖f_k(x) − f_k(G(x))‖₂, with f_k the flattened post-BN+ReLU map.
inline abi::ChannelScoreTable compute_tac(const nn::ModelSnapshot& model,
                                          const data::LabeledDataset& clean_subset,
                                          const triggers::TriggerApplier& trigger,
                                          const std::string& layer_tag, int batch_size = 64) {
  if (clean_subset.empty()) throw ArgumentError("TAC needs a non-empty clean subset");
  const nn::Network net(model);
  net.slot_for(layer_tag);
  const Shape shape = clean_subset.image_shape();
  std::vector<double> sums;
  for (std::size_t start = 0; start < clean_subset.size(); start += batch_size) {
    const std::size_t m = std::min<std::size_t>(batch_size, clean_subset.size() - start);
    std::vector<std::size_t> idx(m);
    std::iota(idx.begin(), idx.end(), start);
    Tensor x = data::gather_images(clean_subset, idx);
    Tensor xt = x;
    for (std::size_t k = 0; k < m; ++k) trigger.apply_inplace(xt.row(k), shape);
    const Tensor f = net.features(x, layer_tag);
    const Tensor ft = net.features(xt, layer_tag);
    const int c = f.dim(1);
    const std::size_t hw = f.row_size() / c;
    if (sums.empty()) sums.assign(c, 0.0);
    for (std::size_t i = 0; i < m; ++i)
      for (int ch = 0; ch < c; ++ch) {
        const std::size_t off = (i * c + ch) * hw;
        double ss = 0.0;
        for (std::size_t j = 0; j < hw; ++j) {
          const double d = double(f[off + j]) - ft[off + j];
          ss += d * d;
        }
        sums[ch] += std::sqrt(ss);
      }
  }
  abi::ChannelScoreTable table;
  table.kind = abi::ScoreKind::Tac;
  abi::LayerScores ls;
  ls.layer = layer_tag;
  ls.scores.resize(sums.size());
  for (std::size_t k = 0; k < sums.size(); ++k) ls.scores[k] = sums[k] / clean_subset.size();
  ls.recompute_stats();
  table.layers.push_back(std::move(ls));
  return table;
}

}  // namespace grond::analysis
