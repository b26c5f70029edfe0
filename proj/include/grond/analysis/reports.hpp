#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "grond/data/dataset.hpp"
#include "grond/nn/network.hpp"

namespace grond::analysis {

struct WeightChange {
  std::string layer;
  int channel = 0;
  double delta = 0.0;  // ‖kernel_after − kernel_before‖₂
};

/// Per-(conv layer, output channel) kernel change between two snapshots of
/// one architecture. `layer` limits the report to a single conv block.
inline std::vector<WeightChange> weight_change_report(const nn::ModelSnapshot& before,
                                                      const nn::ModelSnapshot& after,
                                                      const std::string& layer = "") {
  if (before.arch_id != after.arch_id || before.blocks.size() != after.blocks.size())
    throw ArgumentError("weight change report needs snapshots of the same architecture");
  std::vector<WeightChange> out;
  bool found = layer.empty();
  for (std::size_t i = 0; i < before.blocks.size(); ++i) {
    const auto& a = before.blocks[i];
    const auto& b = after.blocks[i];
    if (a.name != b.name || a.kind != b.kind ||
        a.tensors.at(0).shape() != b.tensors.at(0).shape())
      throw ArgumentError("weight change report: block '" + a.name + "' differs in layout");
    if (a.kind != nn::BlockKind::Conv || (!layer.empty() && a.name != layer)) continue;
    found = true;
    const int cout = a.out_channels();
    const std::size_t slice = a.weight().size() / cout;
    for (int k = 0; k < cout; ++k) {
      double ss = 0.0;
      for (std::size_t j = 0; j < slice; ++j) {
        const double d = double(b.weight()[k * slice + j]) - a.weight()[k * slice + j];
        ss += d * d;
      }
      out.push_back({a.name, k, std::sqrt(ss)});
    }
  }
  if (!found) throw ArgumentError("no conv block named '" + layer + "'");
  return out;
}

inline std::vector<WeightChange> sorted_by_delta(std::vector<WeightChange> v) {
  std::stable_sort(v.begin(), v.end(),
                   [](const WeightChange& a, const WeightChange& b) { return a.delta > b.delta; });
  return v;
}

inline void write_weight_changes(const std::vector<WeightChange>& v, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << "layer,channel,delta\n";
  char buf[48];
  for (const auto& w : v) {
    std::snprintf(buf, sizeof buf, "%.9g", w.delta);
    out << w.layer << ',' << w.channel << ',' << buf << '\n';
  }
}

/// CSV with one row per sample: the features at `layer_tag` (spatially
/// averaged per channel for conv units), then `label`, then `poisoned`.
inline void export_features(const nn::ModelSnapshot& model, const data::LabeledDataset& samples,
                            const std::vector<bool>& poisoned, const std::string& layer_tag,
                            const std::string& path) {
  if (poisoned.size() != samples.size())
    throw ArgumentError("poisoned flag count != sample count");
  const nn::Network net(model);
  net.slot_for(layer_tag);
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  bool header = false;
  char buf[32];
  for (std::size_t start = 0; start < samples.size(); start += 128) {
    const std::size_t m = std::min<std::size_t>(128, samples.size() - start);
    std::vector<std::size_t> idx(m);
    std::iota(idx.begin(), idx.end(), start);
    const Tensor f = net.features(data::gather_images(samples, idx), layer_tag);
    const int c = f.dim(1);
    const std::size_t hw = f.row_size() / c;
    if (!header) {
      for (int k = 0; k < c; ++k) out << 'f' << k << ',';
      out << "label,poisoned\n";
      header = true;
    }
    for (std::size_t i = 0; i < m; ++i) {
      for (int k = 0; k < c; ++k) {
        double s = 0.0;
        for (std::size_t j = 0; j < hw; ++j) s += f[(i * c + k) * hw + j];
        std::snprintf(buf, sizeof buf, "%.9g", s / hw);
        out << buf << ',';
      }
      out << samples.labels[start + i] << ',' << (poisoned[start + i] ? 1 : 0) << '\n';
    }
  }
  if (!out) throw IoError("write failed for '" + path + "'");
}

}  // namespace grond::analysis
