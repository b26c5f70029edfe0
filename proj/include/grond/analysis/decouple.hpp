#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "grond/data/dataset.hpp"
#include "grond/nn/network.hpp"

namespace grond::analysis {

struct DecoupleConfig {
  double lambda = 0.72;
  int epochs = 20;
  double lr = 0.01;
  int batch_size = 64;  // 0: full batch
  double init = 0.5;
  std::uint64_t seed = 0;
};

/// Penultimate-feature mask and the losses it induces. `objective_trace`
/// holds the full-subset objective before optimisation and after each epoch.
struct FeatureMask {
  Tensor m;
  double lambda = 0.0;
  double benign_loss = 0.0;    // L(head(g ⊙ m), y)
  double backdoor_loss = 0.0;  // L(head(g ⊙ (1 − m)), y), reported unnegated
  double objective = 0.0;      // benign − backdoor + λ‖m‖₁
  std::vector<double> objective_trace;
};

/// Frozen pooled features g(x) and the linear head that maps them to logits.
struct HeadProblem {
  Tensor features;  // N×F
  std::vector<int> labels;
  Tensor weight;  // C×F
  Tensor bias;    // C

  static HeadProblem from_model(const nn::ModelSnapshot& model, const data::LabeledDataset& d) {
    if (d.empty()) throw ArgumentError("feature decoupling needs a non-empty subset");
    const nn::Network net(model);
    HeadProblem p;
    const int n = static_cast<int>(d.size());
    std::vector<float> buf;
    int f = 0;
    for (int start = 0; start < n; start += 256) {
      const int m = std::min(256, n - start);
      std::vector<std::size_t> idx(m);
      std::iota(idx.begin(), idx.end(), std::size_t(start));
      Tensor g = net.features(data::gather_images(d, idx), "pre_head");
      f = static_cast<int>(g.row_size());
      buf.insert(buf.end(), g.values().begin(), g.values().end());
    }
    p.features = Tensor({n, f}, std::move(buf));
    p.labels = d.labels;
    const auto& fc = model.blocks.at(*model.index_of("fc"));
    p.weight = fc.weight();
    p.bias = fc.bias();
    if (p.weight.dim(1) != f) throw ArgumentError("head width does not match pooled features");
    return p;
  }

  int dims() const { return features.dim(1); }
  int classes() const { return weight.dim(0); }
};

namespace detail {

// Mean CE of head(g ⊙ s) over rows `idx`, with optional gradient wrt s.
inline double masked_head_loss(const HeadProblem& p, const std::vector<double>& s,
                               std::span<const std::size_t> idx, std::vector<double>* grad) {
  const int f = p.dims(), c = p.classes();
  std::vector<double> z(c), dz(c);
  double total = 0.0;
  if (grad) grad->assign(f, 0.0);
  for (std::size_t i : idx) {
    const float* g = p.features.data() + i * f;
    for (int k = 0; k < c; ++k) {
      double acc = p.bias[k];
      const float* w = p.weight.data() + std::size_t(k) * f;
      for (int j = 0; j < f; ++j) acc += double(w[j]) * g[j] * s[j];
      z[k] = acc;
    }
    const double zmax = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (int k = 0; k < c; ++k) sum += std::exp(z[k] - zmax);
    const double lse = zmax + std::log(sum);
    total += lse - z[p.labels[i]];
    if (grad) {
      for (int k = 0; k < c; ++k) dz[k] = std::exp(z[k] - lse) - (k == p.labels[i] ? 1.0 : 0.0);
      for (int j = 0; j < f; ++j) {
        double a = 0.0;
        for (int k = 0; k < c; ++k) a += dz[k] * p.weight[std::size_t(k) * f + j];
        (*grad)[j] += a * g[j];
      }
    }
  }
  const double n = static_cast<double>(idx.size());
  if (grad)
    for (double& v : *grad) v /= n;
  return total / n;
}

}  // namespace detail

/// Evaluates both loss terms and the objective for a fixed mask.
inline FeatureMask decouple_losses(const HeadProblem& p, const Tensor& mask, double lambda) {
  const int f = p.dims();
  if (static_cast<int>(mask.size()) != f) throw ArgumentError("mask width != feature width");
  std::vector<double> s(f), inv(f);
  double l1 = 0.0;
  for (int j = 0; j < f; ++j) {
    s[j] = mask[j];
    inv[j] = 1.0 - mask[j];
    l1 += std::fabs(mask[j]);
  }
  std::vector<std::size_t> all(p.labels.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  FeatureMask r;
  r.m = mask;
  r.lambda = lambda;
  r.benign_loss = detail::masked_head_loss(p, s, all, nullptr);
  r.backdoor_loss = detail::masked_head_loss(p, inv, all, nullptr);
  r.objective = r.benign_loss - r.backdoor_loss + lambda * l1;
  return r;
}

/// Minimises L(head(g⊙m), y) − L(head(g⊙(1−m)), y) + λ‖m‖₁ over m ∈ [0,1]^F
/// with Adam, clamping after each step.
inline FeatureMask feature_decouple(const HeadProblem& p, const DecoupleConfig& cfg) {
  if (cfg.epochs < 0) throw ArgumentError("decoupling epochs must be >= 0");
  const int f = p.dims();
  const std::size_t n = p.labels.size();
  Tensor mask({f}, static_cast<float>(cfg.init));
  std::vector<double> m(f, cfg.init), mom(f, 0.0), vel(f, 0.0);
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  long step = 0;
  FeatureMask cur = decouple_losses(p, mask, cfg.lambda);
  std::vector<double> trace{cur.objective};
  Rng rng(cfg.seed);
  const std::size_t bs = cfg.batch_size <= 0 ? n : std::min<std::size_t>(cfg.batch_size, n);
  std::vector<double> g1, g2, inv(f);
  for (int e = 0; e < cfg.epochs; ++e) {
    const auto order = permutation(n, rng);
    for (std::size_t start = 0; start < n; start += bs) {
      std::span<const std::size_t> idx(order.data() + start, std::min(bs, n - start));
      for (int j = 0; j < f; ++j) inv[j] = 1.0 - m[j];
      detail::masked_head_loss(p, m, idx, &g1);
      detail::masked_head_loss(p, inv, idx, &g2);
      ++step;
      for (int j = 0; j < f; ++j) {
        // d/dm of L(g⊙(1−m)) is −g2, so the objective's gradient is g1 + g2 + λ.
        const double grad = g1[j] + g2[j] + cfg.lambda;
        mom[j] = b1 * mom[j] + (1 - b1) * grad;
        vel[j] = b2 * vel[j] + (1 - b2) * grad * grad;
        const double mh = mom[j] / (1 - std::pow(b1, step));
        const double vh = vel[j] / (1 - std::pow(b2, step));
        m[j] = std::clamp(m[j] - cfg.lr * mh / (std::sqrt(vh) + eps), 0.0, 1.0);
      }
    }
    for (int j = 0; j < f; ++j) mask[j] = static_cast<float>(m[j]);
    cur = decouple_losses(p, mask, cfg.lambda);
    if (!std::isfinite(cur.objective)) {
      std::string t;
      for (double v : trace) t += std::to_string(v) + " ";
      throw OptimizationError("feature decoupling diverged in epoch " + std::to_string(e) +
                              "; objective trace: " + t);
    }
    trace.push_back(cur.objective);
  }
  cur.objective_trace = std::move(trace);
  return cur;
}

inline FeatureMask feature_decouple(const nn::ModelSnapshot& model,
                                    const data::LabeledDataset& clean_subset,
                                    const DecoupleConfig& cfg = {}) {
  return feature_decouple(HeadProblem::from_model(model, clean_subset), cfg);
}

}  // namespace grond::analysis
