#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "grond/data/dataset.hpp"
#include "grond/log.hpp"
#include "grond/nn/network.hpp"

namespace grond::nn {

struct TrainConfig {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  int epochs = 200;
  std::vector<int> milestones{100, 150};
  double lr_decay = 0.1;
  int batch_size = 128;
  std::uint64_t seed = 0;
  bool augment = true;  // random crop (pad = side/8) + horizontal flip

  void validate() const {
    if (!(lr > 0)) throw ConfigError("lr must be > 0");
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    for (std::size_t i = 0; i < milestones.size(); ++i) {
      if (i && milestones[i] <= milestones[i - 1])
        throw ConfigError("lr milestones must be strictly increasing");
      if (milestones[i] >= epochs && epochs > 0)
        throw ConfigError("lr milestone " + std::to_string(milestones[i]) + " not below epochs");
    }
  }

  double lr_at(int epoch) const {
    double r = lr;
    for (int m : milestones)
      if (epoch >= m) r *= lr_decay;
    return r;
  }
};

struct EpochStats {
  int epoch = 0;
  double loss = 0.0;
  double accuracy = 0.0;  // percent, on the (augmented) training batches
  double lr = 0.0;
};

using History = std::vector<EpochStats>;

/// Context handed to end-of-epoch hooks. Hooks may modify `model`.
struct EpochContext {
  int epoch;
  int total_epochs;
  ModelSnapshot& model;
  const History& history;
};

using EpochCallback = std::function<void(EpochContext&)>;

struct TrainResult {
  ModelSnapshot model;
  History history;
};

/// SGD with momentum and L2 weight decay (PyTorch semantics).
class SgdOptimizer {
 public:
  SgdOptimizer(double momentum, double weight_decay)
      : momentum_(momentum), weight_decay_(weight_decay) {}

  void step(ModelSnapshot& model, const Gradients& grads, double lr) {
    if (buffers_.empty()) {
      buffers_.resize(model.blocks.size());
      for (std::size_t i = 0; i < model.blocks.size(); ++i)
        for (const auto& t : model.blocks[i].tensors) buffers_[i].emplace_back(t.shape());
    }
    for (std::size_t i = 0; i < model.blocks.size(); ++i) {
      auto& b = model.blocks[i];
      for (std::size_t j = 0; j < b.tensors.size(); ++j) {
        if (!b.trainable(j)) continue;
        auto& p = b.tensors[j];
        const auto& g = grads.params[i][j];
        auto& buf = buffers_[i][j];
        for (std::size_t k = 0; k < p.size(); ++k) {
          const float d = g[k] + static_cast<float>(weight_decay_) * p[k];
          buf[k] = first_ ? d : static_cast<float>(momentum_) * buf[k] + d;
          p[k] -= static_cast<float>(lr) * buf[k];
        }
      }
    }
    first_ = false;
  }

 private:
  double momentum_;
  double weight_decay_;
  bool first_ = true;
  std::vector<std::vector<Tensor>> buffers_;
};

/// In-place random crop (zero padding) and horizontal flip of one C×H×W image.
inline void augment_image(std::span<float> img, int c, int h, int w, Rng& rng) {
  const int pad = std::max(1, h / 8);
  std::uniform_int_distribution<int> shift(-pad, pad);
  const int dy = shift(rng), dx = shift(rng);
  const bool flip = std::uniform_int_distribution<int>(0, 1)(rng) == 1;
  std::vector<float> src(img.begin(), img.end());
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const int sy = y + dy;
        const int sx0 = x + dx;
        const int sx = flip ? (w - 1 - sx0) : sx0;
        const bool inside = sy >= 0 && sy < h && sx0 >= 0 && sx0 < w;
        img[(std::size_t(ch) * h + y) * w + x] =
            inside ? src[(std::size_t(ch) * h + sy) * w + sx] : 0.0f;
      }
}

/// Minimises mean cross-entropy over `dataset`. Callbacks run in order after
/// the last optimizer step of every epoch.
inline TrainResult train(ModelSnapshot model, const data::LabeledDataset& dataset,
                         const TrainConfig& config,
                         const std::vector<EpochCallback>& callbacks = {}) {
  config.validate();
  TrainResult result;
  if (config.epochs == 0) {
    result.model = std::move(model);
    return result;
  }
  if (dataset.empty()) throw ArgumentError("cannot train on an empty dataset");
  dataset.validate();
  if (dataset.num_classes > model.meta.class_count)
    throw ArgumentError("dataset has more classes than the model head");

  const Network net(model);
  const Topology& topo = net.topology();
  SgdOptimizer opt(config.momentum, config.weight_decay);
  const int c = dataset.images.dim(1), h = dataset.images.dim(2), w = dataset.images.dim(3);
  const int start_epoch = model.meta.epoch;

  for (int e = 0; e < config.epochs; ++e) {
    Rng rng(derive_seed(config.seed, static_cast<std::uint64_t>(start_epoch + e)));
    const auto order = permutation(dataset.size(), rng);
    const double lr = config.lr_at(e);
    double loss_sum = 0.0;
    std::size_t correct = 0, seen = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t m = std::min<std::size_t>(config.batch_size, order.size() - start);
      std::span<const std::size_t> idx(order.data() + start, m);
      Tensor batch = data::gather_images(dataset, idx);
      if (config.augment)
        for (std::size_t k = 0; k < m; ++k) augment_image(batch.row(k), c, h, w, rng);
      std::vector<int> labels(m);
      for (std::size_t k = 0; k < m; ++k) labels[k] = dataset.labels[idx[k]];

      Trace trace;
      Tensor logits = net.forward(batch, Mode::Train, &trace);
      LossResult lr_res = cross_entropy(logits, labels);
      if (!std::isfinite(lr_res.loss)) throw DivergenceError(e);
      Gradients grads = net.backward(trace, lr_res.grad);
      update_running_stats(model, topo, trace);
      opt.step(model, grads, lr);
      loss_sum += lr_res.loss * m;
      correct += lr_res.correct;
      seen += m;
    }
    model.meta.epoch = start_epoch + e + 1;
    for (const auto& b : model.blocks)
      for (const auto& t : b.tensors)
        if (!t.all_finite()) throw DivergenceError(e);
    result.history.push_back({e, loss_sum / seen, 100.0 * correct / seen, lr});
    log::debug("epoch " + std::to_string(e) + " loss " + std::to_string(loss_sum / seen) +
               " acc " + std::to_string(100.0 * correct / seen));
    EpochContext ctx{e, config.epochs, model, result.history};
    for (const auto& cb : callbacks) cb(ctx);
  }
  result.model = std::move(model);
  return result;
}

/// Clean top-1 accuracy in percent.
inline double accuracy(const ModelSnapshot& model, const data::LabeledDataset& d) {
  if (d.empty()) throw ArgumentError("accuracy on an empty dataset");
  const auto pred = predict(model, d.images);
  std::size_t ok = 0;
  for (std::size_t i = 0; i < d.size(); ++i) ok += pred[i] == d.labels[i];
  return 100.0 * ok / d.size();
}

}  // namespace grond::nn
