#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "grond/data/dataset.hpp"
#include "grond/log.hpp"
#include "grond/nn/network.hpp"
#include "grond/triggers/trigger.hpp"

namespace grond::triggers {

struct UpgdConfig {
  float epsilon = 8.0f / 255.0f;
  float step_size = 2.0f / 255.0f;
  /// Number of sampled batches; unset = five passes over the dataset.
  std::optional<int> iterations;
  int batch_size = 256;
  int target = 2;
  std::uint64_t seed = 0;
  /// Probe-batch accuracy (percent) below which the surrogate is reported as untrained.
  double surrogate_accuracy_floor = 50.0;
  std::string surrogate_ref;
  /// Called after every iteration with the projected perturbation and the batch loss.
  std::function<void(int, const Tensor&, double)> on_iteration;

  void validate() const {
    if (!(epsilon >= 0.0f && epsilon <= 1.0f)) throw ArgumentError("epsilon must be in [0, 1]");
    if (!(step_size > 0.0f)) throw ArgumentError("step size must be > 0");
    if (epsilon > 0.0f && step_size > epsilon + 1e-9f)
      throw ArgumentError("step size must not exceed epsilon");
    if (iterations && *iterations < 0) throw ArgumentError("iteration count must be >= 0");
    if (batch_size < 1) throw ArgumentError("batch size must be >= 1");
  }
};

namespace detail {

inline float sign(float v) { return v > 0.0f ? 1.0f : (v < 0.0f ? -1.0f : 0.0f); }

inline void project(std::span<float> delta, float eps) {
  for (float& v : delta) v = std::clamp(v, -eps, eps);
}

/// Loss and per-image input gradient of CE(f(clip(x + δ_i)), t), gradient
/// masked where the clip is active. `deltas` holds one δ per image
/// (`shared` = a single δ broadcast over the batch).
struct TargetedGrad {
  double loss = 0.0;
  Tensor grad;  // same shape as `images`
};

inline TargetedGrad targeted_gradient(const nn::Network& net, const Tensor& images,
                                      const Tensor& deltas, bool shared, int target) {
  const int n = images.dim(0);
  const std::size_t row = images.row_size();
  Tensor x = images;
  std::vector<char> active(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const float v = images[i] + deltas[shared ? i % row : i];
    active[i] = v > 0.0f && v < 1.0f;
    x[i] = clip01(v);
  }
  nn::Trace trace;
  Tensor logits = net.forward(x, nn::Mode::Eval, &trace);
  std::vector<int> labels(n, target);
  auto ce = nn::cross_entropy(logits, labels);
  auto g = net.backward(trace, ce.grad, /*param_grads=*/false, /*input_grad=*/true);
  for (std::size_t i = 0; i < g.input.size(); ++i)
    if (!active[i]) g.input[i] = 0.0f;
  return {ce.loss, std::move(g.input)};
}

}  // namespace detail

/// Universal targeted PGD: a single δ in the ε-ball minimising the surrogate's
/// cross-entropy toward `target` over sampled training batches (sign steps).
inline Trigger generate_upgd(const nn::ModelSnapshot& surrogate,
                             const data::LabeledDataset& dataset, const UpgdConfig& config) {
  config.validate();
  if (dataset.empty()) throw ArgumentError("UPGD needs a non-empty dataset");
  if (config.target < 0 || config.target >= surrogate.meta.class_count)
    throw ArgumentError("UPGD target " + std::to_string(config.target) + " out of range");
  const int batch = std::min<int>(config.batch_size, static_cast<int>(dataset.size()));
  const int per_pass = static_cast<int>((dataset.size() + batch - 1) / batch);
  const int iterations = config.iterations.value_or(5 * per_pass);

  Trigger trig;
  trig.kind = TriggerKind::Upgd;
  trig.epsilon = config.epsilon;
  trig.seed = config.seed;
  trig.target = config.target;
  trig.surrogate_ref = config.surrogate_ref;
  trig.payload = Tensor(dataset.image_shape());
  Rng rng(config.seed);
  if (config.epsilon > 0.0f)
    for (float& v : trig.payload.values())
      v = std::clamp(uniform(rng, -config.epsilon, config.epsilon), -config.epsilon,
                     config.epsilon);

  const nn::Network net(surrogate);
  {
    std::vector<std::size_t> probe(std::min<std::size_t>(dataset.size(), 256));
    std::iota(probe.begin(), probe.end(), std::size_t{0});
    const auto pred = nn::predict(surrogate, data::gather_images(dataset, probe));
    std::size_t ok = 0;
    for (std::size_t i = 0; i < probe.size(); ++i) ok += pred[i] == dataset.labels[probe[i]];
    const double acc = 100.0 * ok / probe.size();
    if (acc < config.surrogate_accuracy_floor)
      log::warn("surrogate accuracy on probe batch is " + std::to_string(acc) +
                "%, below the floor; the trigger may be weak");
  }

  std::vector<std::size_t> order;
  std::size_t cursor = 0;
  for (int it = 0; it < iterations; ++it) {
    if (cursor == order.size() || order.empty()) {
      order = permutation(dataset.size(), rng);
      cursor = 0;
    }
    const std::size_t m = std::min<std::size_t>(batch, order.size() - cursor);
    std::span<const std::size_t> idx(order.data() + cursor, m);
    cursor += m;
    Tensor x = data::gather_images(dataset, idx);
    auto tg = detail::targeted_gradient(net, x, trig.payload, true, config.target);
    const std::size_t row = trig.payload.size();
    std::vector<double> g(row, 0.0);
    for (std::size_t k = 0; k < m; ++k)
      for (std::size_t i = 0; i < row; ++i) g[i] += tg.grad[k * row + i];
    for (std::size_t i = 0; i < row; ++i)
      trig.payload[i] -= config.step_size * detail::sign(static_cast<float>(g[i]));
    detail::project(trig.payload.values(), config.epsilon);
    if (config.on_iteration) config.on_iteration(it, trig.payload, tg.loss);
  }
  return trig;
}

struct PgdResult {
  Tensor delta;                    // C×H×W
  Tensor adversarial;              // clip(image + delta)
  std::vector<double> loss_trace;  // loss before the first step, then after each step
};

/// Sample-wise targeted PGD from a seeded random start in the ε-ball.
inline PgdResult generate_pgd_per_sample(const nn::ModelSnapshot& surrogate, const Tensor& image,
                                         float epsilon, int steps, float alpha, int target,
                                         std::uint64_t seed = 0) {
  if (steps < 0) throw ArgumentError("PGD steps must be >= 0");
  if (!(epsilon >= 0.0f && epsilon <= 1.0f)) throw ArgumentError("epsilon must be in [0, 1]");
  if (image.rank() != 3) throw ArgumentError("PGD expects a C×H×W image");
  if (target < 0 || target >= surrogate.meta.class_count)
    throw ArgumentError("PGD target " + std::to_string(target) + " out of range");
  const nn::Network net(surrogate);
  Shape bs = image.shape();
  bs.insert(bs.begin(), 1);
  const Tensor x = image.reshaped(bs);
  PgdResult r;
  r.delta = Tensor(image.shape());
  Rng rng(seed);
  if (epsilon > 0.0f)
    for (float& v : r.delta.values()) v = std::clamp(uniform(rng, -epsilon, epsilon), -epsilon, epsilon);
  for (int s = 0; s <= steps; ++s) {
    auto tg = detail::targeted_gradient(net, x, r.delta, true, target);
    r.loss_trace.push_back(tg.loss);
    if (s == steps) break;
    for (std::size_t i = 0; i < r.delta.size(); ++i)
      r.delta[i] -= alpha * detail::sign(tg.grad[i]);
    detail::project(r.delta.values(), epsilon);
  }
  r.adversarial = image;
  for (std::size_t i = 0; i < image.size(); ++i) r.adversarial[i] = clip01(image[i] + r.delta[i]);
  return r;
}

/// Seed for an image's per-sample perturbation, derived from its pixels so
/// the same image always receives the same perturbation.
inline std::uint64_t image_seed(std::span<const float> img, std::uint64_t base) {
  std::uint64_t h = 1469598103934665603ull;
  for (float v : img) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    h = (h ^ bits) * 1099511628211ull;
  }
  return derive_seed(base, h);
}

/// Applies any trigger to batches of images; pgd_per_sample regenerates a
/// perturbation for every image from the surrogate.
class TriggerApplier {
 public:
  explicit TriggerApplier(Trigger trigger, const nn::ModelSnapshot* surrogate = nullptr)
      : trigger_(std::move(trigger)), surrogate_(surrogate) {
    if (trigger_.kind == TriggerKind::PgdPerSample && !surrogate_)
      throw ArgumentError("pgd_per_sample trigger requires a surrogate model");
  }

  const Trigger& trigger() const noexcept { return trigger_; }

  void apply_inplace(std::span<float> img, const Shape& shape) const {
    if (trigger_.kind != TriggerKind::PgdPerSample) {
      apply_trigger_inplace(trigger_, img, shape);
      return;
    }
    Tensor x(shape, std::vector<float>(img.begin(), img.end()));
    auto r = generate_pgd_per_sample(*surrogate_, x, trigger_.epsilon, trigger_.pgd_steps,
                                     trigger_.pgd_alpha, trigger_.target,
                                     image_seed(img, trigger_.seed));
    std::copy(r.adversarial.values().begin(), r.adversarial.values().end(), img.begin());
  }

  Tensor apply(const Tensor& image) const {
    Tensor out = image;
    apply_inplace(out.values(), image.shape());
    return out;
  }

  /// Applies to every row of an N×C×H×W tensor.
  Tensor apply_batch(const Tensor& images) const {
    Tensor out = images;
    const Shape s{images.dim(1), images.dim(2), images.dim(3)};
    for (int i = 0; i < images.dim(0); ++i) apply_inplace(out.row(i), s);
    return out;
  }

 private:
  Trigger trigger_;
  const nn::ModelSnapshot* surrogate_;
};

}  // namespace grond::triggers
