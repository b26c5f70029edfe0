#pragma once

#include <nlohmann/json.hpp>
#include <thread>
#include <vector>

#include "grond/data/dataset.hpp"
#include "grond/nn/network.hpp"
#include "grond/triggers/pgd.hpp"

namespace grond::analysis {

struct AttackMetrics {
  double ba = 0.0;   // clean top-1 accuracy, percent
  double asr = 0.0;  // triggered non-target samples classified as target, percent
  std::size_t n_clean = 0;
  std::size_t n_triggered = 0;

  nlohmann::json to_json() const {
    return {{"ba", ba}, {"asr", asr}, {"n_clean", n_clean}, {"n_triggered", n_triggered}};
  }
};

namespace detail {

// Runs fn(begin, end) over [0, n) in up to `jobs` contiguous chunks.
template <typename Fn>
void parallel_chunks(std::size_t n, int jobs, Fn fn) {
  const std::size_t workers = std::max<std::size_t>(1, std::min<std::size_t>(jobs, n));
  if (workers == 1) {
    fn(std::size_t{0}, n);
    return;
  }
  std::vector<std::thread> pool;
  const std::size_t chunk = (n + workers - 1) / workers;
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t b = w * chunk, e = std::min(n, b + chunk);
    if (b < e) pool.emplace_back(fn, b, e);
  }
  for (auto& t : pool) t.join();
}

}  // namespace detail

/// BA over all of `test_set`; ASR over its samples whose label is not `target`,
/// after applying the trigger.
inline AttackMetrics evaluate(const nn::ModelSnapshot& model, const data::LabeledDataset& test_set,
                              const triggers::TriggerApplier& trigger, int target, int jobs = 1) {
  if (test_set.empty()) throw ArgumentError("evaluation set is empty");
  std::vector<std::size_t> others;
  for (std::size_t i = 0; i < test_set.size(); ++i)
    if (test_set.labels[i] != target) others.push_back(i);
  std::vector<int> clean_pred(test_set.size());
  std::vector<int> trig_pred(others.size());
  const Shape shape = test_set.image_shape();

  detail::parallel_chunks(test_set.size(), jobs, [&](std::size_t b, std::size_t e) {
    std::vector<std::size_t> idx(e - b);
    std::iota(idx.begin(), idx.end(), b);
    auto p = nn::predict(model, data::gather_images(test_set, idx));
    std::copy(p.begin(), p.end(), clean_pred.begin() + b);
  });
  detail::parallel_chunks(others.size(), jobs, [&](std::size_t b, std::size_t e) {
    std::span<const std::size_t> idx(others.data() + b, e - b);
    Tensor x = data::gather_images(test_set, idx);
    for (std::size_t k = 0; k < idx.size(); ++k) trigger.apply_inplace(x.row(k), shape);
    auto p = nn::predict(model, x);
    std::copy(p.begin(), p.end(), trig_pred.begin() + b);
  });

  AttackMetrics m;
  m.n_clean = test_set.size();
  m.n_triggered = others.size();
  std::size_t ok = 0, hit = 0;
  for (std::size_t i = 0; i < test_set.size(); ++i) ok += clean_pred[i] == test_set.labels[i];
  for (int p : trig_pred) hit += p == target;
  m.ba = 100.0 * ok / m.n_clean;
  m.asr = m.n_triggered ? 100.0 * hit / m.n_triggered : 0.0;
  return m;
}

}  // namespace grond::analysis
