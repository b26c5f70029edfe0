#pragma once

#include <Eigen/Core>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "grond/nn/model.hpp"

namespace grond::nn {

enum class Mode { Train, Eval };

using RowMajorMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMajorMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMajorMatrix>;

/// Activations and batch statistics recorded by a forward pass; consumed by
/// backward and by running-statistics updates.
struct Trace {
  Mode mode = Mode::Eval;
  std::vector<Tensor> slots;
  std::vector<std::vector<float>> bn_mean;    // per node, train mode only
  std::vector<std::vector<float>> bn_var;     // biased batch variance
  std::vector<std::vector<float>> bn_invstd;  // per node, both modes
};

/// Parameter gradients parallel to ModelSnapshot::blocks[i].tensors, plus the
/// gradient with respect to the network input when requested.
struct Gradients {
  std::vector<std::vector<Tensor>> params;
  Tensor input;
};

struct LossResult {
  double loss = 0.0;
  Tensor grad;  // d(mean loss)/d(logits)
  int correct = 0;
};

/// Mean softmax cross-entropy over the batch.
inline LossResult cross_entropy(const Tensor& logits, std::span<const int> labels) {
  const int n = logits.dim(0);
  const int c = logits.dim(1);
  if (static_cast<int>(labels.size()) != n) throw ArgumentError("label count != batch size");
  LossResult r;
  r.grad = Tensor(logits.shape());
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    const float* z = logits.data() + std::size_t(i) * c;
    float* g = r.grad.data() + std::size_t(i) * c;
    const int y = labels[i];
    if (y < 0 || y >= c) throw ArgumentError("label out of range");
    double zmax = z[0];
    int arg = 0;
    for (int k = 1; k < c; ++k)
      if (z[k] > zmax) zmax = z[k], arg = k;
    double sum = 0.0;
    for (int k = 0; k < c; ++k) sum += std::exp(double(z[k]) - zmax);
    const double lse = zmax + std::log(sum);
    total += lse - z[y];
    for (int k = 0; k < c; ++k)
      g[k] = static_cast<float>((std::exp(double(z[k]) - lse) - (k == y ? 1.0 : 0.0)) / n);
    if (arg == y) ++r.correct;
  }
  r.loss = total / n;
  return r;
}

inline std::vector<int> argmax_rows(const Tensor& logits) {
  const int n = logits.dim(0), c = logits.dim(1);
  std::vector<int> out(n);
  for (int i = 0; i < n; ++i) {
    const float* z = logits.data() + std::size_t(i) * c;
    out[i] = static_cast<int>(std::max_element(z, z + c) - z);
  }
  return out;
}

namespace detail {

struct ConvGeom {
  int cin, h, w, cout, k, stride, pad, ho, wo;
  int K() const { return cin * k * k; }
  int P() const { return ho * wo; }
  bool pointwise() const { return k == 1 && stride == 1 && pad == 0; }
};

inline ConvGeom conv_geom(const ParamBlock& b, const Shape& in) {
  ConvGeom g{in[1], in[2], in[3], b.out_channels(), b.kernel_h(), b.stride, b.padding, 0, 0};
  if (g.cin != b.in_channels())
    throw ArgumentError("conv '" + b.name + "' expects " + std::to_string(b.in_channels()) +
                        " input channels, got " + std::to_string(g.cin));
  g.ho = (g.h + 2 * g.pad - g.k) / g.stride + 1;
  g.wo = (g.w + 2 * g.pad - g.k) / g.stride + 1;
  if (g.ho <= 0 || g.wo <= 0) throw ArgumentError("input too small for conv '" + b.name + "'");
  return g;
}

inline void im2col(const float* x, const ConvGeom& g, float* col) {
  for (int c = 0; c < g.cin; ++c)
    for (int i = 0; i < g.k; ++i)
      for (int j = 0; j < g.k; ++j) {
        float* row = col + std::size_t((c * g.k + i) * g.k + j) * g.P();
        for (int oh = 0; oh < g.ho; ++oh) {
          const int ih = oh * g.stride - g.pad + i;
          float* r = row + oh * g.wo;
          if (ih < 0 || ih >= g.h) {
            std::fill(r, r + g.wo, 0.0f);
            continue;
          }
          const float* src = x + (std::size_t(c) * g.h + ih) * g.w;
          for (int ow = 0; ow < g.wo; ++ow) {
            const int iw = ow * g.stride - g.pad + j;
            r[ow] = (iw >= 0 && iw < g.w) ? src[iw] : 0.0f;
          }
        }
      }
}

inline void col2im_add(const float* col, const ConvGeom& g, float* dx) {
  for (int c = 0; c < g.cin; ++c)
    for (int i = 0; i < g.k; ++i)
      for (int j = 0; j < g.k; ++j) {
        const float* row = col + std::size_t((c * g.k + i) * g.k + j) * g.P();
        for (int oh = 0; oh < g.ho; ++oh) {
          const int ih = oh * g.stride - g.pad + i;
          if (ih < 0 || ih >= g.h) continue;
          float* dst = dx + (std::size_t(c) * g.h + ih) * g.w;
          const float* r = row + oh * g.wo;
          for (int ow = 0; ow < g.wo; ++ow) {
            const int iw = ow * g.stride - g.pad + j;
            if (iw >= 0 && iw < g.w) dst[iw] += r[ow];
          }
        }
      }
}

inline Tensor conv_forward(const ParamBlock& b, const Tensor& x) {
  const ConvGeom g = conv_geom(b, x.shape());
  const int n = x.dim(0);
  Tensor y({n, g.cout, g.ho, g.wo});
  ConstMatrixMap W(b.weight().data(), g.cout, g.K());
  std::vector<float> col(g.pointwise() ? 0 : std::size_t(g.K()) * g.P());
  for (int i = 0; i < n; ++i) {
    const float* xi = x.data() + std::size_t(i) * g.cin * g.h * g.w;
    if (!g.pointwise()) im2col(xi, g, col.data());
    ConstMatrixMap C(g.pointwise() ? xi : col.data(), g.K(), g.P());
    MatrixMap Y(y.data() + std::size_t(i) * g.cout * g.P(), g.cout, g.P());
    Y.noalias() = W * C;
  }
  return y;
}

inline void conv_backward(const ParamBlock& b, const Tensor& x, const Tensor& dy, Tensor* dW,
                          Tensor* dx) {
  const ConvGeom g = conv_geom(b, x.shape());
  const int n = x.dim(0);
  ConstMatrixMap W(b.weight().data(), g.cout, g.K());
  std::vector<float> col(std::size_t(g.K()) * g.P());
  for (int i = 0; i < n; ++i) {
    const float* xi = x.data() + std::size_t(i) * g.cin * g.h * g.w;
    ConstMatrixMap DY(dy.data() + std::size_t(i) * g.cout * g.P(), g.cout, g.P());
    if (dW) {
      if (!g.pointwise()) im2col(xi, g, col.data());
      ConstMatrixMap C(g.pointwise() ? xi : col.data(), g.K(), g.P());
      MatrixMap G(dW->data(), g.cout, g.K());
      G.noalias() += DY * C.transpose();
    }
    if (dx) {
      float* dxi = dx->data() + std::size_t(i) * g.cin * g.h * g.w;
      if (g.pointwise()) {
        MatrixMap DX(dxi, g.K(), g.P());
        DX.noalias() += W.transpose() * DY;
      } else {
        MatrixMap DC(col.data(), g.K(), g.P());
        DC.noalias() = W.transpose() * DY;
        col2im_add(col.data(), g, dxi);
      }
    }
  }
}

inline std::size_t spatial(const Tensor& t) {
  std::size_t s = 1;
  for (std::size_t d = 2; d < t.rank(); ++d) s *= t.dim(d);
  return s;
}

}  // namespace detail

/// Executes a snapshot's graph. Holds a pointer to the snapshot, which must
/// outlive the network and keep its address.
class Network {
 public:
  explicit Network(const ModelSnapshot& model) : model_(&model), topo_(topology_of(model)) {}

  const Topology& topology() const noexcept { return topo_; }
  const ModelSnapshot& model() const noexcept { return *model_; }

  Tensor forward(const Tensor& x, Mode mode = Mode::Eval, Trace* trace = nullptr) const {
    Trace local;
    Trace& t = trace ? *trace : local;
    run(x, mode, t, -1);
    return t.slots[topo_.output_slot];
  }

  /// Activation at `tag`: a unit tag (post BN+ReLU block output), a conv
  /// block name, or "pre_head" for the pooled feature vector.
  Tensor features(const Tensor& x, const std::string& tag, Mode mode = Mode::Eval) const {
    const int slot = slot_for(tag);
    Trace t;
    run(x, mode, t, slot);
    return t.slots[slot];
  }

  int slot_for(const std::string& tag) const {
    if (tag == "pre_head") return topo_.pre_head_slot;
    if (const Unit* u = topo_.find_unit(tag)) return u->slot;
    throw ArgumentError("unknown layer tag '" + tag + "' for architecture '" + model_->arch_id +
                        "'");
  }

  /// Backpropagates `grad_out` (gradient w.r.t. the logits) through a recorded trace.
  Gradients backward(const Trace& trace, const Tensor& grad_out, bool param_grads = true,
                     bool input_grad = false) const {
    const auto& blocks = model_->blocks;
    Gradients g;
    if (param_grads) {
      g.params.resize(blocks.size());
      for (std::size_t i = 0; i < blocks.size(); ++i)
        for (const auto& t : blocks[i].tensors) g.params[i].emplace_back(t.shape());
    }
    std::vector<Tensor> sg(topo_.num_slots);
    sg[topo_.output_slot] = grad_out;
    auto needs = needs_grad(input_grad);
    auto accumulate = [&](int slot, Tensor&& d) {
      if (sg[slot].empty())
        sg[slot] = std::move(d);
      else
        for (std::size_t i = 0; i < d.size(); ++i) sg[slot][i] += d[i];
    };
    for (std::size_t ni = topo_.nodes.size(); ni-- > 0;) {
      const Node& node = topo_.nodes[ni];
      if (sg[node.out].empty()) continue;
      const Tensor& dy = sg[node.out];
      const Tensor& x = trace.slots[node.in0];
      const bool want_dx = needs[node.in0];
      switch (node.kind) {
        case OpKind::Conv: {
          Tensor dx = want_dx ? Tensor(x.shape()) : Tensor();
          detail::conv_backward(blocks[node.block], x, dy,
                                param_grads ? &g.params[node.block][0] : nullptr,
                                want_dx ? &dx : nullptr);
          if (want_dx) accumulate(node.in0, std::move(dx));
          break;
        }
        case OpKind::BatchNorm: {
          Tensor dx = bn_backward(blocks[node.block], trace, ni, x, dy,
                                  param_grads ? &g.params[node.block] : nullptr);
          if (want_dx) accumulate(node.in0, std::move(dx));
          break;
        }
        case OpKind::Relu: {
          if (!want_dx) break;
          const Tensor& y = trace.slots[node.out];
          Tensor dx(x.shape());
          for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = y[i] > 0.0f ? dy[i] : 0.0f;
          accumulate(node.in0, std::move(dx));
          break;
        }
        case OpKind::Add: {
          if (needs[node.in0]) accumulate(node.in0, Tensor(dy));
          if (needs[node.in1]) accumulate(node.in1, Tensor(dy));
          break;
        }
        case OpKind::GlobalAvgPool: {
          if (!want_dx) break;
          Tensor dx(x.shape());
          const std::size_t hw = detail::spatial(x);
          const std::size_t nc = x.size() / hw;
          for (std::size_t i = 0; i < nc; ++i) {
            const float v = dy[i] / static_cast<float>(hw);
            std::fill(dx.data() + i * hw, dx.data() + (i + 1) * hw, v);
          }
          accumulate(node.in0, std::move(dx));
          break;
        }
        case OpKind::Linear: {
          const auto& b = blocks[node.block];
          const int n = x.dim(0);
          const int fin = b.weight().dim(1), fout = b.weight().dim(0);
          ConstMatrixMap X(x.data(), n, fin);
          ConstMatrixMap DY(dy.data(), n, fout);
          ConstMatrixMap W(b.weight().data(), fout, fin);
          if (param_grads) {
            MatrixMap(g.params[node.block][0].data(), fout, fin).noalias() += DY.transpose() * X;
            auto& db = g.params[node.block][1];
            for (int i = 0; i < n; ++i)
              for (int o = 0; o < fout; ++o) db[o] += dy[std::size_t(i) * fout + o];
          }
          if (want_dx) {
            Tensor dx(x.shape());
            MatrixMap(dx.data(), n, fin).noalias() = DY * W;
            accumulate(node.in0, std::move(dx));
          }
          break;
        }
      }
    }
    if (input_grad) g.input = sg[0].empty() ? Tensor(trace.slots[0].shape()) : std::move(sg[0]);
    return g;
  }

 private:
  // Runs nodes in order; stops once `stop_slot` has been produced (-1: run all).
  void run(const Tensor& x, Mode mode, Trace& t, int stop_slot) const {
    if (x.rank() != 4 && !(x.rank() == 2 && model_->arch_id == "linear"))
      throw ArgumentError("network input must be N×C×H×W, got " + shape_string(x.shape()));
    if (x.rank() == 4) {
      const Shape& want = model_->meta.input_shape;
      if (x.dim(1) != want[0])
        throw ArgumentError("input has " + std::to_string(x.dim(1)) + " channels, model expects " +
                            std::to_string(want[0]));
    }
    const auto& blocks = model_->blocks;
    t.mode = mode;
    t.slots.assign(topo_.num_slots, Tensor());
    t.bn_mean.assign(topo_.nodes.size(), {});
    t.bn_var.assign(topo_.nodes.size(), {});
    t.bn_invstd.assign(topo_.nodes.size(), {});
    t.slots[0] = x;
    if (stop_slot == 0) return;
    for (std::size_t ni = 0; ni < topo_.nodes.size(); ++ni) {
      const Node& node = topo_.nodes[ni];
      const Tensor& in = t.slots[node.in0];
      Tensor out;
      switch (node.kind) {
        case OpKind::Conv: out = detail::conv_forward(blocks[node.block], in); break;
        case OpKind::BatchNorm: out = bn_forward(blocks[node.block], t, ni, in); break;
        case OpKind::Relu:
          out = in;
          for (float& v : out.values()) v = v > 0.0f ? v : 0.0f;
          break;
        case OpKind::Add:
          out = in;
          for (std::size_t i = 0; i < out.size(); ++i) out[i] += t.slots[node.in1][i];
          break;
        case OpKind::GlobalAvgPool: {
          const std::size_t hw = detail::spatial(in);
          out = Tensor({in.dim(0), in.dim(1)});
          for (std::size_t i = 0; i < out.size(); ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < hw; ++j) s += in[i * hw + j];
            out[i] = static_cast<float>(s / hw);
          }
          break;
        }
        case OpKind::Linear: {
          const auto& b = blocks[node.block];
          const int n = in.dim(0);
          const int fin = b.weight().dim(1), fout = b.weight().dim(0);
          if (in.size() != std::size_t(n) * fin)
            throw ArgumentError("linear '" + b.name + "' expects " + std::to_string(fin) +
                                " features per sample");
          out = Tensor({n, fout});
          MatrixMap Y(out.data(), n, fout);
          Y.noalias() = ConstMatrixMap(in.data(), n, fin) *
                        ConstMatrixMap(b.weight().data(), fout, fin).transpose();
          for (int i = 0; i < n; ++i)
            for (int o = 0; o < fout; ++o) Y(i, o) += b.bias()[o];
          break;
        }
      }
      t.slots[node.out] = std::move(out);
      if (node.out == stop_slot) return;
    }
  }

  Tensor bn_forward(const ParamBlock& b, Trace& t, std::size_t ni, const Tensor& x) const {
    const int n = x.dim(0), c = x.dim(1);
    const std::size_t hw = detail::spatial(x);
    if (static_cast<std::size_t>(c) != b.gamma().size())
      throw ArgumentError("batch-norm '" + b.name + "' width mismatch");
    std::vector<float> mean(c), var(c), invstd(c);
    if (t.mode == Mode::Train) {
      const double m = double(n) * hw;
      for (int ch = 0; ch < c; ++ch) {
        double s = 0.0, s2 = 0.0;
        for (int i = 0; i < n; ++i) {
          const float* p = x.data() + (std::size_t(i) * c + ch) * hw;
          for (std::size_t j = 0; j < hw; ++j) s += p[j];
        }
        const double mu = s / m;
        for (int i = 0; i < n; ++i) {
          const float* p = x.data() + (std::size_t(i) * c + ch) * hw;
          for (std::size_t j = 0; j < hw; ++j) s2 += (p[j] - mu) * (p[j] - mu);
        }
        mean[ch] = static_cast<float>(mu);
        var[ch] = static_cast<float>(s2 / m);
      }
    } else {
      mean.assign(b.running_mean().values().begin(), b.running_mean().values().end());
      var.assign(b.running_var().values().begin(), b.running_var().values().end());
    }
    for (int ch = 0; ch < c; ++ch) invstd[ch] = 1.0f / std::sqrt(var[ch] + b.eps);
    Tensor y(x.shape());
    for (int i = 0; i < n; ++i)
      for (int ch = 0; ch < c; ++ch) {
        const std::size_t off = (std::size_t(i) * c + ch) * hw;
        const float scale = b.gamma()[ch] * invstd[ch];
        const float shift = b.beta()[ch] - mean[ch] * scale;
        for (std::size_t j = 0; j < hw; ++j) y[off + j] = x[off + j] * scale + shift;
      }
    t.bn_mean[ni] = std::move(mean);
    t.bn_var[ni] = std::move(var);
    t.bn_invstd[ni] = std::move(invstd);
    return y;
  }

  Tensor bn_backward(const ParamBlock& b, const Trace& t, std::size_t ni, const Tensor& x,
                     const Tensor& dy, std::vector<Tensor>* pg) const {
    const int n = x.dim(0), c = x.dim(1);
    const std::size_t hw = detail::spatial(x);
    const auto& mean = t.bn_mean[ni];
    const auto& invstd = t.bn_invstd[ni];
    const double m = double(n) * hw;
    Tensor dx(x.shape());
    for (int ch = 0; ch < c; ++ch) {
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (int i = 0; i < n; ++i) {
        const std::size_t off = (std::size_t(i) * c + ch) * hw;
        for (std::size_t j = 0; j < hw; ++j) {
          const double xhat = (x[off + j] - mean[ch]) * invstd[ch];
          sum_dy += dy[off + j];
          sum_dy_xhat += dy[off + j] * xhat;
        }
      }
      if (pg) {
        (*pg)[0][ch] += static_cast<float>(sum_dy_xhat);
        (*pg)[1][ch] += static_cast<float>(sum_dy);
      }
      const double g = b.gamma()[ch];
      const double is = invstd[ch];
      for (int i = 0; i < n; ++i) {
        const std::size_t off = (std::size_t(i) * c + ch) * hw;
        for (std::size_t j = 0; j < hw; ++j) {
          if (t.mode == Mode::Train) {
            const double xhat = (x[off + j] - mean[ch]) * is;
            dx[off + j] = static_cast<float>(g * is / m *
                                             (m * dy[off + j] - sum_dy - xhat * sum_dy_xhat));
          } else {
            dx[off + j] = static_cast<float>(g * is * dy[off + j]);
          }
        }
      }
    }
    return dx;
  }

  // Whether a slot's gradient is needed (it leads to a parameter or to a
  // requested input gradient).
  std::vector<char> needs_grad(bool input_grad) const {
    std::vector<char> needs(topo_.num_slots, 0);
    needs[0] = input_grad;
    for (const Node& node : topo_.nodes) {
      bool has_param = node.block >= 0;
      bool upstream = needs[node.in0] || (node.in1 >= 0 && needs[node.in1]);
      needs[node.out] = has_param || upstream;
    }
    return needs;
  }

  const ModelSnapshot* model_;
  Topology topo_;
};

/// Folds the batch statistics of a train-mode trace into the running stats.
inline void update_running_stats(ModelSnapshot& model, const Topology& topo, const Trace& trace) {
  if (trace.mode != Mode::Train) return;
  for (std::size_t ni = 0; ni < topo.nodes.size(); ++ni) {
    const Node& node = topo.nodes[ni];
    if (node.kind != OpKind::BatchNorm) continue;
    auto& b = model.blocks[node.block];
    const Tensor& x = trace.slots[node.in0];
    const double m = double(x.dim(0)) * detail::spatial(x);
    const double unbias = m > 1 ? m / (m - 1) : 1.0;
    for (std::size_t ch = 0; ch < b.gamma().size(); ++ch) {
      b.running_mean()[ch] =
          (1 - b.momentum) * b.running_mean()[ch] + b.momentum * trace.bn_mean[ni][ch];
      b.running_var()[ch] = static_cast<float>((1 - b.momentum) * b.running_var()[ch] +
                                               b.momentum * trace.bn_var[ni][ch] * unbias);
    }
  }
}

/// Eval-mode logits for a whole image tensor, processed in chunks.
inline Tensor predict_logits(const ModelSnapshot& model, const Tensor& images,
                             int batch_size = 256) {
  Network net(model);
  const int n = images.dim(0);
  const std::size_t row = images.row_size();
  Tensor out({n, model.meta.class_count});
  for (int start = 0; start < n; start += batch_size) {
    const int m = std::min(batch_size, n - start);
    Shape s = images.shape();
    s[0] = m;
    Tensor batch(s, std::vector<float>(images.data() + start * row,
                                       images.data() + (start + m) * row));
    Tensor logits = net.forward(batch, Mode::Eval);
    std::copy(logits.data(), logits.data() + logits.size(),
              out.data() + std::size_t(start) * model.meta.class_count);
  }
  return out;
}

inline std::vector<int> predict(const ModelSnapshot& model, const Tensor& images,
                                int batch_size = 256) {
  return argmax_rows(predict_logits(model, images, batch_size));
}

}  // namespace grond::nn
