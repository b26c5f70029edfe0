#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <cstring>
#include <string>
#include <utility>
#include <vector>

#include "grond/error.hpp"
#include "grond/rng.hpp"
#include "grond/tensor.hpp"

namespace grond::nn {

enum class BlockKind { Conv, BatchNorm, Linear };

inline const char* to_string(BlockKind k) {
  switch (k) {
    case BlockKind::Conv: return "conv";
    case BlockKind::BatchNorm: return "batchnorm";
    case BlockKind::Linear: return "linear";
  }
  return "?";
}

inline BlockKind block_kind_from_string(const std::string& s) {
  if (s == "conv") return BlockKind::Conv;
  if (s == "batchnorm") return BlockKind::BatchNorm;
  if (s == "linear") return BlockKind::Linear;
  throw ArgumentError("unknown block kind '" + s + "'");
}

/// One named parameter block. Tensor slots by kind:
///   Conv      {weight[C_out, C_in, k_h, k_w]}
///   BatchNorm {gamma, beta, running_mean, running_var}
///   Linear    {weight[out, in], bias[out]}
struct ParamBlock {
  std::string name;
  BlockKind kind = BlockKind::Conv;
  std::vector<Tensor> tensors;

  // conv geometry
  int stride = 1;
  int padding = 0;
  bool bn_follows = false;

  // batch-norm
  float eps = 1e-5f;
  float momentum = 0.1f;

  static constexpr std::size_t kWeight = 0;
  static constexpr std::size_t kBias = 1;
  static constexpr std::size_t kGamma = 0;
  static constexpr std::size_t kBeta = 1;
  static constexpr std::size_t kRunningMean = 2;
  static constexpr std::size_t kRunningVar = 3;

  Tensor& weight() { return tensors.at(kWeight); }
  const Tensor& weight() const { return tensors.at(kWeight); }
  Tensor& bias() { return tensors.at(kBias); }
  const Tensor& bias() const { return tensors.at(kBias); }
  Tensor& gamma() { return tensors.at(kGamma); }
  const Tensor& gamma() const { return tensors.at(kGamma); }
  Tensor& beta() { return tensors.at(kBeta); }
  const Tensor& beta() const { return tensors.at(kBeta); }
  Tensor& running_mean() { return tensors.at(kRunningMean); }
  const Tensor& running_mean() const { return tensors.at(kRunningMean); }
  Tensor& running_var() { return tensors.at(kRunningVar); }
  const Tensor& running_var() const { return tensors.at(kRunningVar); }

  int out_channels() const { return tensors.at(0).dim(0); }
  int in_channels() const { return tensors.at(0).dim(1); }
  int kernel_h() const { return tensors.at(0).dim(2); }
  int kernel_w() const { return tensors.at(0).dim(3); }

  /// Whether tensor slot `i` is updated by the optimizer.
  bool trainable(std::size_t i) const { return kind != BlockKind::BatchNorm || i < 2; }

  bool bit_equal(const ParamBlock& o) const {
    if (name != o.name || kind != o.kind || stride != o.stride || padding != o.padding ||
        bn_follows != o.bn_follows || tensors.size() != o.tensors.size())
      return false;
    if (std::memcmp(&eps, &o.eps, sizeof eps) != 0 ||
        std::memcmp(&momentum, &o.momentum, sizeof momentum) != 0)
      return false;
    for (std::size_t i = 0; i < tensors.size(); ++i)
      if (!tensors[i].bit_equal(o.tensors[i])) return false;
    return true;
  }
};

struct SnapshotMeta {
  int class_count = 10;
  Shape input_shape{3, 32, 32};
  double channel_scale = 1.0;
  std::vector<int> widths;  // resolved stage widths
  int kernel = 3;           // kernel size for the plain family
  std::uint64_t seed = 0;
  int epoch = 0;

  bool operator==(const SnapshotMeta&) const = default;
};

/// Parameter store plus the architecture manifest needed to rebuild the graph.
struct ModelSnapshot {
  std::string arch_id;
  SnapshotMeta meta;
  std::vector<ParamBlock> blocks;

  const ParamBlock& block(const std::string& name) const {
    for (const auto& b : blocks)
      if (b.name == name) return b;
    throw ArgumentError("no parameter block named '" + name + "'");
  }
  ParamBlock& block(const std::string& name) {
    return const_cast<ParamBlock&>(std::as_const(*this).block(name));
  }
  std::optional<std::size_t> index_of(const std::string& name) const {
    for (std::size_t i = 0; i < blocks.size(); ++i)
      if (blocks[i].name == name) return i;
    return std::nullopt;
  }

  /// Index of the batch-norm block paired with conv block `i` (the next block).
  std::optional<std::size_t> bn_partner(std::size_t i) const {
    const auto& b = blocks.at(i);
    if (b.kind != BlockKind::Conv || !b.bn_follows || i + 1 >= blocks.size()) return std::nullopt;
    if (blocks[i + 1].kind != BlockKind::BatchNorm) return std::nullopt;
    return i + 1;
  }

  bool bit_equal(const ModelSnapshot& o) const {
    if (arch_id != o.arch_id || !(meta == o.meta) || blocks.size() != o.blocks.size()) return false;
    for (std::size_t i = 0; i < blocks.size(); ++i)
      if (!blocks[i].bit_equal(o.blocks[i])) return false;
    return true;
  }

  /// Checks structural invariants; throws ArgumentError on violation.
  void validate() const {
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const auto& b = blocks[i];
      for (const auto& t : b.tensors)
        if (!t.all_finite()) throw ArgumentError("block '" + b.name + "' holds non-finite values");
      if (b.kind == BlockKind::Conv && b.bn_follows) {
        auto p = bn_partner(i);
        if (!p) throw ArgumentError("conv block '" + b.name + "' lacks its batch-norm partner");
        if (blocks[*p].gamma().size() != static_cast<std::size_t>(b.out_channels()))
          throw ArgumentError("batch-norm '" + blocks[*p].name + "' width mismatch");
      }
      if (b.kind == BlockKind::BatchNorm)
        for (float v : b.running_var().values())
          if (v < 0.0f) throw ArgumentError("negative running variance in '" + b.name + "'");
    }
  }
};

// ---------------------------------------------------------------------------
// Graph description

enum class OpKind { Conv, BatchNorm, Relu, Add, GlobalAvgPool, Linear };

struct Node {
  OpKind kind;
  int block = -1;  // parameter block index for Conv/BatchNorm/Linear
  int in0 = -1;
  int in1 = -1;  // Add only
  int out = -1;
};

/// A prunable feature unit: a tagged activation and the conv/BN pairs whose
/// channels produce it.
struct Unit {
  std::string tag;
  int slot = -1;
  std::vector<int> producer_convs;  // conv block indices (each has bn_follows)
};

struct Topology {
  std::vector<Node> nodes;
  int num_slots = 1;  // slot 0 is the input
  int output_slot = 0;
  int pre_head_slot = -1;
  std::vector<Unit> units;
  std::map<std::string, std::string> aliases;  // e.g. "layer4" -> "layer4.1"

  const Unit* find_unit(const std::string& tag) const {
    auto it = aliases.find(tag);
    const std::string& key = it == aliases.end() ? tag : it->second;
    for (const auto& u : units)
      if (u.tag == key) return &u;
    return nullptr;
  }
};

namespace detail {

/// Emits parameter blocks and graph nodes together so the two stay in sync.
class GraphBuilder {
 public:
  GraphBuilder(ModelSnapshot* snap, Topology* topo) : snap_(snap), topo_(topo) {}

  int new_slot() { return topo_->num_slots++; }

  int conv(const std::string& name, int in, int cin, int cout, int k, int stride, int pad,
           bool bn_follows) {
    int idx = add_block(name, BlockKind::Conv);
    auto& b = snap_->blocks[idx];
    b.tensors = {Tensor({cout, cin, k, k})};
    b.stride = stride;
    b.padding = pad;
    b.bn_follows = bn_follows;
    return emit(OpKind::Conv, idx, in);
  }

  int bn(const std::string& name, int in, int c) {
    int idx = add_block(name, BlockKind::BatchNorm);
    auto& b = snap_->blocks[idx];
    b.tensors = {Tensor({c}, 1.0f), Tensor({c}, 0.0f), Tensor({c}, 0.0f), Tensor({c}, 1.0f)};
    return emit(OpKind::BatchNorm, idx, in);
  }

  int linear(const std::string& name, int in, int fin, int fout) {
    int idx = add_block(name, BlockKind::Linear);
    snap_->blocks[idx].tensors = {Tensor({fout, fin}), Tensor({fout})};
    return emit(OpKind::Linear, idx, in);
  }

  int relu(int in) { return emit(OpKind::Relu, -1, in); }
  int gap(int in) { return emit(OpKind::GlobalAvgPool, -1, in); }
  int add(int a, int b) {
    int out = new_slot();
    topo_->nodes.push_back({OpKind::Add, -1, a, b, out});
    return out;
  }

  int last_block() const { return static_cast<int>(snap_->blocks.size()) - 1; }

 private:
  int add_block(const std::string& name, BlockKind kind) {
    ParamBlock b;
    b.name = name;
    b.kind = kind;
    snap_->blocks.push_back(std::move(b));
    return last_block();
  }
  int emit(OpKind kind, int block, int in) {
    int out = new_slot();
    topo_->nodes.push_back({kind, block, in, -1, out});
    return out;
  }

  ModelSnapshot* snap_;
  Topology* topo_;
};

inline int scaled_width(int base, double scale) {
  return std::max(1, static_cast<int>(std::lround(base * scale)));
}

inline bool valid_scale(double s) {
  for (double v : {0.125, 0.25, 0.5, 1.0})
    if (std::fabs(s - v) < 1e-12) return true;
  return false;
}

// ResNet18 (CIFAR stem: 3×3 conv, no max-pool), stages 64/128/256/512 scaled.
inline void describe_resnet18(ModelSnapshot& s, Topology& t) {
  GraphBuilder g(&s, &t);
  const auto& w = s.meta.widths;
  const int cin = s.meta.input_shape.at(0);
  int x = g.conv("stem.conv", 0, cin, w[0], 3, 1, 1, true);
  int stem_conv = g.last_block();
  x = g.bn("stem.bn", x, w[0]);
  x = g.relu(x);
  t.units.push_back({"stem", x, {stem_conv}});
  int in_c = w[0];
  for (int stage = 0; stage < 4; ++stage) {
    for (int blk = 0; blk < 2; ++blk) {
      const int stride = (stage > 0 && blk == 0) ? 2 : 1;
      const int out_c = w[stage];
      const std::string p = "layer" + std::to_string(stage + 1) + "." + std::to_string(blk);
      int h = g.conv(p + ".conv1", x, in_c, out_c, 3, stride, 1, true);
      int c1 = g.last_block();
      h = g.bn(p + ".bn1", h, out_c);
      h = g.relu(h);
      t.units.push_back({p + ".conv1", h, {c1}});
      h = g.conv(p + ".conv2", h, out_c, out_c, 3, 1, 1, true);
      int c2 = g.last_block();
      h = g.bn(p + ".bn2", h, out_c);
      t.units.push_back({p + ".conv2", h, {c2}});
      std::vector<int> producers{c2};
      int shortcut = x;
      if (stride != 1 || in_c != out_c) {
        shortcut = g.conv(p + ".shortcut.conv", x, in_c, out_c, 1, stride, 0, true);
        producers.push_back(g.last_block());
        t.units.push_back({p + ".shortcut.conv", -1, {g.last_block()}});
        shortcut = g.bn(p + ".shortcut.bn", shortcut, out_c);
        t.units.back().slot = shortcut;
      }
      x = g.relu(g.add(h, shortcut));
      t.units.push_back({p, x, producers});
      in_c = out_c;
    }
    t.aliases["layer" + std::to_string(stage + 1)] = "layer" + std::to_string(stage + 1) + ".1";
  }
  t.pre_head_slot = g.gap(x);
  t.output_slot = g.linear("fc", t.pre_head_slot, in_c, s.meta.class_count);
}

// Plain conv-BN-ReLU stack; every stage after the first halves resolution.
inline void describe_plain(ModelSnapshot& s, Topology& t) {
  GraphBuilder g(&s, &t);
  const auto& w = s.meta.widths;
  const int k = s.meta.kernel;
  int x = 0;
  int in_c = s.meta.input_shape.at(0);
  for (std::size_t i = 0; i < w.size(); ++i) {
    const std::string p = "layer" + std::to_string(i + 1);
    x = g.conv(p + ".conv", x, in_c, w[i], k, i == 0 ? 1 : 2, k / 2, true);
    int c = g.last_block();
    x = g.bn(p + ".bn", x, w[i]);
    x = g.relu(x);
    t.units.push_back({p, x, {c}});
    t.aliases[p + ".conv"] = p;
    in_c = w[i];
  }
  t.pre_head_slot = g.gap(x);
  t.output_slot = g.linear("fc", t.pre_head_slot, in_c, s.meta.class_count);
}

// Softmax regression on flattened pixels.
inline void describe_linear(ModelSnapshot& s, Topology& t) {
  GraphBuilder g(&s, &t);
  const int fin = static_cast<int>(shape_numel(s.meta.input_shape));
  t.pre_head_slot = 0;
  t.output_slot = g.linear("fc", 0, fin, s.meta.class_count);
}

}  // namespace detail

inline const std::vector<std::string>& registered_architectures() {
  static const std::vector<std::string> ids{"resnet18", "plain", "linear"};
  return ids;
}

inline std::vector<int> default_widths(const std::string& arch_id, double scale) {
  if (arch_id == "resnet18" || arch_id == "plain") {
    std::vector<int> w;
    for (int base : {64, 128, 256, 512}) w.push_back(detail::scaled_width(base, scale));
    return w;
  }
  return {};
}

/// Builds the block layout (zero-initialised) and graph for a snapshot's
/// arch_id + meta. Used both to construct fresh models and to re-derive the
/// graph of a loaded one.
inline Topology describe(const std::string& arch_id, const SnapshotMeta& meta,
                         ModelSnapshot* layout = nullptr) {
  ModelSnapshot tmp;
  ModelSnapshot& s = layout ? *layout : tmp;
  s.arch_id = arch_id;
  s.meta = meta;
  s.blocks.clear();
  Topology t;
  if (meta.input_shape.size() != 3) throw ConfigError("input shape must be C×H×W");
  if (arch_id == "resnet18") {
    if (meta.widths.size() != 4) throw ConfigError("resnet18 needs 4 stage widths");
    detail::describe_resnet18(s, t);
  } else if (arch_id == "plain") {
    if (meta.widths.empty()) throw ConfigError("plain net needs at least one width");
    if (meta.kernel < 1 || meta.kernel % 2 == 0) throw ConfigError("plain kernel must be odd");
    detail::describe_plain(s, t);
  } else if (arch_id == "linear") {
    detail::describe_linear(s, t);
  } else {
    throw ConfigError("unknown architecture '" + arch_id + "'");
  }
  return t;
}

/// Checks that a snapshot's blocks match the layout its arch_id implies.
inline Topology topology_of(const ModelSnapshot& snap) {
  ModelSnapshot layout;
  Topology t = describe(snap.arch_id, snap.meta, &layout);
  if (layout.blocks.size() != snap.blocks.size())
    throw ArgumentError("snapshot block count does not match architecture '" + snap.arch_id + "'");
  for (std::size_t i = 0; i < layout.blocks.size(); ++i) {
    const auto& a = layout.blocks[i];
    const auto& b = snap.blocks[i];
    if (a.name != b.name || a.kind != b.kind || a.tensors.size() != b.tensors.size())
      throw ArgumentError("snapshot block '" + b.name + "' does not match architecture layout");
    for (std::size_t j = 0; j < a.tensors.size(); ++j)
      if (a.tensors[j].shape() != b.tensors[j].shape())
        throw ArgumentError("snapshot block '" + b.name + "' has unexpected tensor shape " +
                            shape_string(b.tensors[j].shape()));
  }
  return t;
}

struct ArchOptions {
  Shape input_shape{3, 32, 32};
  std::vector<int> widths;  // empty: defaults for the arch and channel scale
  int kernel = 3;
};

/// Fresh model: Kaiming-normal (fan-out) conv kernels, γ=1, β=0, running
/// stats (0, 1), PyTorch-default uniform init for the linear head.
inline ModelSnapshot build_model(const std::string& arch_id, int class_count, double channel_scale,
                                 std::uint64_t seed, const ArchOptions& opts = {}) {
  if (class_count < 2) throw ConfigError("class_count must be >= 2");
  if (!detail::valid_scale(channel_scale))
    throw ConfigError("channel_scale must be one of 1/8, 1/4, 1/2, 1");
  SnapshotMeta meta;
  meta.class_count = class_count;
  meta.input_shape = opts.input_shape;
  meta.channel_scale = channel_scale;
  meta.widths = opts.widths.empty() ? default_widths(arch_id, channel_scale) : opts.widths;
  meta.kernel = opts.kernel;
  meta.seed = seed;
  ModelSnapshot snap;
  describe(arch_id, meta, &snap);
  Rng rng(seed);
  for (auto& b : snap.blocks) {
    if (b.kind == BlockKind::Conv) {
      const double fan_out = double(b.out_channels()) * b.kernel_h() * b.kernel_w();
      std::normal_distribution<float> dist(0.0f, static_cast<float>(std::sqrt(2.0 / fan_out)));
      for (float& v : b.weight().values()) v = dist(rng);
    } else if (b.kind == BlockKind::Linear) {
      const float bound = 1.0f / std::sqrt(static_cast<float>(b.weight().dim(1)));
      for (auto* t : {&b.weight(), &b.bias()})
        for (float& v : t->values()) v = uniform(rng, -bound, bound);
    }
  }
  return snap;
}

}  // namespace grond::nn
