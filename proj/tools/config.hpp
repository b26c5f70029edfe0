#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "grond/grond.hpp"

namespace grond::cli {

using nlohmann::json;

/// Validates `v` against the subset of JSON Schema used by configs/schema.json:
/// type, enum, properties, required, additionalProperties:false, items,
/// minimum/maximum/exclusiveMinimum and local "$ref".
class SchemaValidator {
 public:
  explicit SchemaValidator(json schema) : root_(std::move(schema)) {}

  void validate(const json& v) const { check(root_, v, "config"); }

 private:
  json root_;

  const json& resolve(const json& s) const {
    if (!s.contains("$ref")) return s;
    const std::string ref = s["$ref"];
    if (ref.rfind("#/", 0) != 0) throw ConfigError("unsupported schema ref " + ref);
    return root_.at(json::json_pointer(ref.substr(1)));
  }

  static bool is_type(const json& v, const std::string& t) {
    if (t == "object") return v.is_object();
    if (t == "array") return v.is_array();
    if (t == "string") return v.is_string();
    if (t == "boolean") return v.is_boolean();
    if (t == "null") return v.is_null();
    if (t == "integer") return v.is_number_integer();
    if (t == "number") return v.is_number();
    return false;
  }

  void check(const json& raw, const json& v, const std::string& where) const {
    const json& s = resolve(raw);
    if (s.contains("type")) {
      bool ok = false;
      if (s["type"].is_array()) {
        for (const auto& t : s["type"]) ok = ok || is_type(v, t);
      } else {
        ok = is_type(v, s["type"]);
      }
      if (!ok) throw ConfigError(where + ": expected " + s["type"].dump() + ", got " + v.dump());
    }
    if (s.contains("enum")) {
      bool ok = false;
      for (const auto& e : s["enum"])
        ok = ok || e == v || (e.is_number() && v.is_number() && e.get<double>() == v.get<double>());
      if (!ok) throw ConfigError(where + ": " + v.dump() + " not one of " + s["enum"].dump());
    }
    if (v.is_number()) {
      const double x = v.get<double>();
      if (s.contains("minimum") && x < s["minimum"].get<double>())
        throw ConfigError(where + ": must be >= " + s["minimum"].dump());
      if (s.contains("maximum") && x > s["maximum"].get<double>())
        throw ConfigError(where + ": must be <= " + s["maximum"].dump());
      if (s.contains("exclusiveMinimum") && !(x > s["exclusiveMinimum"].get<double>()))
        throw ConfigError(where + ": must be > " + s["exclusiveMinimum"].dump());
    }
    if (v.is_object()) {
      const json props = s.value("properties", json::object());
      for (const auto& r : s.value("required", json::array()))
        if (!v.contains(r.get<std::string>()))
          throw ConfigError(where + ": missing required key '" + r.get<std::string>() + "'");
      for (auto it = v.begin(); it != v.end(); ++it) {
        if (props.contains(it.key()))
          check(props[it.key()], it.value(), where + "." + it.key());
        else if (s.value("additionalProperties", true) == false)
          throw ConfigError(where + ": unknown key '" + it.key() + "'");
      }
    }
    if (v.is_array() && s.contains("items"))
      for (std::size_t i = 0; i < v.size(); ++i)
        check(s["items"], v[i], where + "[" + std::to_string(i) + "]");
  }
};

struct DataSection {
  std::string dataset = "cifar10";
  std::string root;  // empty: $GROND_DATA_ROOT, then $GROND_CIFAR10_ROOT
  std::uint64_t split_seed = 0;
  int classes = 10;
  int train_per_class = 500;
  int test_per_class = 100;
  int side = 32;
};

struct ModelSection {
  std::string arch = "resnet18";
  double channel_scale = 1.0;
  std::vector<int> widths;
  int kernel = 3;
  nn::TrainConfig train;
};

struct TriggerSection {
  std::string kind = "upgd";
  double epsilon = 8.0;  // /255 units
  double alpha = 2.0;    // /255 units
  std::optional<int> iterations;
  int batch_size = 256;
  int pgd_steps = 10;
  int patch_side = 3;
  double blend_ratio = 0.2;
};

struct VictimSection : ModelSection {
  bool abi = true;
  double u = 3.0;
  int apply_every = 1;
  std::size_t val_size = 1000;
};

struct DefenseStep {
  std::string name;
  double u = 3.0;
  int epochs = 20;
  double lr = 0.01;
  double subset_fraction = 0.01;
  std::vector<double> thresholds;
  std::string layer = "layer4";
  double eps = 0.3;
  std::uint64_t seed = 0;
};

struct AnalysisSection {
  std::vector<std::string> reports{"tac", "uclc", "decouple", "weights", "features"};
  std::string tac_layer = "layer4";
  std::size_t tac_subset = 256;
  double decouple_fraction = 0.01;
  double decouple_lambda = 0.72;
  int decouple_epochs = 20;
  std::size_t feature_samples = 1000;
};

struct ExperimentConfig {
  std::string output_dir;
  std::uint64_t seed = 0;
  DataSection data;
  ModelSection surrogate;
  TriggerSection trigger;
  data::PoisonPlan poison;
  VictimSection victim;
  std::vector<DefenseStep> defenses;
  AnalysisSection analysis;
  json raw;  // validated input, as given

  /// Canonical form: the input with every default filled in, keys sorted.
  json canonical() const;
};

namespace detail {

template <class T>
void get_to(const json& j, const char* key, T& out) {
  if (j.contains(key) && !j[key].is_null()) out = j[key].get<T>();
}

inline void read_train(const json& j, nn::TrainConfig& t) {
  get_to(j, "lr", t.lr);
  get_to(j, "momentum", t.momentum);
  get_to(j, "weight_decay", t.weight_decay);
  get_to(j, "epochs", t.epochs);
  get_to(j, "milestones", t.milestones);
  get_to(j, "lr_decay", t.lr_decay);
  get_to(j, "batch_size", t.batch_size);
  get_to(j, "augment", t.augment);
}

inline void read_model(const json& j, ModelSection& m) {
  get_to(j, "arch", m.arch);
  get_to(j, "channel_scale", m.channel_scale);
  get_to(j, "widths", m.widths);
  get_to(j, "kernel", m.kernel);
  if (j.contains("train")) read_train(j["train"], m.train);
}

inline json train_json(const nn::TrainConfig& t) {
  return {{"lr", t.lr},           {"momentum", t.momentum},     {"weight_decay", t.weight_decay},
          {"epochs", t.epochs},   {"milestones", t.milestones}, {"lr_decay", t.lr_decay},
          {"batch_size", t.batch_size}, {"augment", t.augment}};
}

inline json model_json(const ModelSection& m) {
  return {{"arch", m.arch},
          {"channel_scale", m.channel_scale},
          {"widths", m.widths},
          {"kernel", m.kernel},
          {"train", train_json(m.train)}};
}

}  // namespace detail

inline json ExperimentConfig::canonical() const {
  json d = {{"dataset", data.dataset},         {"root", data.root},
            {"split_seed", data.split_seed},   {"classes", data.classes},
            {"train_per_class", data.train_per_class}, {"test_per_class", data.test_per_class},
            {"side", data.side}};
  json t = {{"kind", trigger.kind},
            {"epsilon", trigger.epsilon},
            {"alpha", trigger.alpha},
            {"iterations", trigger.iterations ? json(*trigger.iterations) : json()},
            {"batch_size", trigger.batch_size},
            {"pgd_steps", trigger.pgd_steps},
            {"patch_side", trigger.patch_side},
            {"blend_ratio", trigger.blend_ratio}};
  json p = {{"target", poison.target_class},
            {"rate", poison.rate},
            {"label_mode", data::to_string(poison.label_mode)}};
  json v = detail::model_json(victim);
  v["abi"] = victim.abi;
  v["u"] = victim.u;
  v["apply_every"] = victim.apply_every;
  v["val_size"] = victim.val_size;
  json defs = json::array();
  for (const auto& s : defenses)
    defs.push_back({{"name", s.name},
                    {"u", s.u},
                    {"epochs", s.epochs},
                    {"lr", s.lr},
                    {"subset_fraction", s.subset_fraction},
                    {"thresholds", s.thresholds},
                    {"layer", s.layer},
                    {"eps", s.eps},
                    {"seed", s.seed}});
  json a = {{"reports", analysis.reports},
            {"tac_layer", analysis.tac_layer},
            {"tac_subset", analysis.tac_subset},
            {"decouple_fraction", analysis.decouple_fraction},
            {"decouple_lambda", analysis.decouple_lambda},
            {"decouple_epochs", analysis.decouple_epochs},
            {"feature_samples", analysis.feature_samples}};
  // output_dir is deliberately left out: it names where results go, not what they are.
  return {{"seed", seed},     {"data", d},       {"surrogate", detail::model_json(surrogate)},
          {"trigger", t},     {"poison", p},     {"victim", v},
          {"defenses", defs}, {"analysis", a}};
}

/// Parses and validates a config document. Cross-field checks (milestones
/// below epochs, target below class count) run here too, before any compute.
inline ExperimentConfig parse_config(const json& j, const json& schema) {
  SchemaValidator(schema).validate(j);
  ExperimentConfig c;
  c.raw = j;
  c.output_dir = j.at("output_dir").get<std::string>();
  detail::get_to(j, "seed", c.seed);

  c.surrogate.train.seed = derive_seed(c.seed, 1);
  c.victim.train.seed = derive_seed(c.seed, 2);

  if (j.contains("data")) {
    const auto& d = j["data"];
    detail::get_to(d, "dataset", c.data.dataset);
    detail::get_to(d, "root", c.data.root);
    detail::get_to(d, "split_seed", c.data.split_seed);
    detail::get_to(d, "classes", c.data.classes);
    detail::get_to(d, "train_per_class", c.data.train_per_class);
    detail::get_to(d, "test_per_class", c.data.test_per_class);
    detail::get_to(d, "side", c.data.side);
  }
  if (c.data.dataset == "cifar10") {
    c.data.classes = 10;
    c.data.side = 32;
  }
  if (j.contains("surrogate")) detail::read_model(j["surrogate"], c.surrogate);
  if (j.contains("trigger")) {
    const auto& t = j["trigger"];
    detail::get_to(t, "kind", c.trigger.kind);
    detail::get_to(t, "epsilon", c.trigger.epsilon);
    detail::get_to(t, "alpha", c.trigger.alpha);
    if (t.contains("iterations") && !t["iterations"].is_null())
      c.trigger.iterations = t["iterations"].get<int>();
    detail::get_to(t, "batch_size", c.trigger.batch_size);
    detail::get_to(t, "pgd_steps", c.trigger.pgd_steps);
    detail::get_to(t, "patch_side", c.trigger.patch_side);
    detail::get_to(t, "blend_ratio", c.trigger.blend_ratio);
  }
  c.poison.seed = derive_seed(c.seed, 3);
  if (j.contains("poison")) {
    const auto& p = j["poison"];
    detail::get_to(p, "target", c.poison.target_class);
    detail::get_to(p, "rate", c.poison.rate);
    if (p.contains("label_mode")) c.poison.label_mode = data::label_mode_from_string(p["label_mode"]);
  }
  // Victim defaults: 200 epochs, steps at 100 and 150.
  if (j.contains("victim")) {
    const auto& v = j["victim"];
    detail::read_model(v, c.victim);
    detail::get_to(v, "abi", c.victim.abi);
    detail::get_to(v, "u", c.victim.u);
    detail::get_to(v, "apply_every", c.victim.apply_every);
    detail::get_to(v, "val_size", c.victim.val_size);
  }
  if (j.contains("defenses"))
    for (const auto& s : j["defenses"]) {
      DefenseStep d;
      detail::get_to(s, "name", d.name);
      detail::get_to(s, "u", d.u);
      detail::get_to(s, "epochs", d.epochs);
      detail::get_to(s, "lr", d.lr);
      detail::get_to(s, "subset_fraction", d.subset_fraction);
      detail::get_to(s, "thresholds", d.thresholds);
      detail::get_to(s, "layer", d.layer);
      detail::get_to(s, "eps", d.eps);
      detail::get_to(s, "seed", d.seed);
      if (d.name == "tac" && d.thresholds.empty())
        throw ConfigError("config.defenses: tac needs a non-empty 'thresholds' list");
      c.defenses.push_back(d);
    }
  if (j.contains("analysis")) {
    const auto& a = j["analysis"];
    detail::get_to(a, "reports", c.analysis.reports);
    detail::get_to(a, "tac_layer", c.analysis.tac_layer);
    detail::get_to(a, "tac_subset", c.analysis.tac_subset);
    detail::get_to(a, "decouple_fraction", c.analysis.decouple_fraction);
    detail::get_to(a, "decouple_lambda", c.analysis.decouple_lambda);
    detail::get_to(a, "decouple_epochs", c.analysis.decouple_epochs);
    detail::get_to(a, "feature_samples", c.analysis.feature_samples);
  }

  c.surrogate.train.validate();
  c.victim.train.validate();
  if (c.poison.target_class >= c.data.classes)
    throw ConfigError("config.poison.target: " + std::to_string(c.poison.target_class) +
                      " is not below the class count " + std::to_string(c.data.classes));
  if (c.trigger.epsilon > 0 && c.trigger.alpha > c.trigger.epsilon)
    throw ConfigError("config.trigger.alpha: step must not exceed epsilon");
  return c;
}

inline json read_json_file(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot open '" + p.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("'" + p.string() + "' is not valid JSON: " + e.what());
  }
}

}  // namespace grond::cli
