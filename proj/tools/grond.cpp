// grond: command-line front end for the attack/defense lab.
#include <CLI11.hpp>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "config.hpp"
#include "config_schema.hpp"
#include "grond/grond.hpp"
#include "manifest.hpp"

namespace grond::cli {
namespace {

enum class Existing { Refuse, Resume, Overwrite };

struct Globals {
  std::string config_path;
  std::string output_dir;
  bool resume = false;
  bool overwrite = false;
  int jobs = 1;
  std::string log_level = "info";
};

void write_json(const fs::path& p, const json& j) {
  std::ofstream out(p);
  if (!out) throw IoError("cannot write '" + p.string() + "'");
  out << j.dump(2) << '\n';
  if (!out) throw IoError("write failed for '" + p.string() + "'");
}

json load_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot open '" + p.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError("'" + p.string() + "' is not valid JSON", 0);
  }
}

std::string tag_of(const std::string& s) {
  std::string out;
  for (char c : s) out += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '.') ? c : '_';
  return out;
}

/// Everything a command needs: parsed config, run manifest, datasets.
class Session {
 public:
  explicit Session(const Globals& g) : g_(g) {
    if (g.config_path.empty()) throw ConfigError("--config is required");
    cfg_ = parse_config(read_json_file(g.config_path), json::parse(kConfigSchema));
    if (!g.output_dir.empty()) cfg_.output_dir = g.output_dir;
    if (g.resume && g.overwrite) throw ConfigError("--resume and --overwrite are exclusive");
    policy_ = g.resume ? Existing::Resume : (g.overwrite ? Existing::Overwrite : Existing::Refuse);
    hash_ = sha256_hex(cfg_.canonical().dump());
    fs::create_directories(cfg_.output_dir);
    manifest_.emplace(cfg_.output_dir, hash_, cfg_.canonical());
  }

  const ExperimentConfig& cfg() const { return cfg_; }
  RunManifest& manifest() { return *manifest_; }
  const fs::path& dir() const { return manifest_->dir(); }
  int jobs() const { return g_.jobs; }
  const std::string& hash() const { return hash_; }

  /// Whether the command should produce `p`. Existing outputs are refused,
  /// kept (--resume) or removed first (--overwrite).
  bool claim(const fs::path& p) {
    if (!fs::exists(p)) return true;
    switch (policy_) {
      case Existing::Refuse:
        throw IoError("'" + p.string() +
                      "' already exists; pass --resume to keep it or --overwrite to replace it");
      case Existing::Resume:
        log::info("up to date: " + p.string());
        return false;
      case Existing::Overwrite:
        fs::remove_all(p);
        return true;
    }
    return true;
  }

  const data::LabeledDataset& train_set() {
    load();
    return *train_;
  }
  const data::LabeledDataset& test_set() {
    load();
    return *test_;
  }

  std::uint64_t seed(std::uint64_t stream) const { return derive_seed(cfg_.seed, stream); }

 private:
  void load() {
    if (train_) return;
    const auto& d = cfg_.data;
    if (d.dataset == "synthetic") {
      train_ = data::make_synthetic(d.classes, d.train_per_class, d.side, seed(10));
      test_ = data::make_synthetic(d.classes, d.test_per_class, d.side, seed(11), data::Split::Test);
      return;
    }
    std::string root = d.root;
    for (const char* var : {"GROND_DATA_ROOT", "GROND_CIFAR10_ROOT"})
      if (root.empty())
        if (const char* v = std::getenv(var)) root = v;
    if (root.empty())
      throw IngestionError("no CIFAR10 location: set data.root or GROND_DATA_ROOT");
    auto [tr, te] = data::load_cifar10(root);
    train_ = std::move(tr);
    test_ = std::move(te);
  }

  Globals g_;
  ExperimentConfig cfg_;
  Existing policy_ = Existing::Refuse;
  std::string hash_;
  std::optional<RunManifest> manifest_;
  std::optional<data::LabeledDataset> train_, test_;
};

nn::ModelSnapshot build(const ModelSection& m, int classes, const Shape& input, std::uint64_t seed) {
  nn::ArchOptions o;
  o.input_shape = input;
  o.widths = m.widths;
  o.kernel = m.kernel;
  return nn::build_model(m.arch, classes, m.channel_scale, seed, o);
}

nn::ModelSnapshot load_model(const fs::path& p) { return io::load_snapshot(p); }

// ---- trigger plumbing ------------------------------------------------------

struct TriggerOverrides {
  std::string kind;
  std::optional<double> epsilon;  // /255
};

fs::path surrogate_path(Session& s) {
  if (auto p = s.manifest().artifact("surrogate")) return *p;
  throw ConfigError("no surrogate registered in '" + s.dir().string() +
                    "'; run train-surrogate first");
}

triggers::Trigger make_trigger(Session& s, const TriggerOverrides& ov) {
  const auto& c = s.cfg();
  const std::string kind = ov.kind.empty() ? c.trigger.kind : ov.kind;
  const auto k = triggers::trigger_kind_from_string(kind);
  const float eps = static_cast<float>(ov.epsilon.value_or(c.trigger.epsilon) / 255.0);
  const auto& train = s.train_set();
  const std::uint64_t seed = s.seed(4);
  switch (k) {
    case triggers::TriggerKind::Upgd: {
      const auto sp = surrogate_path(s);
      const auto sur = load_model(sp);
      triggers::UpgdConfig u;
      u.epsilon = eps;
      u.step_size = std::min(eps > 0 ? eps : 1.0f, static_cast<float>(c.trigger.alpha / 255.0));
      u.iterations = c.trigger.iterations;
      u.batch_size = c.trigger.batch_size;
      u.target = c.poison.target_class;
      u.seed = seed;
      u.surrogate_ref = fs::relative(sp, s.dir()).generic_string();
      return triggers::generate_upgd(sur, train, u);
    }
    case triggers::TriggerKind::PgdPerSample: {
      triggers::Trigger t;
      t.kind = k;
      t.epsilon = eps;
      t.target = c.poison.target_class;
      t.pgd_steps = c.trigger.pgd_steps;
      t.pgd_alpha = static_cast<float>(c.trigger.alpha / 255.0);
      t.seed = seed;
      t.surrogate_ref = fs::relative(surrogate_path(s), s.dir()).generic_string();
      t.payload = Tensor(train.image_shape());
      return t;
    }
    case triggers::TriggerKind::RandomNoise:
      return triggers::make_noise_trigger(eps, seed, train.image_shape());
    case triggers::TriggerKind::Patch:
      return triggers::make_patch_trigger(c.trigger.patch_side);
    case triggers::TriggerKind::Blend:
      return triggers::make_blend_trigger(static_cast<float>(c.trigger.blend_ratio), seed,
                                          train.image_shape());
  }
  throw ConfigError("unhandled trigger kind");
}

/// Trigger plus the surrogate it may need at application time.
struct LoadedTrigger {
  triggers::Trigger trigger;
  std::shared_ptr<nn::ModelSnapshot> surrogate;
  fs::path path;

  triggers::TriggerApplier applier() const {
    return triggers::TriggerApplier(trigger, surrogate.get());
  }
};

LoadedTrigger load_trigger_for(Session& s, const fs::path& path) {
  LoadedTrigger lt;
  lt.path = path;
  lt.trigger = io::load_trigger(path);
  if (lt.trigger.kind == triggers::TriggerKind::PgdPerSample) {
    const fs::path ref = lt.trigger.surrogate_ref.empty() ? surrogate_path(s)
                                                           : s.dir() / lt.trigger.surrogate_ref;
    lt.surrogate = std::make_shared<nn::ModelSnapshot>(load_model(ref));
  }
  return lt;
}

/// --trigger-dir, else the trigger stored next to the model, else the run's trigger.
fs::path resolve_trigger(Session& s, const std::string& explicit_dir, const fs::path& model) {
  if (!explicit_dir.empty()) return explicit_dir;
  for (fs::path p = model.parent_path(); !p.empty() && p != s.dir() && p != p.parent_path();
       p = p.parent_path())
    if (fs::exists(p / "trigger" / "manifest")) return p / "trigger";
  if (auto p = s.manifest().artifact("trigger")) return *p;
  throw ConfigError("no trigger found; pass --trigger-dir or run gen-trigger");
}

fs::path resolve_model(Session& s, const std::string& explicit_dir, const char* fallback_key) {
  if (!explicit_dir.empty()) return explicit_dir;
  if (auto p = s.manifest().artifact(fallback_key)) return *p;
  throw ConfigError(std::string("no model given and no '") + fallback_key +
                    "' artifact registered; pass --model");
}

std::string model_tag(Session& s, const fs::path& model) {
  std::error_code ec;
  auto rel = fs::relative(model, s.dir(), ec);
  std::string r = (ec || rel.empty() || rel.native().rfind("..", 0) == 0) ? model.filename().string()
                                                                        : rel.generic_string();
  return tag_of(r);
}

data::LabeledDataset subset_fraction(const data::LabeledDataset& d, double fraction,
                                     std::uint64_t seed) {
  const auto n = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(fraction * d.size())));
  return data::sample(d, std::min(n, d.size()), seed);
}

// ---- commands --------------------------------------------------------------

int cmd_train_surrogate(Session& s) {
  const auto out = s.dir() / "surrogate";
  if (!s.claim(out)) return 0;
  const auto& c = s.cfg();
  const auto& train = s.train_set();
  auto model = build(c.surrogate, train.num_classes, train.image_shape(), s.seed(5));
  auto tc = c.surrogate.train;
  tc.seed = s.seed(1);
  if (tc.epochs == 0) log::warn("epochs=0: registering an untrained surrogate");
  s.manifest().begin("train-surrogate", {});
  auto res = nn::train(std::move(model), train, tc);
  io::save_snapshot(res.model, out);
  const double acc = nn::accuracy(res.model, s.test_set());
  json m = {{"clean_accuracy", acc}, {"epochs", tc.epochs}};
  m["history"] = json::array();
  for (const auto& h : res.history)
    m["history"].push_back({{"epoch", h.epoch}, {"loss", h.loss}, {"accuracy", h.accuracy}});
  write_json(s.dir() / "surrogate_metrics.json", m);
  s.manifest().add("surrogate", out);
  s.manifest().add("surrogate_metrics", s.dir() / "surrogate_metrics.json");
  s.manifest().commit();
  std::cout << json{{"surrogate", out.string()}, {"clean_accuracy", acc}}.dump() << '\n';
  return 0;
}

int cmd_gen_trigger(Session& s, const TriggerOverrides& ov) {
  const auto out = s.dir() / "trigger";
  if (!s.claim(out)) return 0;
  s.manifest().begin("gen-trigger", {{"kind", ov.kind}, {"epsilon", ov.epsilon ? json(*ov.epsilon) : json()}});
  auto t = make_trigger(s, ov);
  io::save_trigger(t, out);
  s.manifest().add("trigger", out);
  s.manifest().commit({{"trigger_id", t.id()}});
  std::cout << json{{"trigger", out.string()}, {"id", t.id()}}.dump() << '\n';
  return 0;
}

struct AttackArgs {
  bool no_abi = false;
  TriggerOverrides trigger;
  std::string name;
};

int cmd_attack(Session& s, const AttackArgs& a) {
  const auto& c = s.cfg();
  std::string variant = a.name;
  if (variant.empty()) {
    variant = "grond";
    if (a.no_abi || !c.victim.abi) variant += "-noabi";
    if (!a.trigger.kind.empty()) variant += "-" + a.trigger.kind;
    if (a.trigger.epsilon) {
      std::ostringstream e;
      e << *a.trigger.epsilon;
      variant += "-eps" + e.str();
    }
  }
  const auto out = s.dir() / "attack" / tag_of(variant);
  if (!s.claim(out)) return 0;
  fs::create_directories(out);
  s.manifest().begin("attack", {{"variant", variant}, {"no_abi", a.no_abi}});

  // Trigger: the run's trigger unless this attack overrides kind or budget.
  triggers::Trigger trig;
  const bool fresh = !a.trigger.kind.empty() || a.trigger.epsilon ||
                     !s.manifest().artifact("trigger");
  if (fresh) {
    trig = make_trigger(s, a.trigger);
  } else {
    trig = io::load_trigger(*s.manifest().artifact("trigger"));
  }
  io::save_trigger(trig, out / "trigger");
  const auto lt = load_trigger_for(s, out / "trigger");
  const auto applier = lt.applier();

  abi::GrondOptions o;
  o.victim.arch = c.victim.arch;
  o.victim.channel_scale = c.victim.channel_scale;
  o.victim.seed = s.seed(6);
  o.victim.options.widths = c.victim.widths;
  o.victim.options.kernel = c.victim.kernel;
  o.train = c.victim.train;
  o.train.seed = s.seed(2);
  if (a.no_abi || !c.victim.abi) {
    o.abi.reset();
  } else {
    o.abi = abi::AbiConfig{};
    o.abi->u = c.victim.u;
    o.abi->apply_every = c.victim.apply_every;
  }
  o.val_size = c.victim.val_size;
  o.split_seed = c.data.split_seed;
  o.jobs = s.jobs();
  auto plan = c.poison;
  auto r = abi::run_grond(s.train_set(), s.test_set(), applier, plan, o);

  io::save_snapshot(r.model, out / "model");
  json m = r.metrics.to_json();
  m["selected_epoch"] = r.selected_epoch;
  m["abi"] = o.abi.has_value();
  m["u"] = o.abi ? json(o.abi->u) : json();
  m["trigger_id"] = r.trigger_ref;
  m["poisoned"] = r.poisoned_indices.size();
  m["abi_replacements"] = r.abi_report.entries.size();
  write_json(out / "metrics.json", m);
  {
    std::ofstream e(out / "epochs.csv");
    e << "epoch,train_loss,val_ba,val_asr\n";
    for (const auto& em : r.epochs)
      e << em.epoch << ',' << em.train_loss << ',' << em.val_ba << ',' << em.val_asr << '\n';
  }
  r.abi_report.write_csv((out / "abi_report.csv").string());
  {
    std::ofstream p(out / "poisoned_indices.txt");
    for (auto i : r.poisoned_indices) p << i << '\n';
  }
  auto& mf = s.manifest();
  mf.add("attack_model", out / "model");
  mf.add("attack_trigger", out / "trigger");
  mf.add("attack_metrics", out / "metrics.json");
  mf.add("attack_epochs", out / "epochs.csv");
  mf.add("abi_report", out / "abi_report.csv");
  mf.add("poisoned_indices", out / "poisoned_indices.txt");
  mf.commit({{"metrics", m}});
  std::cout << m.dump() << '\n';
  return 0;
}

struct DefendArgs {
  std::string model, trigger_dir, tag;
  std::vector<DefenseStep> steps;  // from the command line; empty = config
};

int cmd_defend(Session& s, const DefendArgs& a) {
  const auto& c = s.cfg();
  auto steps = a.steps.empty() ? c.defenses : a.steps;
  if (steps.empty()) throw ConfigError("no defenses given on the command line or in config.defenses");
  const fs::path model_path = resolve_model(s, a.model, "attack_model");
  std::string tag = a.tag;
  if (tag.empty()) {
    tag = model_tag(s, model_path);
    for (const auto& st : steps) tag += "+" + st.name;
  }
  const auto out = s.dir() / "defend" / tag_of(tag);
  if (!s.claim(out)) return 0;
  fs::create_directories(out);
  auto model = load_model(model_path);
  const auto lt = load_trigger_for(s, resolve_trigger(s, a.trigger_dir, model_path));
  const auto applier = lt.applier();
  const auto& test = s.test_set();
  defenses::EvalContext ctx{&test, &applier, c.poison.target_class, s.jobs()};

  s.manifest().begin("defend", {{"model", model_path.string()}, {"steps", steps.size()}});
  json chain = json::array();
  for (std::size_t i = 0; i < steps.size(); ++i) {
    const auto& st = steps[i];
    const auto step_dir = out / (std::to_string(i) + "-" + st.name);
    fs::create_directories(step_dir);
    defenses::DefenseReport rep;
    if (st.name == "clp") {
      std::tie(model, rep) = defenses::clp_defense(std::move(model), st.u, &ctx);
    } else if (st.name == "ft") {
      defenses::FinetuneConfig fc;
      fc.epochs = st.epochs;
      fc.lr = st.lr;
      fc.seed = s.seed(20 + i);
      auto sub = subset_fraction(s.train_set(), st.subset_fraction, s.seed(30 + i));
      std::tie(model, rep) = defenses::vanilla_finetune(std::move(model), sub, fc, &ctx);
    } else if (st.name == "tac") {
      auto sub = data::sample(s.train_set(), std::min(c.analysis.tac_subset, s.train_set().size()),
                              s.seed(40 + i));
      auto sweep = defenses::tac_prune(model, applier, sub, st.thresholds, st.layer, &ctx);
      defenses::write_sweep_csv(sweep, (step_dir / "sweep.csv").string());
      s.manifest().add("defend_" + std::to_string(i) + "_sweep", step_dir / "sweep.csv");
      json all = json::array();
      for (const auto& e : sweep) all.push_back(e.report.to_json());
      write_json(step_dir / "sweep.json", all);
      // The chain continues from the last threshold listed.
      model = std::move(sweep.back().model);
      rep = std::move(sweep.back().report);
    } else if (st.name == "noise") {
      std::tie(model, rep) = defenses::neuron_noise(std::move(model), st.eps, st.seed, &ctx);
    } else {
      throw ConfigError("unknown defense '" + st.name + "'");
    }
    io::save_snapshot(model, step_dir / "model");
    write_json(step_dir / "report.json", rep.to_json());
    s.manifest().add("defend_" + std::to_string(i) + "_model", step_dir / "model");
    s.manifest().add("defend_" + std::to_string(i) + "_report", step_dir / "report.json");
    chain.push_back(rep.to_json());
    log::info(st.name + ": BA " + std::to_string(rep.ba_after.value_or(-1)) + " ASR " +
              std::to_string(rep.asr_after.value_or(-1)));
  }
  write_json(out / "chain.json", chain);
  s.manifest().add("defended_model", out / (std::to_string(steps.size() - 1) + "-" + steps.back().name) / "model");
  s.manifest().add("defend_chain", out / "chain.json");
  s.manifest().commit();
  std::cout << chain.dump() << '\n';
  return 0;
}

struct AnalyzeArgs {
  std::string model, trigger_dir, tag;
  std::vector<std::string> reports;  // empty = config
  bool sorted = false;
  std::string layer;
  std::optional<double> lambda;
  std::optional<int> epochs;
  std::optional<double> lr;
  std::optional<double> fraction;
  std::string before;
  std::optional<std::size_t> samples;
};

int cmd_analyze(Session& s, const AnalyzeArgs& a) {
  const auto& c = s.cfg();
  const auto reports = a.reports.empty() ? c.analysis.reports : a.reports;
  const fs::path model_path = resolve_model(s, a.model, "attack_model");
  const auto out = s.dir() / "analysis" / (a.tag.empty() ? model_tag(s, model_path) : tag_of(a.tag));
  fs::create_directories(out);
  const auto model = load_model(model_path);
  s.manifest().begin("analyze", {{"model", model_path.string()}, {"reports", reports}});
  std::optional<LoadedTrigger> lt;
  auto trigger = [&]() -> const LoadedTrigger& {
    if (!lt) lt = load_trigger_for(s, resolve_trigger(s, a.trigger_dir, model_path));
    return *lt;
  };
  json summary = json::object();
  for (const auto& r : reports) {
    if (r == "tac") {
      const auto file = out / (a.sorted ? "tac_sorted.csv" : "tac.csv");
      if (!s.claim(file)) continue;
      const std::string layer = a.layer.empty() ? c.analysis.tac_layer : a.layer;
      auto sub = data::sample(s.train_set(), std::min(c.analysis.tac_subset, s.train_set().size()),
                              s.seed(50));
      const auto applier = trigger().applier();
      auto t = analysis::compute_tac(model, sub, applier, layer);
      t.write_csv(file.string(), a.sorted);
      s.manifest().add("analysis_tac", file);
      const auto& l = t.layers.front();
      summary["tac"] = {{"layer", l.layer}, {"max", *std::max_element(l.scores.begin(), l.scores.end())},
                        {"mean", l.mean}, {"std", l.std}, {"above_3std", l.above(3.0).size()}};
    } else if (r == "uclc") {
      const auto file = out / (a.sorted ? "uclc_sorted.csv" : "uclc.csv");
      if (!s.claim(file)) continue;
      abi::compute_uclc(model).write_csv(file.string(), a.sorted);
      s.manifest().add("analysis_uclc", file);
    } else if (r == "decouple") {
      const auto file = out / "decouple.json";
      if (!s.claim(file)) continue;
      analysis::DecoupleConfig dc;
      dc.lambda = a.lambda.value_or(c.analysis.decouple_lambda);
      dc.epochs = a.epochs.value_or(c.analysis.decouple_epochs);
      if (a.lr) dc.lr = *a.lr;
      dc.seed = s.seed(60);
      auto sub = subset_fraction(s.train_set(), a.fraction.value_or(c.analysis.decouple_fraction),
                                 s.seed(61));
      auto fm = analysis::feature_decouple(model, sub, dc);
      json j = {{"benign_loss", fm.benign_loss}, {"backdoor_loss", fm.backdoor_loss},
                {"objective", fm.objective},     {"lambda", fm.lambda},
                {"subset_size", sub.size()},     {"objective_trace", fm.objective_trace}};
      j["mask"] = std::vector<float>(fm.m.values().begin(), fm.m.values().end());
      write_json(file, j);
      s.manifest().add("analysis_decouple", file);
      summary["decouple"] = {{"benign_loss", fm.benign_loss}, {"backdoor_loss", fm.backdoor_loss}};
    } else if (r == "weights") {
      if (a.before.empty()) {
        log::warn("weights: no --before snapshot given, skipped");
        continue;
      }
      const auto file = out / "weight_changes.csv";
      if (!s.claim(file)) continue;
      auto v = analysis::weight_change_report(load_model(a.before), model, a.layer);
      analysis::write_weight_changes(analysis::sorted_by_delta(std::move(v)), file.string());
      s.manifest().add("analysis_weights", file);
    } else if (r == "features") {
      const auto file = out / "features.csv";
      if (!s.claim(file)) continue;
      const auto& test = s.test_set();
      const std::size_t n = std::min(a.samples.value_or(c.analysis.feature_samples), test.size());
      auto clean = data::sample(test, n, s.seed(70));
      // Clean rows, then triggered copies of the non-target ones.
      std::vector<std::size_t> others;
      for (std::size_t i = 0; i < clean.size(); ++i)
        if (clean.labels[i] != c.poison.target_class) others.push_back(i);
      auto trig = data::subset(clean, others, clean.split);
      trig.images = trigger().applier().apply_batch(trig.images);
      data::LabeledDataset all = clean;
      {
        Shape sh = clean.images.shape();
        sh[0] = static_cast<int>(clean.size() + trig.size());
        std::vector<float> buf(clean.images.values().begin(), clean.images.values().end());
        buf.insert(buf.end(), trig.images.values().begin(), trig.images.values().end());
        all.images = Tensor(sh, std::move(buf));
      }
      all.labels.insert(all.labels.end(), trig.labels.begin(), trig.labels.end());
      std::vector<bool> flags(clean.size(), false);
      flags.resize(all.labels.size(), true);
      analysis::export_features(model, all, flags, a.layer.empty() ? "pre_head" : a.layer,
                                file.string());
      s.manifest().add("analysis_features", file);
    } else {
      throw ConfigError("unknown analysis report '" + r + "'");
    }
  }
  s.manifest().commit({{"summary", summary}});
  std::cout << summary.dump() << '\n';
  return 0;
}

struct EvaluateArgs {
  std::string model, trigger_dir, tag;
};

int cmd_evaluate(Session& s, const EvaluateArgs& a) {
  const fs::path model_path = resolve_model(s, a.model, "attack_model");
  const auto file = s.dir() / "eval" / ((a.tag.empty() ? model_tag(s, model_path) : tag_of(a.tag)) + ".json");
  if (!s.claim(file)) return 0;
  fs::create_directories(file.parent_path());
  const auto lt = load_trigger_for(s, resolve_trigger(s, a.trigger_dir, model_path));
  s.manifest().begin("evaluate", {{"model", model_path.string()}});
  auto m = analysis::evaluate(load_model(model_path), s.test_set(), lt.applier(),
                              s.cfg().poison.target_class, s.jobs());
  json j = m.to_json();
  j["model"] = model_path.string();
  j["trigger"] = lt.path.string();
  write_json(file, j);
  s.manifest().add("eval", file);
  s.manifest().commit();
  std::cout << j.dump() << '\n';
  return 0;
}

std::string fmt2(const json& v) {
  if (!v.is_number()) return "-";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v.get<double>());
  return buf;
}

int cmd_report(Session& s) {
  const auto md = s.dir() / "report.md";
  const auto js = s.dir() / "report.json";
  if (!s.claim(md) || !s.claim(js)) return 0;
  const auto& dir = s.dir();
  json rep = {{"config_hash", s.hash()}, {"code_version", GROND_GIT_DESCRIBE}};
  std::ostringstream o;
  o << "# Run report\n\nconfig hash `" << s.hash() << "`\n\n";
  if (fs::exists(dir / "surrogate_metrics.json")) {
    auto m = load_json(dir / "surrogate_metrics.json");
    rep["surrogate"] = {{"clean_accuracy", m["clean_accuracy"]}};
    o << "## Surrogate\n\nclean accuracy " << fmt2(m["clean_accuracy"]) << "%\n\n";
  }
  if (fs::exists(dir / "attack")) {
    o << "## Attacks\n\n| variant | ABI | BA | ASR | replaced kernels |\n|---|---|---|---|---|\n";
    std::vector<fs::path> vs;
    for (const auto& e : fs::directory_iterator(dir / "attack")) vs.push_back(e.path());
    std::sort(vs.begin(), vs.end());
    for (const auto& v : vs) {
      if (!fs::exists(v / "metrics.json")) continue;
      auto m = load_json(v / "metrics.json");
      rep["attacks"][v.filename().string()] = m;
      o << "| " << v.filename().string() << " | " << (m.value("abi", false) ? "yes" : "no") << " | "
        << fmt2(m["ba"]) << " | " << fmt2(m["asr"]) << " | " << m.value("abi_replacements", 0) << " |\n";
    }
    o << '\n';
  }
  if (fs::exists(dir / "defend")) {
    o << "## Defenses\n\n| chain | step | BA before | ASR before | BA after | ASR after | channels |\n"
         "|---|---|---|---|---|---|---|\n";
    std::vector<fs::path> cs;
    for (const auto& e : fs::directory_iterator(dir / "defend")) cs.push_back(e.path());
    std::sort(cs.begin(), cs.end());
    for (const auto& cdir : cs) {
      if (!fs::exists(cdir / "chain.json")) continue;
      auto chain = load_json(cdir / "chain.json");
      rep["defenses"][cdir.filename().string()] = chain;
      for (const auto& r : chain)
        o << "| " << cdir.filename().string() << " | " << r["defense_id"].get<std::string>() << " | "
          << fmt2(r["ba_before"]) << " | " << fmt2(r["asr_before"]) << " | " << fmt2(r["ba_after"])
          << " | " << fmt2(r["asr_after"]) << " | " << r["pruned_or_noised"].size() << " |\n";
    }
    o << '\n';
  }
  if (fs::exists(dir / "analysis")) {
    o << "## Analysis\n\n";
    for (const auto& e : fs::directory_iterator(dir / "analysis")) {
      if (fs::exists(e.path() / "decouple.json")) {
        auto d = load_json(e.path() / "decouple.json");
        rep["decouple"][e.path().filename().string()] = {{"benign_loss", d["benign_loss"]},
                                                         {"backdoor_loss", d["backdoor_loss"]}};
        o << "- " << e.path().filename().string() << ": benign feature loss "
          << fmt2(d["benign_loss"]) << ", backdoor feature loss " << fmt2(d["backdoor_loss"]) << '\n';
      }
    }
    o << '\n';
  }
  if (fs::exists(dir / "eval")) {
    o << "## Evaluations\n\n| model | BA | ASR |\n|---|---|---|\n";
    for (const auto& e : fs::directory_iterator(dir / "eval")) {
      auto m = load_json(e.path());
      rep["evaluations"][e.path().stem().string()] = m;
      o << "| " << e.path().stem().string() << " | " << fmt2(m["ba"]) << " | " << fmt2(m["asr"]) << " |\n";
    }
  }
  s.manifest().begin("report", {});
  {
    std::ofstream f(md);
    if (!f) throw IoError("cannot write '" + md.string() + "'");
    f << o.str();
  }
  write_json(js, rep);
  s.manifest().add("report_md", md);
  s.manifest().add("report_json", js);
  s.manifest().commit();
  std::cout << o.str();
  return 0;
}

}  // namespace

int run(int argc, char** argv) {
  CLI::App app{"grond: backdoor attack and defense lab"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("-c,--config", g.config_path, "Experiment config (JSON)");
  app.add_option("-o,--output-dir", g.output_dir, "Override config.output_dir");
  app.add_flag("--resume", g.resume, "Keep existing outputs and skip finished work");
  app.add_flag("--overwrite", g.overwrite, "Replace existing outputs");
  app.add_option("-j,--jobs", g.jobs, "Worker cap for evaluation")->check(CLI::PositiveNumber);
  app.add_option("--log-level", g.log_level, "debug|info|warn|error|off")
      ->check(CLI::IsMember({"debug", "info", "warn", "error", "off"}));

  auto* ts = app.add_subcommand("train-surrogate", "Train the clean surrogate model");

  TriggerOverrides gen_ov;
  double gen_eps = -1;
  auto* gt = app.add_subcommand("gen-trigger", "Generate the trigger from the surrogate");
  gt->add_option("--kind", gen_ov.kind, "upgd|pgd_per_sample|random_noise|patch|blend");
  gt->add_option("--epsilon", gen_eps, "Budget in /255 units")->check(CLI::Range(0.0, 255.0));

  AttackArgs atk;
  double atk_eps = -1;
  auto* at = app.add_subcommand("attack", "Poison, train the victim (with ABI) and evaluate");
  at->add_flag("--no-abi", atk.no_abi, "Plain backdoor training without weight injection");
  at->add_option("--trigger", atk.trigger.kind, "Trigger kind override");
  at->add_option("--epsilon", atk_eps, "Trigger budget override in /255 units")
      ->check(CLI::Range(0.0, 255.0));
  at->add_option("--name", atk.name, "Variant name under attack/");

  DefendArgs def;
  auto* df = app.add_subcommand("defend", "Apply a chain of defenses to a model");
  df->add_option("--model", def.model, "Snapshot directory (default: latest attack model)");
  df->add_option("--trigger-dir", def.trigger_dir, "Trigger for before/after metrics");
  df->add_option("--tag", def.tag, "Output name under defend/");
  df->require_subcommand(0, 0);
  DefenseStep clp_s{.name = "clp"}, ft_s{.name = "ft"}, tac_s{.name = "tac"}, noise_s{.name = "noise"};
  auto* clp = df->add_subcommand("clp", "Channel Lipschitzness pruning");
  clp->add_option("--u", clp_s.u, "Threshold in layer std units")->check(CLI::PositiveNumber);
  auto* ft = df->add_subcommand("ft", "Fine-tune on a clean subset");
  ft->add_option("--epochs", ft_s.epochs)->check(CLI::NonNegativeNumber);
  ft->add_option("--lr", ft_s.lr)->check(CLI::PositiveNumber);
  ft->add_option("--fraction", ft_s.subset_fraction, "Share of the training set")
      ->check(CLI::Range(1e-9, 1.0));
  auto* tac = df->add_subcommand("tac", "Prune channels by trigger-activation change");
  tac->add_option("--threshold", tac_s.thresholds, "One or more thresholds")->required();
  tac->add_option("--layer", tac_s.layer);
  auto* noise = df->add_subcommand("noise", "Uniform noise on batch-norm affine parameters");
  noise->add_option("--eps", noise_s.eps)->check(CLI::NonNegativeNumber);
  noise->add_option("--seed", noise_s.seed);
  for (auto* sub : {clp, ft, tac, noise}) sub->fallthrough();

  AnalyzeArgs an;
  double an_lambda = -1, an_lr = -1, an_frac = -1;
  int an_epochs = -1;
  std::size_t an_samples = 0;
  auto* az = app.add_subcommand("analyze", "Diagnostics: tac, uclc, decouple, weights, features");
  az->add_option("--model", an.model, "Snapshot directory (default: latest attack model)");
  az->add_option("--trigger-dir", an.trigger_dir);
  az->add_option("--tag", an.tag, "Output name under analysis/");
  az->require_subcommand(0, 0);
  auto* a_tac = az->add_subcommand("tac", "Per-channel trigger-activation change");
  a_tac->add_flag("--sorted", an.sorted, "Sort each layer by descending score");
  a_tac->add_option("--layer", an.layer);
  auto* a_uclc = az->add_subcommand("uclc", "Per-channel Lipschitz upper bounds");
  a_uclc->add_flag("--sorted", an.sorted);
  auto* a_dec = az->add_subcommand("decouple", "Benign/backdoor feature decoupling");
  a_dec->add_option("--lambda", an_lambda)->check(CLI::NonNegativeNumber);
  a_dec->add_option("--epochs", an_epochs)->check(CLI::NonNegativeNumber);
  a_dec->add_option("--lr", an_lr)->check(CLI::PositiveNumber);
  a_dec->add_option("--fraction", an_frac)->check(CLI::Range(1e-9, 1.0));
  auto* a_w = az->add_subcommand("weights", "Per-channel kernel change against --before");
  a_w->add_option("--before", an.before)->required();
  a_w->add_option("--layer", an.layer);
  auto* a_f = az->add_subcommand("features", "Export pooled features of clean and triggered samples");
  a_f->add_option("--layer", an.layer);
  a_f->add_option("--samples", an_samples)->check(CLI::PositiveNumber);
  for (auto* sub : {a_tac, a_uclc, a_dec, a_w, a_f}) sub->fallthrough();

  EvaluateArgs ev;
  auto* evc = app.add_subcommand("evaluate", "BA/ASR of a snapshot");
  evc->add_option("--model", ev.model);
  evc->add_option("--trigger-dir", ev.trigger_dir);
  evc->add_option("--tag", ev.tag);

  auto* rp = app.add_subcommand("report", "Summarise the run directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  static const std::map<std::string, log::Level> levels{{"debug", log::Level::Debug},
                                                        {"info", log::Level::Info},
                                                        {"warn", log::Level::Warn},
                                                        {"error", log::Level::Error},
                                                        {"off", log::Level::Off}};
  log::set_level(levels.at(g.log_level));

  Session s(g);
  if (ts->parsed()) return cmd_train_surrogate(s);
  if (gt->parsed()) {
    if (gen_eps >= 0) gen_ov.epsilon = gen_eps;
    return cmd_gen_trigger(s, gen_ov);
  }
  if (at->parsed()) {
    if (atk_eps >= 0) atk.trigger.epsilon = atk_eps;
    return cmd_attack(s, atk);
  }
  if (df->parsed()) {
    for (auto* sub : df->get_subcommands()) {
      if (sub == clp) def.steps.push_back(clp_s);
      if (sub == ft) def.steps.push_back(ft_s);
      if (sub == tac) def.steps.push_back(tac_s);
      if (sub == noise) def.steps.push_back(noise_s);
    }
    return cmd_defend(s, def);
  }
  if (az->parsed()) {
    for (auto* sub : az->get_subcommands()) an.reports.push_back(sub->get_name());
    if (an_lambda >= 0) an.lambda = an_lambda;
    if (an_epochs >= 0) an.epochs = an_epochs;
    if (an_lr > 0) an.lr = an_lr;
    if (an_frac > 0) an.fraction = an_frac;
    if (an_samples > 0) an.samples = an_samples;
    return cmd_analyze(s, an);
  }
  if (evc->parsed()) return cmd_evaluate(s, ev);
  if (rp->parsed()) return cmd_report(s);
  return 2;
}

}  // namespace grond::cli

int main(int argc, char** argv) {
  try {
    return grond::cli::run(argc, argv);
  } catch (const grond::Error& e) {
    std::cerr << "grond: " << e.what() << '\n';
    return e.exit_code();
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "grond: config: " << e.what() << '\n';
    return 2;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "grond: " << e.what() << '\n';
    return 5;
  } catch (const std::exception& e) {
    std::cerr << "grond: " << e.what() << '\n';
    return 1;
  }
}
