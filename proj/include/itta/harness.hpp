#pragma once

// Experiment runner: a plan names a suite, a method matrix and a trial count.
// Every (held-out domain, trial) pair is one job; a job trains each distinct
// TrainConfig once, evaluates every method on it and appends one JSON line
// per (method, held-out, trial) cell to the log.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "itta/adapt.hpp"
#include "itta/data.hpp"
#include "itta/train.hpp"

namespace itta {

enum class Protocol { LeaveOneOut, SingleSource };

struct MethodSpec {
  std::string name;
  TrainConfig train;
  AdaptConfig adapt;
};

inline std::vector<MethodSpec> builtin_methods() {
  MethodSpec ours{"ours", {}, {}};
  ours.train.alpha = 1.0;
  ours.adapt.strategy = Strategy::Ada;
  ours.adapt.ttt_steps = 1;
  ours.adapt.mode = AdaptMode::Online;

  MethodSpec no_fw = ours;
  no_fw.name = "ours_no_fw";
  no_fw.train.update_w = false;

  MethodSpec ent = ours;
  ent.name = "ours_ent";
  ent.adapt.objective = AdaptObjective::Entropy;

  MethodSpec rot = ours;
  rot.name = "ours_rot";
  rot.train.aux = AuxTask::Rotation;
  rot.adapt.objective = AdaptObjective::Rotation;

  MethodSpec no_ttt = ours;
  no_ttt.name = "ours_no_ttt";
  no_ttt.adapt.strategy = Strategy::None;
  no_ttt.adapt.ttt_steps = 0;

  MethodSpec all = ours;
  all.name = "ours_all";
  all.adapt.strategy = Strategy::All;

  MethodSpec bn = ours;
  bn.name = "ours_bn";
  bn.adapt.strategy = Strategy::Bn;

  MethodSpec erm = ours;
  erm.name = "erm";
  erm.train.alpha = 0.0;
  erm.train.update_w = false;
  erm.train.augment.kind = AugmentKind::None;
  erm.adapt.strategy = Strategy::None;
  erm.adapt.ttt_steps = 0;

  return {ours, no_fw, ent, rot, no_ttt, all, bn, erm};
}

inline std::optional<MethodSpec> builtin_method(const std::string& name) {
  for (auto& m : builtin_methods())
    if (m.name == name) return m;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Config (de)serialization

inline const char* augment_kind_name(AugmentKind k) {
  switch (k) {
    case AugmentKind::StatMix: return "stat_mix";
    case AugmentKind::Affine: return "affine";
    case AugmentKind::None: return "none";
  }
  return "?";
}

inline AugmentKind parse_augment_kind(const std::string& s) {
  if (s == "stat_mix") return AugmentKind::StatMix;
  if (s == "affine") return AugmentKind::Affine;
  if (s == "none") return AugmentKind::None;
  throw std::invalid_argument("unknown augmentation '" + s + "' (expected stat_mix, affine or none)");
}

inline const char* objective_name(AdaptObjective o) {
  switch (o) {
    case AdaptObjective::Consistency: return "consistency";
    case AdaptObjective::Entropy: return "entropy";
    case AdaptObjective::Rotation: return "rotation";
  }
  return "?";
}

inline AdaptObjective parse_objective(const std::string& s) {
  if (s == "consistency") return AdaptObjective::Consistency;
  if (s == "entropy") return AdaptObjective::Entropy;
  if (s == "rotation") return AdaptObjective::Rotation;
  throw std::invalid_argument("unknown adaptation objective '" + s + "'");
}

namespace detail {

inline void check_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed, const char* what) {
  if (!j.is_object()) throw std::invalid_argument(std::string(what) + ": expected a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* k) { return it.key() == k; }))
      throw std::invalid_argument(std::string(what) + ": unknown key '" + it.key() + "'");
}

inline void apply_augment_json(const nlohmann::json& j, AugmentConfig& a) {
  check_keys(j, {"kind", "mix_alpha", "apply_at_block", "affine_weight_std", "affine_bias_std"}, "augment");
  if (j.contains("kind")) a.kind = parse_augment_kind(j.at("kind").get<std::string>());
  a.mix_alpha = j.value("mix_alpha", a.mix_alpha);
  a.apply_at_block = j.value("apply_at_block", a.apply_at_block);
  a.affine_weight_std = j.value("affine_weight_std", a.affine_weight_std);
  a.affine_bias_std = j.value("affine_bias_std", a.affine_bias_std);
}

inline nlohmann::json augment_json(const AugmentConfig& a) {
  return {{"kind", augment_kind_name(a.kind)},
          {"mix_alpha", a.mix_alpha},
          {"apply_at_block", a.apply_at_block},
          {"affine_weight_std", a.affine_weight_std},
          {"affine_bias_std", a.affine_bias_std}};
}

}  // namespace detail

inline void apply_train_overrides(const nlohmann::json& j, TrainConfig& c) {
  detail::check_keys(j,
                     {"alpha", "lr_model", "lr_w", "batch_size", "steps", "val_fraction", "eval_every", "update_w",
                      "aux", "per_tensor_standardize", "augment", "hidden", "blocks", "weight_layers", "norm"},
                     "train");
  c.alpha = j.value("alpha", c.alpha);
  c.lr_model = j.value("lr_model", c.lr_model);
  c.lr_w = j.value("lr_w", c.lr_w);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.steps = j.value("steps", c.steps);
  c.val_fraction = j.value("val_fraction", c.val_fraction);
  c.eval_every = j.value("eval_every", c.eval_every);
  c.update_w = j.value("update_w", c.update_w);
  if (j.contains("aux")) {
    const auto aux = j.at("aux").get<std::string>();
    if (aux == "consistency") c.aux = AuxTask::Consistency;
    else if (aux == "rotation") c.aux = AuxTask::Rotation;
    else throw std::invalid_argument("unknown auxiliary task '" + aux + "'");
  }
  c.per_tensor_standardize = j.value("per_tensor_standardize", c.per_tensor_standardize);
  if (j.contains("augment")) detail::apply_augment_json(j.at("augment"), c.augment);
  c.model.hidden = j.value("hidden", c.model.hidden);
  c.model.blocks = j.value("blocks", c.model.blocks);
  c.model.weight_layers = j.value("weight_layers", c.model.weight_layers);
  c.model.norm = j.value("norm", c.model.norm);
}

inline nlohmann::json train_json(const TrainConfig& c) {
  return {{"alpha", c.alpha},
          {"lr_model", c.lr_model},
          {"lr_w", c.lr_w},
          {"batch_size", c.batch_size},
          {"steps", c.steps},
          {"seed", c.seed},
          {"val_fraction", c.val_fraction},
          {"eval_every", c.eval_every},
          {"update_w", c.update_w},
          {"aux", c.aux == AuxTask::Rotation ? "rotation" : "consistency"},
          {"per_tensor_standardize", c.per_tensor_standardize},
          {"augment", detail::augment_json(c.augment)},
          {"hidden", c.model.hidden},
          {"blocks", c.model.blocks},
          {"weight_layers", c.model.weight_layers},
          {"norm", c.model.norm}};
}

inline void apply_adapt_overrides(const nlohmann::json& j, AdaptConfig& c) {
  detail::check_keys(j,
                     {"strategy", "mode", "ttt_steps", "lr_adapt", "batch_size", "adaptive_locations",
                      "adapter_layers", "objective", "augment"},
                     "adapt");
  if (j.contains("strategy")) c.strategy = parse_strategy(j.at("strategy").get<std::string>());
  if (j.contains("mode")) {
    const auto mode = j.at("mode").get<std::string>();
    if (mode == "online") c.mode = AdaptMode::Online;
    else if (mode == "episodic") c.mode = AdaptMode::Episodic;
    else throw std::invalid_argument("unknown adaptation mode '" + mode + "'");
  }
  c.ttt_steps = j.value("ttt_steps", c.ttt_steps);
  c.lr_adapt = j.value("lr_adapt", c.lr_adapt);
  c.batch_size = j.value("batch_size", c.batch_size);
  if (j.contains("adaptive_locations")) c.adaptive_locations = j.at("adaptive_locations").get<std::set<std::size_t>>();
  c.adapter_layers = j.value("adapter_layers", c.adapter_layers);
  if (j.contains("objective")) c.objective = parse_objective(j.at("objective").get<std::string>());
  if (j.contains("augment")) detail::apply_augment_json(j.at("augment"), c.augment);
}

inline nlohmann::json adapt_json(const AdaptConfig& c) {
  return {{"strategy", strategy_name(c.strategy)},
          {"mode", c.mode == AdaptMode::Online ? "online" : "episodic"},
          {"ttt_steps", c.ttt_steps},
          {"lr_adapt", c.lr_adapt},
          {"batch_size", c.batch_size},
          {"adaptive_locations", c.adaptive_locations},
          {"adapter_layers", c.adapter_layers},
          {"objective", objective_name(c.objective)},
          {"augment", detail::augment_json(c.augment)},
          {"seed", c.seed}};
}

// ---------------------------------------------------------------------------
// Plan

struct ExperimentPlan {
  std::uint64_t seed = 0;
  std::size_t trials = 5;
  Protocol protocol = Protocol::LeaveOneOut;
  std::optional<std::string> suite_path;
  std::size_t class_count = 4;
  std::vector<DomainSpec> domains = default_domain_specs();
  std::vector<MethodSpec> methods = builtin_methods();
  bool randomize_hparams = false;
  std::size_t workers = 1;
  std::vector<std::string> held_out;  // empty: every domain

  void validate() const {
    if (trials < 1) throw std::invalid_argument("plan: trials must be >= 1");
    if (workers < 1) throw std::invalid_argument("plan: workers must be >= 1");
    if (methods.empty()) throw std::invalid_argument("plan: no methods");
    std::set<std::string> names;
    for (const auto& m : methods) {
      if (!names.insert(m.name).second) throw std::invalid_argument("plan: duplicate method name '" + m.name + "'");
      m.train.validate();
      m.adapt.validate();
    }
    if (!suite_path) {
      if (domains.size() < 2) throw std::invalid_argument("plan: need at least 2 domains");
      std::set<std::string> ids;
      for (const auto& d : domains) {
        d.validate();
        if (!ids.insert(d.domain_id).second) throw std::invalid_argument("plan: duplicate domain '" + d.domain_id + "'");
      }
    }
  }
};

// Method entries are either builtin names or objects
// {"name", "base" (builtin, defaults to name), "train": {...}, "adapt": {...}}.
// Top-level "train"/"adapt" objects apply to every method; a method's own
// overrides are applied after them.
inline ExperimentPlan parse_plan(const nlohmann::json& j) {
  detail::check_keys(j,
                     {"seed", "trials", "protocol", "suite", "methods", "train", "adapt", "randomize_hparams", "workers",
                      "held_out"},
                     "plan");
  ExperimentPlan plan;
  plan.seed = j.value("seed", plan.seed);
  plan.trials = j.value("trials", plan.trials);
  plan.randomize_hparams = j.value("randomize_hparams", plan.randomize_hparams);
  plan.workers = j.value("workers", plan.workers);
  if (j.contains("held_out")) plan.held_out = j.at("held_out").get<std::vector<std::string>>();
  const auto protocol = j.value("protocol", std::string("leave_one_out"));
  if (protocol == "leave_one_out") plan.protocol = Protocol::LeaveOneOut;
  else if (protocol == "single_source") plan.protocol = Protocol::SingleSource;
  else throw std::invalid_argument("plan: unknown protocol '" + protocol + "'");

  if (j.contains("suite")) {
    const auto& s = j.at("suite");
    detail::check_keys(s, {"path", "class_count", "domains", "n_samples"}, "suite");
    if (s.contains("path")) plan.suite_path = s.at("path").get<std::string>();
    plan.class_count = s.value("class_count", plan.class_count);
    if (s.contains("domains")) plan.domains = s.at("domains").get<std::vector<DomainSpec>>();
    else if (s.contains("n_samples")) plan.domains = default_domain_specs(s.at("n_samples").get<std::size_t>());
  }

  const nlohmann::json common_train = j.value("train", nlohmann::json::object());
  const nlohmann::json common_adapt = j.value("adapt", nlohmann::json::object());
  if (j.contains("methods")) {
    plan.methods.clear();
    for (const auto& entry : j.at("methods")) {
      std::string name, base;
      nlohmann::json train = nlohmann::json::object(), adapt = nlohmann::json::object();
      if (entry.is_string()) {
        name = base = entry.get<std::string>();
      } else {
        detail::check_keys(entry, {"name", "base", "train", "adapt"}, "method");
        name = entry.at("name").get<std::string>();
        base = entry.value("base", name);
        train = entry.value("train", train);
        adapt = entry.value("adapt", adapt);
      }
      auto spec = builtin_method(base);
      if (!spec) throw std::invalid_argument("plan: unknown builtin method '" + base + "'");
      spec->name = name;
      apply_train_overrides(common_train, spec->train);
      apply_adapt_overrides(common_adapt, spec->adapt);
      apply_train_overrides(train, spec->train);
      apply_adapt_overrides(adapt, spec->adapt);
      plan.methods.push_back(std::move(*spec));
    }
  } else {
    for (auto& m : plan.methods) {
      apply_train_overrides(common_train, m.train);
      apply_adapt_overrides(common_adapt, m.adapt);
    }
  }
  plan.validate();
  return plan;
}

inline ExperimentPlan load_plan(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open plan '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("plan '" + path + "' is not valid JSON: " + e.what());
  }
  return parse_plan(j);
}

inline DomainSuite plan_suite(const ExperimentPlan& plan) {
  if (plan.suite_path) return load_suite(*plan.suite_path);
  return generate_suite(plan.class_count, plan.domains, mix_seed(plan.seed, 0xda7a));
}

inline std::vector<std::string> held_out_ids(const ExperimentPlan& plan, const DomainSuite& suite) {
  if (plan.held_out.empty()) return suite.domain_ids();
  for (const auto& id : plan.held_out) suite.domain(id);
  return plan.held_out;
}

inline DomainSuite protocol_view(const ExperimentPlan& plan, const DomainSuite& suite, const std::string& held_out) {
  return plan.protocol == Protocol::LeaveOneOut ? leave_one_out(suite, held_out) : single_source(suite, held_out);
}

inline std::uint64_t trial_seed(std::uint64_t plan_seed, std::size_t trial) { return mix_seed(plan_seed, trial); }

// Configs for one cell. Seeds depend on (plan seed, trial, held-out index),
// never on the method, so methods with equal TrainConfigs share a checkpoint.
inline MethodSpec cell_config(const ExperimentPlan& plan, const MethodSpec& method, std::size_t held_out_index,
                              std::size_t trial) {
  MethodSpec m = method;
  const std::uint64_t ts = trial_seed(plan.seed, trial);
  if (plan.randomize_hparams) {
    std::mt19937_64 rng(mix_seed(ts, 0x4a7));
    std::uniform_real_distribution<double> decades(-0.5, 0.5);
    const double f_model = std::pow(10.0, decades(rng));
    const double f_adapt = std::pow(10.0, decades(rng));
    m.train.lr_model *= f_model;
    m.adapt.lr_adapt *= f_adapt;
  }
  m.train.seed = mix_seed(ts, held_out_index);
  m.adapt.seed = mix_seed(m.train.seed, 0xada);
  return m;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// ---------------------------------------------------------------------------
// Log

struct CellKey {
  std::string method;
  std::string held_out;
  std::size_t trial = 0;
  auto operator<=>(const CellKey&) const = default;
};

inline CellKey cell_key(const nlohmann::json& rec) {
  return {rec.at("method").get<std::string>(), rec.at("held_out").get<std::string>(),
          rec.at("trial").get<std::size_t>()};
}

// Reads a JSON-lines log; a torn final line (interrupted write) is ignored.
// Later duplicates of a cell are dropped.
inline std::vector<nlohmann::json> read_log(const std::string& path) {
  std::vector<nlohmann::json> out;
  std::ifstream in(path);
  if (!in) return out;
  std::set<CellKey> seen;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
      if (!seen.insert(cell_key(rec)).second) continue;
    } catch (const std::exception&) {
      continue;
    }
    out.push_back(std::move(rec));
  }
  return out;
}

class LogWriter {
 public:
  explicit LogWriter(const std::string& path) {
    bool torn = false;
    {
      std::ifstream in(path, std::ios::binary | std::ios::ate);
      if (in && in.tellg() > 0) {
        in.seekg(-1, std::ios::end);
        torn = in.get() != '\n';
      }
    }
    out_.open(path, std::ios::app);
    if (!out_) throw std::runtime_error("cannot open log '" + path + "' for appending");
    // Terminate a torn last line so the next record starts on its own line.
    if (torn) out_ << '\n';
  }
  void write(const nlohmann::json& rec) {
    std::lock_guard lock(mu_);
    out_ << rec.dump() << '\n';
    out_.flush();
  }

 private:
  std::mutex mu_;
  std::ofstream out_;
};

// ---------------------------------------------------------------------------
// Result table

struct TableCell {
  std::string method;
  std::string domain;
  std::vector<double> values;  // one per trial
  bool valid = false;
  double mean = 0.0;
  double std = 0.0;
};

struct ResultTable {
  std::vector<std::string> methods;
  std::vector<std::string> domains;
  std::size_t trials = 0;
  std::vector<TableCell> cells;  // methods x domains, row-major
  std::vector<TableCell> macro;  // per method, over per-trial domain averages

  const TableCell& cell(const std::string& method, const std::string& domain) const {
    for (const auto& c : cells)
      if (c.method == method && c.domain == domain) return c;
    throw std::out_of_range("no table cell for " + method + "/" + domain);
  }
  const TableCell& macro_of(const std::string& method) const {
    for (const auto& c : macro)
      if (c.method == method) return c;
    throw std::out_of_range("no macro average for " + method);
  }
  bool all_valid() const {
    return std::all_of(cells.begin(), cells.end(), [](const TableCell& c) { return c.valid; });
  }
};

inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

inline double population_std(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size()));
}

// Rows and columns are sorted by name so the table does not depend on the
// order in which workers finished. Under single-source a target collects one
// accuracy per source domain; those are averaged within the trial first.
inline ResultTable build_table(const std::vector<nlohmann::json>& records, std::size_t trials) {
  ResultTable t;
  t.trials = trials;
  std::set<std::string> methods, domains;
  // (method, domain, trial) -> accuracies; invalid marks
  std::map<std::tuple<std::string, std::string, std::size_t>, std::vector<double>> acc;
  std::set<std::pair<std::string, std::string>> invalid;
  std::map<std::string, std::set<std::string>> expected_targets;  // held_out -> targets
  for (const auto& r : records) {
    const auto method = r.at("method").get<std::string>();
    const auto trial = r.at("trial").get<std::size_t>();
    methods.insert(method);
    for (const auto& d : r.at("targets")) domains.insert(d.get<std::string>());
    if (trial >= trials) continue;
    if (!r.value("valid", false)) {
      for (const auto& d : r.at("targets")) invalid.insert({method, d.get<std::string>()});
      continue;
    }
    for (const auto& [d, a] : r.at("accuracy").items()) acc[{method, d, trial}].push_back(a.get<double>());
  }
  t.methods.assign(methods.begin(), methods.end());
  t.domains.assign(domains.begin(), domains.end());
  for (const auto& m : t.methods) {
    std::vector<double> macro_per_trial(trials, 0.0);
    bool macro_valid = true;
    for (const auto& d : t.domains) {
      TableCell c{m, d, {}, true, 0.0, 0.0};
      for (std::size_t tr = 0; tr < trials; ++tr) {
        auto it = acc.find({m, d, tr});
        if (it == acc.end()) {
          c.valid = false;
          continue;
        }
        c.values.push_back(mean_of(it->second));
      }
      if (invalid.count({m, d})) c.valid = false;
      if (c.valid) {
        c.mean = mean_of(c.values);
        c.std = population_std(c.values);
        for (std::size_t tr = 0; tr < trials; ++tr) macro_per_trial[tr] += c.values[tr] / static_cast<double>(t.domains.size());
      } else {
        macro_valid = false;
      }
      t.cells.push_back(std::move(c));
    }
    TableCell mc{m, "avg", macro_valid ? macro_per_trial : std::vector<double>{}, macro_valid, 0.0, 0.0};
    if (macro_valid) {
      mc.mean = mean_of(mc.values);
      mc.std = population_std(mc.values);
    }
    t.macro.push_back(std::move(mc));
  }
  return t;
}

inline nlohmann::json table_json(const ResultTable& t) {
  nlohmann::json j = {{"trials", t.trials}, {"methods", t.methods}, {"domains", t.domains}};
  auto cell_json = [](const TableCell& c) {
    nlohmann::json cj = {{"valid", c.valid}, {"values", c.values}};
    cj["mean"] = c.valid ? nlohmann::json(c.mean) : nlohmann::json();
    cj["std"] = c.valid ? nlohmann::json(c.std) : nlohmann::json();
    return cj;
  };
  nlohmann::json rows = nlohmann::json::object();
  for (const auto& m : t.methods) {
    nlohmann::json row = nlohmann::json::object();
    for (const auto& d : t.domains) row[d] = cell_json(t.cell(m, d));
    row["avg"] = cell_json(t.macro_of(m));
    rows[m] = row;
  }
  j["table"] = rows;
  return j;
}

inline std::string table_text(const ResultTable& t) {
  std::ostringstream os;
  auto fmt = [](const TableCell& c) {
    if (!c.valid) return std::string("invalid");
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.2f +- %.2f", 100.0 * c.mean, 100.0 * c.std);
    return std::string(buf);
  };
  std::size_t w = 6;
  for (const auto& m : t.methods) w = std::max(w, m.size());
  char buf[64];
  std::snprintf(buf, sizeof buf, "%-*s", static_cast<int>(w), "method");
  os << buf;
  for (const auto& d : t.domains) {
    std::snprintf(buf, sizeof buf, "  %16s", d.c_str());
    os << buf;
  }
  os << "  " << std::string(16 - 3, ' ') << "avg\n";
  for (const auto& m : t.methods) {
    std::snprintf(buf, sizeof buf, "%-*s", static_cast<int>(w), m.c_str());
    os << buf;
    for (const auto& d : t.domains) {
      std::snprintf(buf, sizeof buf, "  %16s", fmt(t.cell(m, d)).c_str());
      os << buf;
    }
    std::snprintf(buf, sizeof buf, "  %16s\n", fmt(t.macro_of(m)).c_str());
    os << buf;
  }
  os << "accuracy in %, mean +- population std over " << t.trials << " trials\n";
  return os.str();
}

inline void write_table(const ResultTable& t, const std::filesystem::path& dir) {
  std::ofstream(dir / "table.json") << table_json(t).dump(2) << '\n';
  std::ofstream(dir / "table.txt") << table_text(t);
}

// ---------------------------------------------------------------------------
// run_plan

struct RunSummary {
  ResultTable table;
  std::size_t cells_computed = 0;
  std::size_t cells_skipped = 0;
  std::size_t trainings = 0;
  bool all_valid() const { return table.all_valid(); }
};

struct RunHooks {
  std::function<void(const nlohmann::json&)> on_cell;  // called under no lock, from workers
};

inline const char* kCellLog = "cells.jsonl";

namespace detail {

struct Job {
  std::size_t held_out_index;
  std::string held_out;
  std::size_t trial;
  std::vector<std::size_t> methods;  // indices still to compute
};

}  // namespace detail

inline RunSummary run_plan(const ExperimentPlan& plan, const std::filesystem::path& out_dir, const RunHooks& hooks = {}) {
  plan.validate();
  std::filesystem::create_directories(out_dir);
  const std::string log_path = (out_dir / kCellLog).string();
  const DomainSuite suite = plan_suite(plan);
  const auto held = held_out_ids(plan, suite);
  const auto all_ids = suite.domain_ids();

  std::set<CellKey> done;
  for (const auto& rec : read_log(log_path)) done.insert(cell_key(rec));

  RunSummary summary;
  std::vector<detail::Job> jobs;
  for (std::size_t trial = 0; trial < plan.trials; ++trial)
    for (const auto& h : held) {
      const std::size_t hi = static_cast<std::size_t>(std::find(all_ids.begin(), all_ids.end(), h) - all_ids.begin());
      detail::Job job{hi, h, trial, {}};
      for (std::size_t mi = 0; mi < plan.methods.size(); ++mi) {
        if (done.count({plan.methods[mi].name, h, trial})) ++summary.cells_skipped;
        else job.methods.push_back(mi);
      }
      if (!job.methods.empty()) jobs.push_back(std::move(job));
    }

  LogWriter log(log_path);
  std::atomic<std::size_t> next{0}, computed{0}, trainings{0};

  auto run_job = [&](const detail::Job& job) {
    const DomainSuite view = protocol_view(plan, suite, job.held_out);
    std::map<std::string, std::pair<std::optional<FitResult>, nlohmann::json>> fits;  // train key -> fit or error
    for (std::size_t mi : job.methods) {
      const MethodSpec m = cell_config(plan, plan.methods[mi], job.held_out_index, job.trial);
      const std::string key = train_json(m.train).dump();
      nlohmann::json rec = {{"method", m.name},          {"held_out", job.held_out},    {"trial", job.trial},
                            {"targets", view.target_ids}, {"train_seed", m.train.seed}, {"adapt_seed", m.adapt.seed},
                            {"lr_model", m.train.lr_model}, {"lr_adapt", m.adapt.lr_adapt}};
      auto it = fits.find(key);
      if (it == fits.end()) {
        std::pair<std::optional<FitResult>, nlohmann::json> entry;
        try {
          entry.first = fit(view, m.train);
          ++trainings;
        } catch (const TrainAborted& e) {
          entry.second = {{"error", e.what()}, {"diagnostic", e.diagnostic()}};
        } catch (const std::exception& e) {
          entry.second = {{"error", e.what()}};
        }
        it = fits.emplace(key, std::move(entry)).first;
      }
      const auto& [fitted, failure] = it->second;
      if (!fitted) {
        rec["valid"] = false;
        rec.update(failure);
      } else {
        rec["checkpoint_hash"] = hex64(fitted->best.hash_all());
        rec["best_val_acc"] = fitted->best_val_acc;
        rec["best_step"] = fitted->best_step;
        try {
          const EvalResult ev = evaluate(view, fitted->best, m.adapt);
          nlohmann::json accs = nlohmann::json::object();
          for (std::size_t i = 0; i < ev.domains.size(); ++i) accs[ev.domains[i]] = ev.accuracy[i];
          rec["accuracy"] = accs;
          rec["macro"] = ev.macro;
          rec["adapt_forwards"] = ev.counters.adapt_forwards;
          rec["adapt_backwards"] = ev.counters.adapt_backwards;
          rec["valid"] = true;
        } catch (const std::exception& e) {
          rec["valid"] = false;
          rec["error"] = e.what();
        }
      }
      log.write(rec);
      ++computed;
      if (hooks.on_cell) hooks.on_cell(rec);
    }
  };

  auto worker = [&]() {
    for (std::size_t i = next++; i < jobs.size(); i = next++) run_job(jobs[i]);
  };
  const std::size_t n_workers = std::min(plan.workers, std::max<std::size_t>(jobs.size(), 1));
  if (n_workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < n_workers; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  summary.cells_computed = computed;
  summary.trainings = trainings;
  summary.table = build_table(read_log(log_path), plan.trials);
  write_table(summary.table, out_dir);
  return summary;
}

}  // namespace itta
