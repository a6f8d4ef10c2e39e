// itta: generate suites, train and adapt single cells, run and report plans.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "itta/harness.hpp"

namespace fs = std::filesystem;
using namespace itta;

namespace {

struct Options {
  std::string plan;
  std::optional<std::uint64_t> seed;
  std::string out = "itta_out";
  std::size_t workers = 0;
  std::string method = "ours";
  std::string held_out;
  std::string checkpoint;
  std::size_t trial = 0;
};

ExperimentPlan plan_from(const Options& o) {
  ExperimentPlan plan = o.plan.empty() ? parse_plan(nlohmann::json::object()) : load_plan(o.plan);
  if (o.seed) plan.seed = *o.seed;
  if (o.workers > 0) plan.workers = o.workers;
  return plan;
}

struct Cell {
  ExperimentPlan plan;
  DomainSuite view;
  MethodSpec method;
};

Cell single_cell(const Options& o) {
  Cell c{plan_from(o), {}, {}};
  const DomainSuite suite = plan_suite(c.plan);
  const auto ids = suite.domain_ids();
  const std::string held = o.held_out.empty() ? ids.front() : o.held_out;
  const auto it = std::find(ids.begin(), ids.end(), held);
  if (it == ids.end()) throw std::invalid_argument("unknown domain '" + held + "'");
  const MethodSpec* m = nullptr;
  for (const auto& spec : c.plan.methods)
    if (spec.name == o.method) m = &spec;
  if (!m) throw std::invalid_argument("method '" + o.method + "' is not in the plan");
  c.view = protocol_view(c.plan, suite, held);
  c.method = cell_config(c.plan, *m, static_cast<std::size_t>(it - ids.begin()), o.trial);
  return c;
}

std::string checkpoint_path(const Options& o, const Cell& c) {
  if (!o.checkpoint.empty()) return o.checkpoint;
  const std::string held = o.held_out.empty() ? c.view.domain_ids().front() : o.held_out;
  return (fs::path(o.out) / (o.method + "_" + held + ".ittackpt")).string();
}

std::size_t trials_in_log(const std::vector<nlohmann::json>& records) {
  std::size_t n = 0;
  for (const auto& r : records) n = std::max(n, r.at("trial").get<std::size_t>() + 1);
  return n;
}

int cmd_generate(const Options& o) {
  const ExperimentPlan plan = plan_from(o);
  const DomainSuite suite = plan_suite(plan);
  fs::create_directories(o.out);
  const fs::path path = fs::path(o.out) / "suite.ittads";
  save_suite(path.string(), suite);
  std::cout << "wrote " << path.string() << ": " << suite.domains->size() << " domains, " << suite.class_count
            << " classes\n";
  return 0;
}

int cmd_train(const Options& o) {
  Cell c = single_cell(o);
  fs::create_directories(o.out);
  std::ofstream metrics(fs::path(o.out) / "train_metrics.jsonl");
  const FitResult r = fit(c.view, c.method.train, [&](const nlohmann::json& rec) { metrics << rec.dump() << '\n'; });
  const std::string path = checkpoint_path(o, c);
  save_checkpoint(path, r.best);
  std::cout << nlohmann::json{{"checkpoint", path},
                              {"best_val_acc", r.best_val_acc},
                              {"best_step", r.best_step},
                              {"checkpoint_hash", hex64(r.best.hash_all())}}
                   .dump()
            << '\n';
  return 0;
}

int cmd_adapt(const Options& o) {
  Cell c = single_cell(o);
  const ParamStore ckpt = load_checkpoint(checkpoint_path(o, c));
  fs::create_directories(o.out);
  std::ofstream metrics(fs::path(o.out) / "adapt_metrics.jsonl");
  const EvalResult r =
      evaluate(c.view, ckpt, c.method.adapt, [&](const nlohmann::json& rec) { metrics << rec.dump() << '\n'; });
  nlohmann::json acc = nlohmann::json::object();
  for (std::size_t i = 0; i < r.domains.size(); ++i) acc[r.domains[i]] = r.accuracy[i];
  std::cout << nlohmann::json{{"method", c.method.name}, {"accuracy", acc}, {"macro", r.macro}}.dump() << '\n';
  return 0;
}

int cmd_run(const Options& o) {
  const ExperimentPlan plan = plan_from(o);
  const RunSummary s = run_plan(plan, o.out, {[](const nlohmann::json& rec) {
                                  std::cerr << rec.at("method").get<std::string>() << " held_out="
                                            << rec.at("held_out").get<std::string>()
                                            << " trial=" << rec.at("trial").get<std::size_t>()
                                            << (rec.value("valid", false) ? "" : " INVALID") << '\n';
                                }});
  std::cout << table_text(s.table);
  std::cerr << s.cells_computed << " cells computed, " << s.cells_skipped << " reused from log\n";
  return s.all_valid() ? 0 : 1;
}

int cmd_report(const Options& o) {
  const auto records = read_log((fs::path(o.out) / kCellLog).string());
  if (records.empty()) throw std::runtime_error("no cell records in " + (fs::path(o.out) / kCellLog).string());
  const std::size_t trials = o.plan.empty() ? trials_in_log(records) : plan_from(o).trials;
  const ResultTable t = build_table(records, trials);
  write_table(t, o.out);
  std::cout << table_text(t);
  return t.all_valid() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Improved test-time adaptation on a synthetic multi-domain benchmark"};
  app.require_subcommand(1);
  Options o;
  std::uint64_t seed = 0;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--plan", o.plan, "Plan file (JSON)")->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "Override the plan seed");
    sub->add_option("--out", o.out, "Output directory");
  };
  auto add_cell = [&](CLI::App* sub) {
    sub->add_option("--method", o.method, "Method name from the plan");
    sub->add_option("--held-out", o.held_out, "Held-out domain id (default: first domain)");
    sub->add_option("--trial", o.trial, "Trial index used to derive seeds");
  };

  auto* gen = app.add_subcommand("generate", "Generate the plan's synthetic suite into <out>/suite.ittads");
  add_common(gen);
  auto* train = app.add_subcommand("train", "Train one method on one held-out split");
  add_common(train);
  add_cell(train);
  train->add_option("--checkpoint", o.checkpoint, "Checkpoint path (default <out>/<method>_<held-out>.ittackpt)");
  auto* adapt = app.add_subcommand("adapt", "Adapt and evaluate a trained checkpoint on the held-out targets");
  add_common(adapt);
  add_cell(adapt);
  adapt->add_option("--checkpoint", o.checkpoint, "Checkpoint path (default <out>/<method>_<held-out>.ittackpt)");
  auto* run = app.add_subcommand("run", "Run every cell of a plan; resumes from <out>/cells.jsonl");
  add_common(run);
  run->add_option("--workers", o.workers, "Parallel jobs (overrides the plan)");
  auto* report = app.add_subcommand("report", "Rebuild the result table from <out>/cells.jsonl");
  report->add_option("--plan", o.plan, "Plan file, used for the trial count")->check(CLI::ExistingFile);
  report->add_option("--out", o.out, "Directory holding cells.jsonl");

  CLI11_PARSE(app, argc, argv);
  for (auto* sub : {gen, train, adapt, run})
    if (sub->parsed() && sub->count("--seed")) o.seed = seed;

  try {
    if (gen->parsed()) return cmd_generate(o);
    if (train->parsed()) return cmd_train(o);
    if (adapt->parsed()) return cmd_adapt(o);
    if (run->parsed()) return cmd_run(o);
    if (report->parsed()) return cmd_report(o);
  } catch (const std::exception& e) {
    std::cerr << "itta: " << e.what() << '\n';
    return 2;
  }
  return 2;
}
