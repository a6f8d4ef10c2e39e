#pragma once

// Test-time adaptation: for each unlabeled target batch, run a few SGD steps
// on a selected parameter group with an unsupervised objective, then predict
// the same batch with the updated parameters.

#include <cmath>
#include <limits>
#include <optional>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "itta/augment.hpp"
#include "itta/data.hpp"
#include "itta/nn.hpp"
#include "itta/objectives.hpp"
#include "itta/params.hpp"
#include "itta/train.hpp"

namespace itta {

enum class Strategy { Ada, All, Bn, None };
enum class AdaptMode { Online, Episodic };
enum class AdaptObjective { Consistency, Entropy, Rotation };

inline Strategy parse_strategy(const std::string& s) {
  if (s == "ada") return Strategy::Ada;
  if (s == "all") return Strategy::All;
  if (s == "bn") return Strategy::Bn;
  if (s == "none") return Strategy::None;
  throw std::invalid_argument("unknown adaptation strategy '" + s + "' (expected ada, all, bn or none)");
}

inline const char* strategy_name(Strategy s) {
  switch (s) {
    case Strategy::Ada: return "ada";
    case Strategy::All: return "all";
    case Strategy::Bn: return "bn";
    case Strategy::None: return "none";
  }
  return "?";
}

struct AdaptConfig {
  Strategy strategy = Strategy::Ada;
  AdaptMode mode = AdaptMode::Online;
  std::size_t ttt_steps = 1;
  double lr_adapt = 0.1;
  std::size_t batch_size = 32;
  std::set<std::size_t> adaptive_locations;  // empty means after every block
  std::size_t adapter_layers = 5;
  AdaptObjective objective = AdaptObjective::Consistency;
  AugmentConfig augment;
  std::uint64_t seed = 0;

  void validate() const {
    if (batch_size < 1) throw std::invalid_argument("AdaptConfig: batch_size must be >= 1");
    if (!(lr_adapt >= 0.0)) throw std::invalid_argument("AdaptConfig: lr_adapt must be >= 0");
    if (strategy == Strategy::Ada && adapter_layers < 1)
      throw std::invalid_argument("AdaptConfig: strategy ada needs at least one adapter layer");
  }
};

// Parameters updated under each strategy, in store order.
inline std::vector<std::string> select_param_group(Strategy strategy, const ParamStore& model) {
  std::vector<std::string> out;
  for (const auto& p : model.params()) {
    switch (strategy) {
      case Strategy::Ada:
        if (p.group == Group::Adaptive) out.push_back(p.name);
        break;
      case Strategy::All:
        if (p.group == Group::Extractor) out.push_back(p.name);
        break;
      case Strategy::Bn:
        if (p.group == Group::Extractor &&
            (p.name.ends_with(".gamma") || p.name.ends_with(".beta")))
          out.push_back(p.name);
        break;
      case Strategy::None:
        break;
    }
  }
  return out;
}

inline std::vector<std::string> select_param_group(const std::string& strategy, const ParamStore& model) {
  return select_param_group(parse_strategy(strategy), model);
}

struct AdaptCounters {
  std::size_t adapt_forwards = 0;
  std::size_t adapt_backwards = 0;
  std::size_t predict_forwards = 0;
};

class AdaptState {
 public:
  AdaptState(const ParamStore& checkpoint, AdaptConfig cfg) : cfg_(std::move(cfg)), rng_(cfg_.seed) {
    cfg_.validate();
    base_ = checkpoint;
    base_.remove_group(Group::Adaptive);
    const ModelConfig arch = infer_config(base_);
    if (cfg_.strategy == Strategy::Ada) {
      std::set<std::size_t> locations = cfg_.adaptive_locations;
      if (locations.empty())
        for (std::size_t i = 1; i <= arch.blocks; ++i) locations.insert(i);
      add_adapters(base_, arch, locations, cfg_.adapter_layers);
    }
    cfg_.augment.validate(arch.blocks);
    source_ = source_stats(base_);
    live_ = base_;
    selected_ = select_param_group(cfg_.strategy, base_);
  }

  const AdaptConfig& config() const { return cfg_; }
  const ParamStore& base() const { return base_; }
  const ParamStore& live() const { return live_; }
  ParamStore& live() { return live_; }
  const std::vector<std::string>& selected() const { return selected_; }
  std::size_t batches_seen() const { return batches_seen_; }
  const AdaptCounters& counters() const { return counters_; }
  std::mt19937_64& rng() { return rng_; }
  const std::optional<SourceStats>& source() const { return source_; }

  void reset() { live_ = base_; }
  void begin_batch() {
    if (cfg_.mode == AdaptMode::Episodic) reset();
    ++batches_seen_;
  }
  AdaptCounters& counters() { return counters_; }

 private:
  AdaptConfig cfg_;
  ParamStore base_;
  ParamStore live_;
  std::vector<std::string> selected_;
  std::size_t batches_seen_ = 0;
  std::mt19937_64 rng_;
  std::optional<SourceStats> source_;
  AdaptCounters counters_;
};

struct AdaptResult {
  std::vector<int> predictions;
  std::optional<double> objective_pre;
  std::optional<double> objective_post;
};

namespace detail {

inline NormMode adapt_norm_mode(Strategy s) { return s == Strategy::Bn ? NormMode::Batch : NormMode::Running; }

inline ForwardOptions adapt_forward_options(AdaptState& state, bool with_augment) {
  ForwardOptions opt;
  opt.norm = adapt_norm_mode(state.config().strategy);
  opt.adapters = state.config().strategy == Strategy::Ada;
  opt.augment_block = state.config().augment.apply_at_block;
  if (with_augment) {
    opt.augment = [&state](const Tensor& h) {
      return apply_augment(h, state.config().augment, state.rng(), state.source());
    };
  }
  return opt;
}

}  // namespace detail

inline AdaptResult adapt_and_predict(AdaptState& state, const Array& x, std::size_t side = kImageSide) {
  if (x.shape.size() != 2 || x.shape[0] == 0) throw ShapeError("adapt_and_predict: bad batch " + shape_str(x.shape));
  const AdaptConfig& cfg = state.config();
  const bool augment_needed = cfg.objective == AdaptObjective::Consistency;
  if (augment_needed && cfg.augment.kind == AugmentKind::StatMix && x.shape[0] < 2 && !state.source())
    throw std::invalid_argument("adapt_and_predict: batch of 1 needs running source statistics in the checkpoint");
  state.begin_batch();
  AdaptResult result;
  const std::set<std::string> trainable(state.selected().begin(), state.selected().end());

  for (std::size_t step = 0; step < cfg.ttt_steps && !trainable.empty(); ++step) {
    Graph g;
    BoundModel m(g, state.live(), trainable);
    Tensor loss;
    if (cfg.objective == AdaptObjective::Rotation) {
      RotationBatch rb = make_rotation_batch(x, side);
      Tensor z = m.extractor_forward(g.constant(std::move(rb.images)), detail::adapt_forward_options(state, false)).z;
      loss = rotation_objective(z, rb.labels, m.rotation_head());
    } else {
      ExtractorOutput out = m.extractor_forward(g.constant(x), detail::adapt_forward_options(state, augment_needed));
      loss = cfg.objective == AdaptObjective::Entropy ? entropy_objective(m.logits(out.z))
                                                      : consistency_loss(out.z, *out.z_aug, m.weight_net());
    }
    ++state.counters().adapt_forwards;
    if (step == 0) result.objective_pre = loss.item();
    GradMap grads = grad(loss, m.binding().trainable());
    ++state.counters().adapt_backwards;
    if (!std::isfinite(loss.item()) || !detail::all_finite(grads)) break;
    sgd_update(state.live(), m.binding().trainable_names(), grads, m.binding(), cfg.lr_adapt);
  }

  // Final forward: clean branch for prediction with the adapted parameters.
  Graph g;
  RecordingGuard off(g, false);
  BoundModel m(g, state.live(), {});
  const bool post_branch = augment_needed && !(x.shape[0] < 2 && !state.source());
  ExtractorOutput out = m.extractor_forward(g.constant(x), detail::adapt_forward_options(state, post_branch));
  ++state.counters().predict_forwards;
  Tensor logits = m.logits(out.z);
  if (cfg.objective == AdaptObjective::Consistency && out.z_aug)
    result.objective_post = consistency_loss(out.z, *out.z_aug, m.weight_net()).item();
  else if (cfg.objective == AdaptObjective::Entropy)
    result.objective_post = entropy_objective(logits).item();
  result.predictions = argmax_rows(logits);
  return result;
}

// ---------------------------------------------------------------------------
// evaluate

struct EvalResult {
  std::vector<std::string> domains;
  std::vector<double> accuracy;  // per target domain, same order
  double macro = 0.0;
  AdaptCounters counters;
};

// Streams each target domain in a seeded order; online state persists within
// a domain and is rebuilt from the checkpoint for the next one.
inline EvalResult evaluate(const DomainSuite& suite, const ParamStore& checkpoint, const AdaptConfig& cfg,
                           const MetricsSink& sink = {}) {
  EvalResult result;
  const auto& all = *suite.domains;
  for (const auto& target : suite.target_ids) {
    if (std::find(suite.source_ids.begin(), suite.source_ids.end(), target) != suite.source_ids.end())
      throw std::invalid_argument("evaluate: target domain '" + target + "' is also a source");
    std::size_t di = 0;
    while (di < all.size() && all[di].spec.domain_id != target) ++di;
    if (di == all.size()) throw std::out_of_range("evaluate: unknown target domain '" + target + "'");
    const DomainData& d = all[di];
    AdaptConfig dcfg = cfg;
    dcfg.seed = mix_seed(cfg.seed, di);
    AdaptState state(checkpoint, dcfg);
    std::vector<SampleRef> order;
    for (std::size_t i = 0; i < d.labels.size(); ++i) order.push_back({di, i});
    std::mt19937_64 order_rng(mix_seed(dcfg.seed, 0x5eed));
    std::shuffle(order.begin(), order.end(), order_rng);
    std::size_t correct = 0, seen = 0;
    for (std::size_t start = 0, batch_idx = 0; start < order.size(); start += cfg.batch_size, ++batch_idx) {
      std::span<const SampleRef> refs(order.data() + start, std::min(cfg.batch_size, order.size() - start));
      AdaptResult r = adapt_and_predict(state, gather_images(suite, refs), suite.side);
      const auto labels = gather_labels(suite, refs);
      for (std::size_t i = 0; i < labels.size(); ++i) correct += r.predictions[i] == labels[i];
      seen += labels.size();
      if (sink) {
        nlohmann::json rec = {{"domain", target}, {"batch_idx", batch_idx},
                              {"acc_running", static_cast<double>(correct) / static_cast<double>(seen)}};
        rec["l_wcont_pre"] = r.objective_pre ? nlohmann::json(*r.objective_pre) : nlohmann::json();
        rec["l_wcont_post"] = r.objective_post ? nlohmann::json(*r.objective_post) : nlohmann::json();
        sink(rec);
      }
    }
    result.domains.push_back(target);
    result.accuracy.push_back(seen ? static_cast<double>(correct) / static_cast<double>(seen) : 0.0);
    result.counters.adapt_forwards += state.counters().adapt_forwards;
    result.counters.adapt_backwards += state.counters().adapt_backwards;
    result.counters.predict_forwards += state.counters().predict_forwards;
  }
  double s = 0.0;
  for (double a : result.accuracy) s += a;
  result.macro = result.accuracy.empty() ? 0.0 : s / static_cast<double>(result.accuracy.size());
  return result;
}

}  // namespace itta
