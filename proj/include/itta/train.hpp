#pragma once

// Alternating optimization: an SGD step on {theta, phi} with the joint loss,
// then an SGD step on the weight subnetwork w with the gradient-alignment
// loss, plus validation-based model selection.

#include <chrono>
#include <cmath>
#include <functional>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "itta/augment.hpp"
#include "itta/autodiff.hpp"
#include "itta/data.hpp"
#include "itta/nn.hpp"
#include "itta/objectives.hpp"
#include "itta/params.hpp"

namespace itta {

enum class AuxTask { Consistency, Rotation };

struct TrainConfig {
  double alpha = 1.0;
  double lr_model = 0.01;
  double lr_w = 0.001;
  std::size_t batch_size = 32;
  std::size_t steps = 2000;
  std::uint64_t seed = 0;
  AugmentConfig augment;
  double val_fraction = 0.2;
  std::size_t eval_every = 100;
  // false keeps f_w at its initialization (naive consistency loss).
  bool update_w = true;
  AuxTask aux = AuxTask::Consistency;
  bool per_tensor_standardize = false;
  ModelConfig model;

  void validate() const {
    if (!(lr_model >= 0.0) || !(lr_w >= 0.0)) throw std::invalid_argument("TrainConfig: learning rates must be >= 0");
    if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw std::invalid_argument("TrainConfig: val_fraction must lie in (0, 1)");
    if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
    if (eval_every < 1) throw std::invalid_argument("TrainConfig: eval_every must be >= 1");
    augment.validate(model.blocks);
  }
};

struct PassCounter {
  std::size_t forwards = 0;
  std::size_t backwards = 0;
};

class TrainAborted : public std::runtime_error {
 public:
  TrainAborted(const std::string& what, nlohmann::json diagnostic)
      : std::runtime_error(what), diagnostic_(std::move(diagnostic)) {}
  const nlohmann::json& diagnostic() const { return diagnostic_; }

 private:
  nlohmann::json diagnostic_;
};

struct TrainState {
  ParamStore params;
  std::size_t step = 0;
  std::mt19937_64 rng;
  PassCounter counters;
};

inline constexpr const char* kSourceMu = "aug.source_mu";
inline constexpr const char* kSourceSigma = "aug.source_sigma";

inline TrainState init_train_state(const TrainConfig& cfg) {
  TrainState s;
  s.rng.seed(cfg.seed);
  s.params = init_model(cfg.model, s.rng);
  s.params.add(kSourceMu, Group::Buffer, Array::zeros({1}));
  s.params.add(kSourceSigma, Group::Buffer, Array::filled({1}, 1.0));
  return s;
}

inline std::optional<SourceStats> source_stats(const ParamStore& store) {
  if (!store.contains(kSourceMu) || !store.contains(kSourceSigma)) return std::nullopt;
  return SourceStats{store.at(kSourceMu).value[0], store.at(kSourceSigma).value[0]};
}

struct StepResult {
  LossBundle losses;
  std::optional<double> l_align;  // empty when the w-update did not run
  bool w_skipped = false;         // degenerate gradient
  std::uint64_t w_hash_after_model_update = 0;
  std::uint64_t model_hash_after_model_update = 0;
};

namespace detail {

inline Tensor rotation_forward_loss(const BoundModel& m, const Array& x, std::size_t side, const ForwardOptions& opt) {
  RotationBatch rb = make_rotation_batch(x, side);
  Tensor xr = m.graph().constant(std::move(rb.images));
  Tensor z = m.extractor_forward(xr, opt).z;
  return rotation_objective(z, rb.labels, m.rotation_head());
}

inline bool all_finite(const GradMap& g) {
  for (const auto& [id, t] : g.grads)
    for (double v : t.data())
      if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace detail

// One iteration of the training procedure on a batch from the source domains.
inline StepResult train_step(TrainState& state, const TrainConfig& cfg, const Array& x, std::span<const int> labels,
                             std::size_t side = kImageSide) {
  if (x.shape.size() != 2 || x.shape[0] != labels.size())
    throw ShapeError("train_step: batch " + shape_str(x.shape) + " vs " + std::to_string(labels.size()) + " labels");
  if (cfg.augment.kind == AugmentKind::StatMix && x.shape[0] < 2)
    throw std::invalid_argument("train_step: statistics mixing needs batch_size >= 2");
  StepResult result;
  result.losses.alpha = cfg.alpha;
  const bool rotation = cfg.aux == AuxTask::Rotation;

  auto record_source_stats = [&state](const Tensor& h) {
    auto [mu, sigma] = instance_stats(h);
    double m = 0.0, s = 0.0;
    for (double v : mu.data()) m += v;
    for (double v : sigma.data()) s += v;
    const double n = static_cast<double>(h.dim(0));
    constexpr double momentum = 0.1;
    Array& sm = state.params.at(kSourceMu).value;
    Array& ss = state.params.at(kSourceSigma).value;
    sm[0] = (1 - momentum) * sm[0] + momentum * m / n;
    ss[0] = (1 - momentum) * ss[0] + momentum * s / n;
  };

  // Phase 1: update theta and phi (and the rotation head) on the joint loss, w frozen.
  {
    Graph g;
    const auto trainable = rotation ? names_of(state.params, {Group::Extractor, Group::Classifier, Group::Auxiliary})
                                    : names_of(state.params, {Group::Extractor, Group::Classifier});
    BoundModel m(g, state.params, trainable);
    ForwardOptions opt;
    opt.norm = NormMode::Train;
    opt.augment_block = cfg.augment.apply_at_block;
    opt.augment = [&](const Tensor& h) {
      if (cfg.augment.kind == AugmentKind::StatMix) {
        RecordingGuard off(h.graph(), false);
        record_source_stats(h);
      }
      return apply_augment(h, cfg.augment, state.rng);
    };
    Tensor xt = g.constant(x);
    ExtractorOutput out = m.extractor_forward(xt, opt);
    ++state.counters.forwards;
    Tensor l_main = main_loss(m.logits(out.z), m.logits(*out.z_aug), labels);
    Tensor l_aux;
    if (rotation) {
      ForwardOptions rot_opt;
      rot_opt.norm = NormMode::Batch;
      l_aux = detail::rotation_forward_loss(m, x, side, rot_opt);
    } else {
      l_aux = consistency_loss(out.z, *out.z_aug, m.weight_net());
    }
    Tensor joint = joint_loss(l_main, l_aux, cfg.alpha);
    result.losses.l_main = l_main.item();
    result.losses.l_wcont = l_aux.item();
    result.losses.l_joint = joint.item();
    if (!std::isfinite(result.losses.l_joint))
      throw TrainAborted("non-finite loss at step " + std::to_string(state.step),
                         {{"step", state.step}, {"l_main", result.losses.l_main}, {"l_wcont", result.losses.l_wcont}});
    GradMap grads = grad(joint, m.binding().trainable());
    ++state.counters.backwards;
    if (!detail::all_finite(grads))
      throw TrainAborted("non-finite gradient at step " + std::to_string(state.step), {{"step", state.step}});
    sgd_update(state.params, m.binding().trainable_names(), grads, m.binding(), cfg.lr_model);
  }
  result.w_hash_after_model_update = state.params.hash(Group::Weight);
  result.model_hash_after_model_update =
      state.params.hash(Group::Extractor) * 31 + state.params.hash(Group::Classifier);

  // Phase 2: update w on the alignment between standardized theta-gradients.
  if (cfg.update_w && !rotation) {
    Graph g;
    auto trainable = names_of(state.params, {Group::Extractor, Group::Weight});
    BoundModel m(g, state.params, trainable);
    ForwardOptions opt;
    opt.norm = NormMode::Batch;
    opt.augment_block = cfg.augment.apply_at_block;
    opt.augment = [&](const Tensor& h) { return apply_augment(h, cfg.augment, state.rng); };
    Tensor xt = g.constant(x);
    ExtractorOutput out = m.extractor_forward(xt, opt);
    ++state.counters.forwards;
    Tensor l_main = main_loss(m.logits(out.z), m.logits(*out.z_aug), labels);
    Tensor l_wcont = consistency_loss(out.z, *out.z_aug, m.weight_net());

    const auto theta_names = state.params.names(Group::Extractor);
    const auto w_names = state.params.names(Group::Weight);
    const auto theta = m.binding().select(theta_names);
    const auto w = m.binding().select(w_names);

    GradMap g_main = grad(l_main, theta, false);
    ++state.counters.backwards;
    GradMap g_wcont = grad(l_wcont, theta, true);
    ++state.counters.backwards;
    std::vector<Tensor> main_list, wcont_list;
    for (const auto& t : theta) {
      main_list.push_back(g_main.at(t));
      wcont_list.push_back(g_wcont.at(t));
    }
    try {
      auto standardize_fn = cfg.per_tensor_standardize ? standardize_per_tensor : standardize;
      StandardizedGrad main_hat = standardize_fn(main_list);
      StandardizedGrad wcont_hat = standardize_fn(wcont_list);
      Tensor align = align_loss(main_hat, wcont_hat);
      GradMap g_w = grad(align, w, false);
      ++state.counters.backwards;
      result.l_align = align.item();
      if (std::isfinite(*result.l_align) && detail::all_finite(g_w))
        sgd_update(state.params, w_names, g_w, m.binding(), cfg.lr_w);
    } catch (const DegenerateGradient&) {
      result.w_skipped = true;
    }
  }
  ++state.step;
  return result;
}

// ---------------------------------------------------------------------------
// Prediction

inline std::vector<int> argmax_rows(const Tensor& logits) {
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  auto v = logits.data();
  std::vector<int> out(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < cols; ++j)
      if (v[i * cols + j] > v[i * cols + best]) best = j;
    out[i] = static_cast<int>(best);
  }
  return out;
}

// Clean forward with running normalization statistics and no adapters.
inline std::vector<int> predict(const ParamStore& params, const Array& x) {
  Graph g;
  RecordingGuard off(g, false);
  ParamStore& store = const_cast<ParamStore&>(params);  // running buffers are only read in NormMode::Running
  BoundModel m(g, store, {});
  return argmax_rows(m.logits(m.extractor_forward(g.constant(x), {}).z));
}

inline double accuracy(const ParamStore& params, const DomainSuite& suite, std::span<const SampleRef> refs,
                       std::size_t chunk = 256) {
  if (refs.empty()) return 0.0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < refs.size(); start += chunk) {
    auto part = refs.subspan(start, std::min(chunk, refs.size() - start));
    const auto pred = predict(params, gather_images(suite, part));
    const auto labels = gather_labels(suite, part);
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == labels[i];
  }
  return static_cast<double>(correct) / static_cast<double>(refs.size());
}

// ---------------------------------------------------------------------------
// fit

using MetricsSink = std::function<void(const nlohmann::json&)>;

struct FitResult {
  ParamStore best;
  double best_val_acc = 0.0;
  std::size_t best_step = 0;
  std::vector<double> val_trace;
  std::vector<nlohmann::json> trace;
  PassCounter counters;
  std::size_t w_skips = 0;
};

inline FitResult fit(const DomainSuite& suite, const TrainConfig& cfg, const MetricsSink& sink = {}) {
  cfg.validate();
  if (suite.source_ids.empty()) throw std::invalid_argument("fit: suite has no source domain");
  for (const auto& id : suite.source_ids)
    if (suite.domain(id).labels.empty()) throw std::invalid_argument("fit: source domain '" + id + "' is empty");
  TrainConfig model_cfg = cfg;
  model_cfg.model.input_dim = suite.pixels();
  model_cfg.model.classes = suite.class_count;

  const Split split = make_split(suite, cfg.val_fraction, cfg.seed);
  if (split.train.empty()) throw std::invalid_argument("fit: no training samples after split");
  TrainState state = init_train_state(model_cfg);
  std::mt19937_64 order_rng(mix_seed(cfg.seed, 0xba7c4));

  FitResult result;
  const auto t0 = std::chrono::steady_clock::now();
  double sum_main = 0.0, sum_wcont = 0.0, sum_align = 0.0;
  std::size_t n_losses = 0, n_align = 0;

  auto evaluate_now = [&](std::size_t step) {
    const double acc = accuracy(state.params, suite, split.val);
    result.val_trace.push_back(acc);
    if (result.val_trace.size() == 1 || acc > result.best_val_acc) {
      result.best_val_acc = acc;
      result.best_step = step;
      result.best = state.params;
    }
    nlohmann::json rec = {{"step", step}, {"val_acc", acc}};
    rec["l_main"] = n_losses ? nlohmann::json(sum_main / static_cast<double>(n_losses)) : nlohmann::json();
    rec["l_wcont"] = n_losses ? nlohmann::json(sum_wcont / static_cast<double>(n_losses)) : nlohmann::json();
    rec["l_align"] = n_align ? nlohmann::json(sum_align / static_cast<double>(n_align)) : nlohmann::json();
    rec["wallclock_ms"] =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    result.trace.push_back(rec);
    if (sink) sink(rec);
    sum_main = sum_wcont = sum_align = 0.0;
    n_losses = n_align = 0;
  };

  evaluate_now(0);
  std::vector<SampleRef> order = split.train;
  std::size_t cursor = order.size();
  const std::size_t batch = std::min(cfg.batch_size, order.size());
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    if (cursor + batch > order.size()) {
      std::shuffle(order.begin(), order.end(), order_rng);
      cursor = 0;
    }
    std::span<const SampleRef> refs(order.data() + cursor, batch);
    cursor += batch;
    const Array x = gather_images(suite, refs);
    const auto y = gather_labels(suite, refs);
    StepResult r = train_step(state, model_cfg, x, y, suite.side);
    sum_main += r.losses.l_main;
    sum_wcont += r.losses.l_wcont;
    ++n_losses;
    if (r.l_align) {
      sum_align += *r.l_align;
      ++n_align;
    }
    result.w_skips += r.w_skipped;
    if (step % cfg.eval_every == 0 || step == cfg.steps) evaluate_now(step);
  }
  result.counters = state.counters;
  return result;
}

}  // namespace itta
