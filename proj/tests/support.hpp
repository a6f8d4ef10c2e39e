#pragma once

// Shared fixtures for the unit tests and the acceptance binary: random
// arrays, the gradient-oracle case list and a tiny model for the
// second-order path.

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "itta/itta.hpp"

namespace itta::testing {

inline Array uniform_array(Shape shape, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> d(lo, hi);
  Array a = Array::zeros(std::move(shape));
  for (double& v : a.data) v = d(rng);
  return a;
}

// Magnitudes in [lo, hi] with random signs, keeping clear of ReLU kinks.
inline Array signed_array(Shape shape, std::mt19937_64& rng, double lo, double hi) {
  Array a = uniform_array(std::move(shape), rng, lo, hi);
  std::bernoulli_distribution coin(0.5);
  for (double& v : a.data)
    if (coin(rng)) v = -v;
  return a;
}

struct OracleCase {
  std::string name;
  std::function<Tensor(const Tensor&)> fn;
  std::function<Array(std::mt19937_64&)> point;
};

// Fixed random constants shared by the cases, drawn once from a seed.
struct CaseConstants {
  Array c6, c2x3, m3x2, m3x4, c12, c4x3;
  Array fw_a, fw_b, z_prime, head_w, head_b, g_main;
  explicit CaseConstants(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    c6 = signed_array({6}, rng, 0.3, 1.5);
    c2x3 = signed_array({2, 3}, rng, 0.3, 1.5);
    m3x2 = signed_array({3, 2}, rng, 0.3, 1.5);
    m3x4 = signed_array({3, 4}, rng, 0.3, 1.5);
    c12 = signed_array({12}, rng, 0.3, 1.5);
    c4x3 = signed_array({4, 3}, rng, 0.3, 1.5);
    fw_a = uniform_array({2, 3}, rng, 0.6, 1.4);
    fw_b = uniform_array({2, 3}, rng, -0.1, 0.1);
    z_prime = uniform_array({4, 3}, rng, 0.0, 1.0);
    head_w = signed_array({3, 4}, rng, 0.2, 1.0);
    head_b = signed_array({4}, rng, 0.0, 0.3);
    g_main = signed_array({8}, rng, 0.1, 2.0);
  }
};

inline LayerStack constant_stack(Graph& g, const Array& a, const Array& b) {
  LayerStack s;
  const std::size_t layers = a.shape[0], width = a.shape[1];
  for (std::size_t l = 0; l < layers; ++l) {
    std::vector<double> al(a.data.begin() + static_cast<std::ptrdiff_t>(l * width),
                           a.data.begin() + static_cast<std::ptrdiff_t>((l + 1) * width));
    std::vector<double> bl(b.data.begin() + static_cast<std::ptrdiff_t>(l * width),
                           b.data.begin() + static_cast<std::ptrdiff_t>((l + 1) * width));
    s.layers.emplace_back(g.constant(Array({width}, al)), g.constant(Array({width}, bl)));
  }
  return s;
}

// Every primitive as a scalar function of one leaf, followed by every loss.
// Points avoid kinks (|x| > 0.1 where ReLU or |.| is involved) and keep
// log/sqrt/reciprocal inside their domains.
inline std::vector<OracleCase> gradient_cases(std::uint64_t seed = 7) {
  const auto k = std::make_shared<CaseConstants>(seed);
  auto C = [](const Tensor& x, const Array& a) { return x.graph().constant(a); };
  auto signed_pt = [](Shape s) { return [s](std::mt19937_64& r) { return signed_array(s, r, 0.1, 1.5); }; };
  auto positive_pt = [](Shape s) { return [s](std::mt19937_64& r) { return uniform_array(s, r, 0.5, 2.0); }; };
  std::vector<OracleCase> cases;

  // Weighted square keeps linear primitives' Hessians non-zero.
  auto wsq = [k, C](const Tensor& y) { return sum(C(y, k->c6) * square(reshape(y, {6}))); };

  cases.push_back({"add", [=](const Tensor& x) { return wsq(x + C(x, k->c6)); }, signed_pt({6})});
  cases.push_back({"sub", [=](const Tensor& x) { return wsq(C(x, k->c6) - x); }, signed_pt({6})});
  cases.push_back({"mul", [=](const Tensor& x) { return sum(C(x, k->c6) * x * x * x); }, signed_pt({6})});
  cases.push_back({"scale", [=](const Tensor& x) { return wsq(scale(x, -2.5)); }, signed_pt({6})});
  cases.push_back({"add_scalar", [=](const Tensor& x) { return wsq(add_scalar(x, 0.75)); }, signed_pt({6})});
  cases.push_back({"matmul", [=](const Tensor& x) {
                     Tensor xm = reshape(x, {2, 3});
                     Tensor y = matmul(xm, C(x, k->m3x2));
                     return sum(square(matmul(y, transpose(y))));
                   },
                   signed_pt({6})});
  cases.push_back({"transpose", [=](const Tensor& x) { return wsq(reshape(transpose(reshape(x, {2, 3})), {6})); },
                   signed_pt({6})});
  cases.push_back({"relu", [=](const Tensor& x) { return wsq(relu(x)) + sum(C(x, k->c6) * relu(x)); }, signed_pt({6})});
  cases.push_back({"exp", [=](const Tensor& x) { return sum(C(x, k->c6) * exp(x)); }, signed_pt({6})});
  cases.push_back({"log", [=](const Tensor& x) { return sum(C(x, k->c6) * log(x)); }, positive_pt({6})});
  cases.push_back({"sqrt", [=](const Tensor& x) { return sum(C(x, k->c6) * sqrt(x)); }, positive_pt({6})});
  cases.push_back({"reciprocal", [=](const Tensor& x) { return sum(C(x, k->c6) * reciprocal(x)); }, positive_pt({6})});
  cases.push_back({"sum_axis0", [=](const Tensor& x) { return sum(square(sum(reshape(x, {2, 3}), 0)) * C(x, Array({1, 3}, {1.0, -2.0, 0.5}))); },
                   signed_pt({6})});
  cases.push_back({"sum_axis1", [=](const Tensor& x) { return sum(square(sum(reshape(x, {2, 3}), 1)) * C(x, Array({2, 1}, {0.7, -1.3}))); },
                   signed_pt({6})});
  cases.push_back({"sum_all", [=](const Tensor& x) { return square(sum(x * C(x, k->c6))); }, signed_pt({6})});
  cases.push_back({"expand", [=](const Tensor& x) {
                     return sum(C(x, k->c4x3) * square(expand(reshape(x, {1, 3}), {4, 3})));
                   },
                   signed_pt({3})});
  cases.push_back({"reshape", [=](const Tensor& x) { return sum(C(x, k->c2x3) * square(reshape(x, {2, 3}))); },
                   signed_pt({6})});
  cases.push_back({"concat", [=](const Tensor& x) {
                     Tensor a = reshape(x, {2, 3});
                     Tensor both = concat({a, square(a)}, 0);
                     return sum(square(both) * C(x, Array({4, 3}, k->c12.data)));
                   },
                   signed_pt({6})});
  cases.push_back({"slice", [=](const Tensor& x) {
                     Tensor a = reshape(x, {2, 3});
                     return sum(square(slice(a, 1, 1, 2)) * C(x, Array({2, 2}, {1.0, -0.5, 2.0, 0.3})));
                   },
                   signed_pt({6})});
  cases.push_back({"mean_axis", [=](const Tensor& x) { return sum(square(mean(reshape(x, {2, 3}), 1)) * C(x, Array({2, 1}, {1.5, -1.0}))); },
                   signed_pt({6})});
  cases.push_back({"std_axis", [=](const Tensor& x) { return sum(std_dev(reshape(x, {2, 3}), 1) * C(x, Array({2, 1}, {1.5, -1.0}))); },
                   signed_pt({6})});
  cases.push_back({"l2norm", [=](const Tensor& x) { return l2norm(x * C(x, k->c6)); }, signed_pt({6})});
  cases.push_back({"l2norm_rows", [=](const Tensor& x) { return sum(l2norm_rows(reshape(x, {2, 3})) * C(x, Array({2, 1}, {0.8, -1.2}))); },
                   signed_pt({6})});
  cases.push_back({"log_softmax", [=](const Tensor& x) { return sum(log_softmax(reshape(x, {2, 3})) * C(x, k->c2x3)); },
                   signed_pt({6})});
  cases.push_back({"softmax_ce", [=](const Tensor& x) {
                     const std::vector<int> labels{2, 0};
                     return softmax_ce(reshape(x, {2, 3}), labels);
                   },
                   signed_pt({6})});

  // Losses.
  cases.push_back({"main_loss", [=](const Tensor& x) {
                     const std::vector<int> labels{1, 3};
                     Tensor both = reshape(x, {4, 4});
                     return main_loss(slice(both, 0, 0, 2), slice(both, 0, 2, 2), labels);
                   },
                   signed_pt({16})});
  cases.push_back({"consistency_loss/z", [=](const Tensor& x) {
                     Graph& g = x.graph();
                     return consistency_loss(reshape(x, {4, 3}), C(x, k->z_prime), constant_stack(g, k->fw_a, k->fw_b));
                   },
                   [](std::mt19937_64& r) { return uniform_array({12}, r, 0.0, 1.0); }});
  cases.push_back({"consistency_loss/w", [=](const Tensor& x) {
                     Tensor ab = reshape(x, {4, 3});
                     LayerStack s;
                     for (std::size_t l = 0; l < 2; ++l)
                       s.layers.emplace_back(reshape(slice(ab, 0, l, 1), {3}), reshape(slice(ab, 0, 2 + l, 1), {3}));
                     Tensor z = C(x, Array({4, 3}, {1.0, 0.2, 0.9, 0.1, 0.8, 0.3, 0.6, 0.4, 0.7, 0.2, 0.5, 1.0}));
                     return consistency_loss(z, C(x, k->z_prime), s);
                   },
                   [k](std::mt19937_64&) {
                     Array p = Array::zeros({12});
                     for (std::size_t i = 0; i < 6; ++i) {
                       p[i] = k->fw_a[i];
                       p[6 + i] = k->fw_b[i];
                     }
                     return p;
                   }});
  cases.push_back({"entropy", [=](const Tensor& x) { return entropy_objective(reshape(x, {3, 4})); }, signed_pt({12})});
  cases.push_back({"rotation/features", [=](const Tensor& x) {
                     const std::vector<int> labels{0, 1, 2, 3};
                     return rotation_objective(reshape(x, {4, 3}), labels, {C(x, k->head_w), C(x, k->head_b)});
                   },
                   signed_pt({12})});
  cases.push_back({"rotation/head", [=](const Tensor& x) {
                     const std::vector<int> labels{0, 1, 2, 3};
                     Tensor f = C(x, Array({4, 3}, k->c12.data));
                     return rotation_objective(f, labels, {reshape(x, {3, 4}), C(x, k->head_b)});
                   },
                   signed_pt({12})});
  cases.push_back({"align", [=](const Tensor& x) {
                     return align_loss(std::vector<Tensor>{C(x, k->g_main)}, std::vector<Tensor>{x});
                   },
                   signed_pt({8})});
  return cases;
}

// A 2-layer network small enough for a full finite-difference sweep over w:
// theta = {W [3x3], b [3]}, phi = {V [3x2], c [2]}, f_w = one layer on 3 dims.
// Maps the flattened w = [a0..a2, b0..b2] to align_loss(g_main, g_wcont).
struct TinyAlignProblem {
  Array x, x_aug, W, b, V, c;
  std::vector<int> labels{0, 1, 1, 0, 1, 0};
  explicit TinyAlignProblem(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    x = uniform_array({6, 3}, rng, -1.0, 1.0);
    x_aug = x;
    std::normal_distribution<double> noise(0.0, 0.5);
    for (double& v : x_aug.data) v += noise(rng);
    W = signed_array({3, 3}, rng, 0.3, 1.2);
    b = uniform_array({3}, rng, 0.4, 0.8);
    V = signed_array({3, 2}, rng, 0.3, 1.2);
    c = signed_array({2}, rng, 0.0, 0.2);
  }
  static constexpr std::size_t parameter_count() { return 9 + 3 + 6 + 2 + 6; }

  Tensor operator()(const Tensor& w) const {
    Graph& g = w.graph();
    Tensor Wt = g.leaf(W, true), bt = g.leaf(b, true);
    Linear cls{g.constant(V), g.constant(c)};
    auto extract = [&](const Array& in) { return relu(affine(g.constant(in), {Wt, bt})); };
    Tensor z = extract(x), zp = extract(x_aug);
    LayerStack fw;
    fw.layers.emplace_back(slice(w, 0, 0, 3), slice(w, 0, 3, 3));
    Tensor l_main = main_loss(affine(z, cls), affine(zp, cls), labels);
    Tensor l_wcont = consistency_loss(z, zp, fw);
    GradMap gm = grad(l_main, {Wt, bt}, false);
    GradMap gw = grad(l_wcont, {Wt, bt}, true);
    return align_loss(std::vector<Tensor>{gm.at(Wt), gm.at(bt)}, std::vector<Tensor>{gw.at(Wt), gw.at(bt)});
  }

  static Array w_point(std::mt19937_64& rng) {
    Array w = Array::zeros({6});
    std::uniform_real_distribution<double> a(0.7, 1.3), bb(0.05, 0.3);
    for (std::size_t i = 0; i < 3; ++i) {
      w[i] = a(rng);
      w[3 + i] = bb(rng);
    }
    return w;
  }
};

// Small model and a batch drawn from the default suite for train/adapt tests.
inline TrainConfig small_train_config(std::uint64_t seed = 1) {
  TrainConfig cfg;
  cfg.seed = seed;
  cfg.model.input_dim = 16 * 16;
  cfg.model.hidden = 8;
  cfg.model.blocks = 2;
  cfg.model.weight_layers = 3;
  cfg.batch_size = 8;
  cfg.steps = 20;
  cfg.eval_every = 10;
  return cfg;
}

inline DomainSuite small_suite(std::uint64_t seed = 5, std::size_t n = 40) {
  return generate_suite(4, default_domain_specs(n), seed);
}

inline Array first_rows(const DomainSuite& suite, const std::string& id, std::size_t n) {
  const DomainData& d = suite.domain(id);
  const std::size_t p = suite.pixels();
  return Array({n, p}, std::vector<double>(d.images.data.begin(), d.images.data.begin() + static_cast<std::ptrdiff_t>(n * p)));
}

inline std::vector<int> first_labels(const DomainSuite& suite, const std::string& id, std::size_t n) {
  const DomainData& d = suite.domain(id);
  return std::vector<int>(d.labels.begin(), d.labels.begin() + static_cast<std::ptrdiff_t>(n));
}

}  // namespace itta::testing
