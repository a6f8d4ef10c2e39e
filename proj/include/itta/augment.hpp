#pragma once

// Feature-level augmentations producing the perturbed branch z'.

#include <algorithm>
#include <numeric>
#include <optional>
#include <random>
#include <stdexcept>
#include <vector>

#include "itta/autodiff.hpp"

namespace itta {

enum class AugmentKind { StatMix, Affine, None };

struct AugmentConfig {
  AugmentKind kind = AugmentKind::StatMix;
  double mix_alpha = 0.1;
  std::size_t apply_at_block = 1;
  double affine_weight_std = 0.5;
  double affine_bias_std = 0.5;
  std::uint64_t rng_seed = 0;

  void validate(std::size_t blocks) const {
    if (!(mix_alpha > 0.0)) throw std::invalid_argument("AugmentConfig: mix_alpha must be > 0");
    if (apply_at_block < 1 || apply_at_block > blocks)
      throw std::invalid_argument("AugmentConfig: apply_at_block must lie in [1, " + std::to_string(blocks) + "]");
  }
};

// Per-sample feature statistics averaged over the source data, used when a
// test batch holds a single sample and has nobody to mix with.
struct SourceStats {
  double mu = 0.0;
  double sigma = 1.0;
};

inline double sample_beta(double alpha, std::mt19937_64& rng) {
  std::gamma_distribution<double> gamma(alpha, 1.0);
  const double x = gamma(rng);
  const double y = gamma(rng);
  if (x + y == 0.0) return x >= y ? 1.0 : 0.0;
  return x / (x + y);
}

struct MixDraw {
  std::vector<double> lambda;        // per sample
  std::vector<std::size_t> perm;     // sample i mixes with perm[i]
};

inline MixDraw draw_mix(std::size_t batch, double alpha, std::mt19937_64& rng) {
  MixDraw d;
  d.perm.resize(batch);
  std::iota(d.perm.begin(), d.perm.end(), std::size_t{0});
  std::shuffle(d.perm.begin(), d.perm.end(), rng);
  d.lambda.resize(batch);
  for (double& l : d.lambda) l = sample_beta(alpha, rng);
  return d;
}

namespace detail {

inline Tensor column(Graph& g, const std::vector<double>& v) { return g.constant(Array({v.size(), 1}, v)); }

}  // namespace detail

// Instance statistics over the feature axis, shapes [batch x 1].
inline std::pair<Tensor, Tensor> instance_stats(const Tensor& h) { return {mean(h, 1), std_dev(h, 1)}; }

// h'_i = sigma_mix * (h_i - mu_i) / sigma_i + mu_mix with
// mu_mix = lambda_i mu_i + (1 - lambda_i) mu_perm(i), and sigma_mix likewise.
inline Tensor stat_mix(const Tensor& h, const MixDraw& draw) {
  if (h.shape().size() != 2) throw ShapeError("stat_mix: expected [batch x D], got " + shape_str(h.shape()));
  const std::size_t batch = h.dim(0);
  if (draw.lambda.size() != batch || draw.perm.size() != batch)
    throw ShapeError("stat_mix: draw does not match batch of " + std::to_string(batch));
  Graph& g = h.graph();
  auto [mu, sigma] = instance_stats(h);
  Array p = Array::zeros({batch, batch});
  for (std::size_t i = 0; i < batch; ++i) p[i * batch + draw.perm[i]] = 1.0;
  Tensor perm = g.constant(std::move(p));
  Tensor lam = detail::column(g, draw.lambda);
  std::vector<double> rest(batch);
  for (std::size_t i = 0; i < batch; ++i) rest[i] = 1.0 - draw.lambda[i];
  Tensor one_minus = detail::column(g, rest);
  Tensor mu_mix = lam * mu + one_minus * matmul(perm, mu);
  Tensor sigma_mix = lam * sigma + one_minus * matmul(perm, sigma);
  const Shape& s = h.shape();
  Tensor normalized = (h - expand(mu, s)) * expand(reciprocal(sigma), s);
  return normalized * expand(sigma_mix, s) + expand(mu_mix, s);
}

// Single-sample fallback: mixes each sample's statistics with the stored
// source statistics instead of another sample's.
inline Tensor stat_mix_with_source(const Tensor& h, const std::vector<double>& lambda, const SourceStats& src) {
  const std::size_t batch = h.dim(0);
  if (lambda.size() != batch) throw ShapeError("stat_mix: lambda does not match batch");
  Graph& g = h.graph();
  auto [mu, sigma] = instance_stats(h);
  std::vector<double> rest(batch), src_mu(batch), src_sigma(batch);
  for (std::size_t i = 0; i < batch; ++i) {
    rest[i] = 1.0 - lambda[i];
    src_mu[i] = rest[i] * src.mu;
    src_sigma[i] = rest[i] * src.sigma;
  }
  Tensor lam = detail::column(g, lambda);
  Tensor mu_mix = lam * mu + detail::column(g, src_mu);
  Tensor sigma_mix = lam * sigma + detail::column(g, src_sigma);
  const Shape& s = h.shape();
  Tensor normalized = (h - expand(mu, s)) * expand(reciprocal(sigma), s);
  return normalized * expand(sigma_mix, s) + expand(mu_mix, s);
}

inline Tensor stat_mix(const Tensor& h, std::mt19937_64& rng, double alpha,
                       const std::optional<SourceStats>& source = std::nullopt) {
  if (h.shape().size() != 2) throw ShapeError("stat_mix: expected [batch x D], got " + shape_str(h.shape()));
  if (h.dim(0) < 2) {
    if (!source)
      throw std::invalid_argument(
          "stat_mix: batch of 1 has no partner to mix with; pass running source statistics as fallback");
    std::vector<double> lambda(h.dim(0));
    for (double& l : lambda) l = sample_beta(alpha, rng);
    return stat_mix_with_source(h, lambda, *source);
  }
  return stat_mix(h, draw_mix(h.dim(0), alpha, rng));
}

// h' = gamma * h + delta with gamma ~ N(1, weight_std^2), delta ~ N(0, bias_std^2)
// drawn per sample and dimension.
inline Tensor affine_aug(const Tensor& h, std::mt19937_64& rng, double weight_std, double bias_std) {
  Array gamma = Array::zeros(h.shape());
  Array delta = Array::zeros(h.shape());
  std::normal_distribution<double> unit(0.0, 1.0);
  for (std::size_t i = 0; i < gamma.size(); ++i) {
    gamma[i] = 1.0 + weight_std * unit(rng);
    delta[i] = bias_std * unit(rng);
  }
  Graph& g = h.graph();
  return h * g.constant(std::move(gamma)) + g.constant(std::move(delta));
}

// Draws fresh randomness on every call.
inline Tensor apply_augment(const Tensor& h, const AugmentConfig& cfg, std::mt19937_64& rng,
                            const std::optional<SourceStats>& source = std::nullopt) {
  switch (cfg.kind) {
    case AugmentKind::StatMix: return stat_mix(h, rng, cfg.mix_alpha, source);
    case AugmentKind::Affine: return affine_aug(h, rng, cfg.affine_weight_std, cfg.affine_bias_std);
    case AugmentKind::None: return h;
  }
  return h;
}

}  // namespace itta
