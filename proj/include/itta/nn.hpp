#pragma once

// Network components: extractor blocks (linear -> batch norm -> ReLU), the
// classifier, the dimension-wise weight subnetwork f_w, adaptive blocks and
// the rotation head. Parameter values live in a ParamStore; the structs here
// are per-graph views onto bound leaves.

#include <cmath>
#include <functional>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "itta/autodiff.hpp"
#include "itta/params.hpp"

namespace itta {

struct ModelConfig {
  std::size_t input_dim = 256;
  std::size_t hidden = 64;
  std::size_t classes = 4;
  std::size_t blocks = 4;
  std::size_t weight_layers = 10;
  bool norm = true;
  double norm_eps = 1e-5;
  double norm_momentum = 0.1;
};

enum class NormMode {
  Train,    // batch statistics, running buffers updated
  Running,  // running buffers
  Batch,    // batch statistics, buffers untouched
};

namespace names {
inline std::string block(std::size_t i, const char* field) { return "block" + std::to_string(i) + "." + field; }
inline std::string fw(std::size_t l, const char* field) { return "fw." + std::to_string(l) + "." + field; }
inline std::string adapter(std::size_t loc, std::size_t l, const char* field) {
  return "ada" + std::to_string(loc) + "." + std::to_string(l) + "." + field;
}
}  // namespace names

inline Array gaussian_array(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Array a = Array::zeros(std::move(shape));
  for (double& v : a.data) v = dist(rng);
  return a;
}

inline void add_layer_stack(ParamStore& store, Group group, std::size_t width, std::size_t layers,
                            const std::function<std::string(std::size_t, const char*)>& name) {
  for (std::size_t l = 0; l < layers; ++l) {
    store.add(name(l, "a"), group, Array::filled({width}, 1.0));
    store.add(name(l, "b"), group, Array::zeros({width}));
  }
}

// Fresh parameters: He-initialized blocks, unit/zero norm affine, f_w at its
// identity-on-ReLU initialization (a = 1, b = 0), and a rotation head.
inline ParamStore init_model(const ModelConfig& cfg, std::mt19937_64& rng) {
  ParamStore store;
  std::size_t fan_in = cfg.input_dim;
  for (std::size_t i = 1; i <= cfg.blocks; ++i) {
    store.add(names::block(i, "weight"), Group::Extractor,
              gaussian_array({fan_in, cfg.hidden}, std::sqrt(2.0 / static_cast<double>(fan_in)), rng));
    store.add(names::block(i, "bias"), Group::Extractor, Array::zeros({cfg.hidden}));
    if (cfg.norm) {
      store.add(names::block(i, "gamma"), Group::Extractor, Array::filled({cfg.hidden}, 1.0));
      store.add(names::block(i, "beta"), Group::Extractor, Array::zeros({cfg.hidden}));
      store.add(names::block(i, "running_mean"), Group::Buffer, Array::zeros({cfg.hidden}));
      store.add(names::block(i, "running_var"), Group::Buffer, Array::filled({cfg.hidden}, 1.0));
    }
    fan_in = cfg.hidden;
  }
  const double head_std = 1.0 / std::sqrt(static_cast<double>(cfg.hidden));
  store.add("cls.weight", Group::Classifier, gaussian_array({cfg.hidden, cfg.classes}, head_std, rng));
  store.add("cls.bias", Group::Classifier, Array::zeros({cfg.classes}));
  add_layer_stack(store, Group::Weight, cfg.hidden, cfg.weight_layers, names::fw);
  store.add("rot.weight", Group::Auxiliary, gaussian_array({cfg.hidden, 4}, head_std, rng));
  store.add("rot.bias", Group::Auxiliary, Array::zeros({4}));
  return store;
}

// Architecture recovered from parameter shapes.
inline ModelConfig infer_config(const ParamStore& store) {
  ModelConfig cfg;
  cfg.blocks = 0;
  while (store.contains(names::block(cfg.blocks + 1, "weight"))) ++cfg.blocks;
  if (cfg.blocks == 0) throw std::invalid_argument("infer_config: no extractor blocks in parameter store");
  const Array& w1 = store.at(names::block(1, "weight")).value;
  cfg.input_dim = w1.shape[0];
  cfg.hidden = w1.shape[1];
  cfg.classes = store.at("cls.weight").value.shape[1];
  cfg.norm = store.contains(names::block(1, "gamma"));
  cfg.weight_layers = 0;
  while (store.contains(names::fw(cfg.weight_layers, "a"))) ++cfg.weight_layers;
  return cfg;
}

// Inserts freshly initialized adaptive blocks (identity on non-negative
// inputs) after each listed block (1-based). Existing adapters are replaced.
inline void add_adapters(ParamStore& store, const ModelConfig& cfg, const std::set<std::size_t>& locations,
                         std::size_t layers) {
  store.remove_group(Group::Adaptive);
  for (std::size_t loc : locations) {
    if (loc < 1 || loc > cfg.blocks)
      throw std::invalid_argument("add_adapters: location " + std::to_string(loc) + " outside [1, " +
                                  std::to_string(cfg.blocks) + "]");
    add_layer_stack(store, Group::Adaptive, cfg.hidden, layers,
                    [loc](std::size_t l, const char* f) { return names::adapter(loc, l, f); });
  }
}

inline std::set<std::size_t> adapter_locations(const ParamStore& store, const ModelConfig& cfg) {
  std::set<std::size_t> out;
  for (std::size_t i = 1; i <= cfg.blocks; ++i)
    if (store.contains(names::adapter(i, 0, "a"))) out.insert(i);
  return out;
}

// ---------------------------------------------------------------------------
// Views

struct ExtractorBlock {
  Tensor weight, bias;
  std::optional<Tensor> gamma, beta;
  Array* running_mean = nullptr;
  Array* running_var = nullptr;
};

// Stack of dimension-wise layers h -> ReLU(a * h + b). Used for both the
// weight subnetwork f_w and the adaptive blocks.
struct LayerStack {
  std::vector<std::pair<Tensor, Tensor>> layers;
};

struct Linear {
  Tensor weight, bias;
};

inline Tensor row_broadcast(const Tensor& v, const Shape& shape) {
  return expand(reshape(v, {1, v.size()}), shape);
}

inline Tensor affine(const Tensor& x, const Linear& l) {
  Tensor y = matmul(x, l.weight);
  return y + row_broadcast(l.bias, y.shape());
}

inline Tensor layer_stack_forward(const LayerStack& stack, const Tensor& h) {
  Tensor out = h;
  for (const auto& [a, b] : stack.layers) {
    if (h.shape().size() != 2 || a.size() != h.dim(1))
      throw ShapeError("layer_stack: input " + shape_str(h.shape()) + " vs layer width " + std::to_string(a.size()));
    out = relu(out * row_broadcast(a, out.shape()) + row_broadcast(b, out.shape()));
  }
  return out;
}

inline Tensor weight_subnet_forward(const Tensor& h, const LayerStack& net) { return layer_stack_forward(net, h); }

inline Tensor classify(const Tensor& z, const Linear& classifier) {
  if (z.shape().size() != 2 || z.dim(1) != classifier.weight.dim(0))
    throw ShapeError("classify: features " + shape_str(z.shape()) + " vs weight " + shape_str(classifier.weight.shape()));
  return affine(z, classifier);
}

inline Tensor block_forward(const ExtractorBlock& block, const Tensor& x, NormMode mode, double eps,
                            double momentum) {
  if (x.shape().size() != 2 || x.dim(1) != block.weight.dim(0))
    throw ShapeError("extractor block: input " + shape_str(x.shape()) + " vs weight " + shape_str(block.weight.shape()));
  Tensor h = affine(x, {block.weight, block.bias});
  if (block.gamma) {
    Graph& g = h.graph();
    const std::size_t width = h.dim(1);
    Tensor normalized;
    if (mode == NormMode::Running) {
      Array shift({1, width}, block.running_mean->data);
      Array inv_std = Array::zeros({1, width});
      for (std::size_t j = 0; j < width; ++j) inv_std[j] = 1.0 / std::sqrt((*block.running_var)[j] + eps);
      normalized = (h - expand(g.constant(shift), h.shape())) * expand(g.constant(inv_std), h.shape());
    } else {
      Tensor mu = mean(h, 0);
      Tensor centered = h - expand(mu, h.shape());
      Tensor var = mean(square(centered), 0);
      normalized = centered * expand(reciprocal(sqrt(add_scalar(var, eps))), h.shape());
      if (mode == NormMode::Train) {
        const double n = static_cast<double>(h.dim(0));
        const double unbias = n > 1 ? n / (n - 1) : 1.0;
        const auto m = mu.data();
        const auto v = var.data();
        for (std::size_t j = 0; j < width; ++j) {
          (*block.running_mean)[j] = (1 - momentum) * (*block.running_mean)[j] + momentum * m[j];
          (*block.running_var)[j] = (1 - momentum) * (*block.running_var)[j] + momentum * v[j] * unbias;
        }
      }
    }
    h = normalized * row_broadcast(*block.gamma, h.shape()) + row_broadcast(*block.beta, h.shape());
  }
  return relu(h);
}

// ---------------------------------------------------------------------------
// Whole-model forward

struct ForwardOptions {
  NormMode norm = NormMode::Running;
  bool adapters = false;
  // Produces the perturbed branch from the output of block `augment_block`.
  std::function<Tensor(const Tensor&)> augment;
  std::size_t augment_block = 1;
};

struct ExtractorOutput {
  Tensor z;
  std::optional<Tensor> z_aug;
  std::vector<Tensor> intermediates;
};

// Per-graph view of a model. `store` supplies running buffers, which are
// written only in NormMode::Train.
class BoundModel {
 public:
  BoundModel(Graph& g, ParamStore& store, const std::set<std::string>& trainable)
      : cfg_(infer_config(store)), binding_(g, store, trainable) {
    for (std::size_t i = 1; i <= cfg_.blocks; ++i) {
      ExtractorBlock b{binding_[names::block(i, "weight")], binding_[names::block(i, "bias")], {}, {}, nullptr, nullptr};
      if (cfg_.norm) {
        b.gamma = binding_[names::block(i, "gamma")];
        b.beta = binding_[names::block(i, "beta")];
        b.running_mean = &store.at(names::block(i, "running_mean")).value;
        b.running_var = &store.at(names::block(i, "running_var")).value;
      }
      blocks_.push_back(std::move(b));
    }
    classifier_ = {binding_["cls.weight"], binding_["cls.bias"]};
    rotation_ = {binding_["rot.weight"], binding_["rot.bias"]};
    for (std::size_t l = 0; l < cfg_.weight_layers; ++l)
      weight_net_.layers.emplace_back(binding_[names::fw(l, "a")], binding_[names::fw(l, "b")]);
    for (std::size_t loc = 1; loc <= cfg_.blocks; ++loc) {
      if (!binding_.contains(names::adapter(loc, 0, "a"))) continue;
      LayerStack s;
      for (std::size_t l = 0; binding_.contains(names::adapter(loc, l, "a")); ++l)
        s.layers.emplace_back(binding_[names::adapter(loc, l, "a")], binding_[names::adapter(loc, l, "b")]);
      adapters_.emplace(loc, std::move(s));
    }
  }

  const ModelConfig& config() const { return cfg_; }
  const Binding& binding() const { return binding_; }
  Graph& graph() const { return binding_.graph(); }
  const Linear& classifier() const { return classifier_; }
  const Linear& rotation_head() const { return rotation_; }
  const LayerStack& weight_net() const { return weight_net_; }
  bool has_adapters() const { return !adapters_.empty(); }

  // Each block output passes through its adapter (when enabled) before the
  // next block; the same adapter weights process both branches.
  ExtractorOutput extractor_forward(const Tensor& x, const ForwardOptions& opt) const {
    if (opt.augment && (opt.augment_block < 1 || opt.augment_block > cfg_.blocks))
      throw std::invalid_argument("extractor_forward: augment_block outside [1, m]");
    ExtractorOutput out;
    Tensor h = x;
    std::optional<Tensor> h_aug;
    for (std::size_t i = 1; i <= cfg_.blocks; ++i) {
      const ExtractorBlock& block = blocks_[i - 1];
      h = block_forward(block, h, opt.norm, cfg_.norm_eps, cfg_.norm_momentum);
      if (h_aug) {
        const NormMode aug_mode = opt.norm == NormMode::Train ? NormMode::Batch : opt.norm;
        h_aug = block_forward(block, *h_aug, aug_mode, cfg_.norm_eps, cfg_.norm_momentum);
      }
      if (opt.augment && i == opt.augment_block) h_aug = opt.augment(h);
      if (opt.adapters) {
        auto it = adapters_.find(i);
        if (it != adapters_.end()) {
          h = layer_stack_forward(it->second, h);
          if (h_aug) h_aug = layer_stack_forward(it->second, *h_aug);
        }
      }
      out.intermediates.push_back(h);
    }
    out.z = h;
    out.z_aug = h_aug;
    return out;
  }

  Tensor logits(const Tensor& z) const { return classify(z, classifier_); }

 private:
  ModelConfig cfg_;
  Binding binding_;
  std::vector<ExtractorBlock> blocks_;
  Linear classifier_;
  Linear rotation_;
  LayerStack weight_net_;
  std::map<std::size_t, LayerStack> adapters_;
};

}  // namespace itta
