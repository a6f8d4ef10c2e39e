#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "itta/array.hpp"
#include "itta/autodiff.hpp"

namespace itta {

// Parameter partition. Extractor, Classifier, Weight and Adaptive are the
// trainable groups; Auxiliary holds the rotation head; Buffer holds
// non-trainable running statistics.
enum class Group : std::uint8_t { Extractor, Classifier, Weight, Adaptive, Auxiliary, Buffer };

inline std::string_view group_tag(Group g) {
  switch (g) {
    case Group::Extractor: return "theta";
    case Group::Classifier: return "phi";
    case Group::Weight: return "w";
    case Group::Adaptive: return "Theta";
    case Group::Auxiliary: return "aux";
    case Group::Buffer: return "buffer";
  }
  return "?";
}

inline Group group_from_tag(std::string_view tag) {
  for (Group g : {Group::Extractor, Group::Classifier, Group::Weight, Group::Adaptive, Group::Auxiliary, Group::Buffer})
    if (group_tag(g) == tag) return g;
  throw std::invalid_argument("unknown parameter group tag '" + std::string(tag) + "'");
}

struct Param {
  std::string name;
  Group group;
  Array value;
};

// Named, ordered parameter collection. Order is insertion order and is the
// canonical flattening order everywhere (gradient concatenation, hashing,
// checkpoints).
class ParamStore {
 public:
  Param& add(std::string name, Group group, Array value) {
    if (index_.count(name)) throw std::invalid_argument("ParamStore: duplicate parameter '" + name + "'");
    index_.emplace(name, params_.size());
    params_.push_back({std::move(name), group, std::move(value)});
    return params_.back();
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Param& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("ParamStore: no parameter '" + name + "'");
    return params_[it->second];
  }
  const Param& at(const std::string& name) const { return const_cast<ParamStore*>(this)->at(name); }

  void remove_group(Group g) {
    std::vector<Param> kept;
    for (auto& p : params_)
      if (p.group != g) kept.push_back(std::move(p));
    params_ = std::move(kept);
    index_.clear();
    for (std::size_t i = 0; i < params_.size(); ++i) index_.emplace(params_[i].name, i);
  }

  const std::vector<Param>& params() const { return params_; }
  std::vector<Param>& params() { return params_; }

  std::vector<std::string> names(Group g) const {
    std::vector<std::string> out;
    for (const auto& p : params_)
      if (p.group == g) out.push_back(p.name);
    return out;
  }

  std::size_t scalar_count(Group g) const {
    std::size_t n = 0;
    for (const auto& p : params_)
      if (p.group == g) n += p.value.size();
    return n;
  }

  // FNV-1a over names, shapes and the raw bytes of every value in the group.
  std::uint64_t hash(Group g) const {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](const void* data, std::size_t len) {
      const auto* bytes = static_cast<const unsigned char*>(data);
      for (std::size_t i = 0; i < len; ++i) {
        h ^= bytes[i];
        h *= 1099511628211ULL;
      }
    };
    for (const auto& p : params_) {
      if (p.group != g) continue;
      mix(p.name.data(), p.name.size());
      for (std::size_t d : p.value.shape) mix(&d, sizeof d);
      if (!p.value.data.empty()) mix(p.value.data.data(), p.value.data.size() * sizeof(double));
    }
    return h;
  }

  std::uint64_t hash_all() const {
    std::uint64_t h = 0;
    for (Group g : {Group::Extractor, Group::Classifier, Group::Weight, Group::Adaptive, Group::Auxiliary, Group::Buffer})
      h = h * 31 + hash(g);
    return h;
  }

 private:
  std::vector<Param> params_;
  std::map<std::string, std::size_t> index_;
};

inline bool bit_equal(const ParamStore& a, const ParamStore& b) {
  if (a.params().size() != b.params().size()) return false;
  for (std::size_t i = 0; i < a.params().size(); ++i) {
    const auto& pa = a.params()[i];
    const auto& pb = b.params()[i];
    if (pa.name != pb.name || pa.group != pb.group || !bit_equal(pa.value, pb.value)) return false;
  }
  return true;
}

// Leaves for one graph. Parameters whose names are in `trainable` become
// requires_grad leaves; everything else is bound as a non-differentiable leaf.
class Binding {
 public:
  Binding(Graph& g, const ParamStore& store, const std::set<std::string>& trainable) : graph_(&g) {
    for (const auto& p : store.params()) {
      if (p.group == Group::Buffer) continue;
      const bool rg = trainable.count(p.name) != 0;
      Tensor t = g.leaf(p.value, rg);
      tensors_.emplace(p.name, t);
      if (rg) {
        trainable_names_.push_back(p.name);
        trainable_.push_back(t);
      }
    }
  }

  const Tensor& operator[](const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw std::out_of_range("Binding: no parameter '" + name + "'");
    return it->second;
  }
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }

  Graph& graph() const { return *graph_; }
  const std::vector<Tensor>& trainable() const { return trainable_; }
  const std::vector<std::string>& trainable_names() const { return trainable_names_; }

  std::vector<Tensor> select(const std::vector<std::string>& names) const {
    std::vector<Tensor> out;
    out.reserve(names.size());
    for (const auto& n : names) out.push_back((*this)[n]);
    return out;
  }

 private:
  Graph* graph_;
  std::map<std::string, Tensor> tensors_;
  std::vector<Tensor> trainable_;
  std::vector<std::string> trainable_names_;
};

inline std::set<std::string> names_of(const ParamStore& store, std::initializer_list<Group> groups) {
  std::set<std::string> out;
  for (const auto& p : store.params())
    for (Group g : groups)
      if (p.group == g) out.insert(p.name);
  return out;
}

// Plain SGD: value -= lr * grad for each named parameter.
inline void sgd_update(ParamStore& store, const std::vector<std::string>& names, const GradMap& grads,
                       const Binding& binding, double lr) {
  for (const auto& name : names) {
    Param& p = store.at(name);
    const auto g = grads.at(binding[name]).data();
    for (std::size_t i = 0; i < p.value.size(); ++i) p.value[i] -= lr * g[i];
  }
}

}  // namespace itta
