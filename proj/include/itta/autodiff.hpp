#pragma once

// Tape-based reverse-mode automatic differentiation over 64-bit reals.
//
// A Graph is an append-only list of nodes; every node's inputs have smaller
// indices. Each primitive's derivative rule is written in terms of the same
// primitives, so running grad() with create_graph=true records the backward
// pass as ordinary nodes and the resulting gradients can be differentiated
// again.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "itta/array.hpp"

namespace itta {

enum class Op : std::uint8_t {
  Leaf,
  Constant,
  Add,
  Sub,
  Mul,
  Scale,
  AddScalar,
  MatMul,
  Transpose,
  Relu,
  Exp,
  Log,
  Sqrt,
  Reciprocal,
  SumAxis,
  SumAll,
  Expand,
  Reshape,
  Concat,
  Slice,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Constant: return "constant";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Scale: return "scale";
    case Op::AddScalar: return "add_scalar";
    case Op::MatMul: return "matmul";
    case Op::Transpose: return "transpose";
    case Op::Relu: return "relu";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Sqrt: return "sqrt";
    case Op::Reciprocal: return "reciprocal";
    case Op::SumAxis: return "sum_axis";
    case Op::SumAll: return "sum";
    case Op::Expand: return "expand";
    case Op::Reshape: return "reshape";
    case Op::Concat: return "concat";
    case Op::Slice: return "slice";
  }
  return "?";
}

struct Node {
  Op op = Op::Constant;
  Shape shape;
  std::vector<double> value;
  std::vector<int> inputs;
  bool requires_grad = false;
  double scalar = 0.0;     // Scale, AddScalar
  std::size_t axis = 0;    // SumAxis, Concat, Slice
  std::size_t start = 0;   // Slice
};

class Graph;

class Tensor {
 public:
  Tensor() = default;
  Tensor(Graph* graph, int id) : graph_(graph), id_(id) {}

  bool valid() const { return graph_ != nullptr && id_ >= 0; }
  Graph& graph() const { return *graph_; }
  int node_id() const { return id_; }

  const Shape& shape() const;
  std::span<const double> data() const;
  bool requires_grad() const;
  std::size_t size() const { return data().size(); }
  std::size_t dim(std::size_t i) const { return shape().at(i); }
  double item() const;
  Array value() const { return Array(shape(), {data().begin(), data().end()}); }

 private:
  Graph* graph_ = nullptr;
  int id_ = -1;
};

namespace detail {

inline std::vector<double> compute(const Node& n, const std::deque<Node>& nodes) {
  auto in = [&](std::size_t k) -> const Node& { return nodes[static_cast<std::size_t>(n.inputs[k])]; };
  const std::size_t count = shape_numel(n.shape);
  std::vector<double> out(count);
  switch (n.op) {
    case Op::Leaf:
    case Op::Constant:
      return n.value;
    case Op::Add: {
      const auto& a = in(0).value;
      const auto& b = in(1).value;
      for (std::size_t i = 0; i < count; ++i) out[i] = a[i] + b[i];
      break;
    }
    case Op::Sub: {
      const auto& a = in(0).value;
      const auto& b = in(1).value;
      for (std::size_t i = 0; i < count; ++i) out[i] = a[i] - b[i];
      break;
    }
    case Op::Mul: {
      const auto& a = in(0).value;
      const auto& b = in(1).value;
      for (std::size_t i = 0; i < count; ++i) out[i] = a[i] * b[i];
      break;
    }
    case Op::Scale: {
      const auto& a = in(0).value;
      for (std::size_t i = 0; i < count; ++i) out[i] = n.scalar * a[i];
      break;
    }
    case Op::AddScalar: {
      const auto& a = in(0).value;
      for (std::size_t i = 0; i < count; ++i) out[i] = a[i] + n.scalar;
      break;
    }
    case Op::MatMul: {
      const Node& a = in(0);
      const Node& b = in(1);
      const std::size_t rows = a.shape[0], inner = a.shape[1], cols = b.shape[1];
      for (std::size_t i = 0; i < rows; ++i) {
        double* orow = out.data() + i * cols;
        for (std::size_t k = 0; k < inner; ++k) {
          const double av = a.value[i * inner + k];
          if (av == 0.0) continue;
          const double* brow = b.value.data() + k * cols;
          for (std::size_t j = 0; j < cols; ++j) orow[j] += av * brow[j];
        }
      }
      break;
    }
    case Op::Transpose: {
      const Node& a = in(0);
      const std::size_t rows = a.shape[0], cols = a.shape[1];
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = a.value[i * cols + j];
      break;
    }
    case Op::Relu: {
      const auto& a = in(0).value;
      for (std::size_t i = 0; i < count; ++i) out[i] = a[i] > 0.0 ? a[i] : 0.0;
      break;
    }
    case Op::Exp: {
      const auto& a = in(0).value;
      for (std::size_t i = 0; i < count; ++i) out[i] = std::exp(a[i]);
      break;
    }
    case Op::Log: {
      const auto& a = in(0).value;
      for (std::size_t i = 0; i < count; ++i) out[i] = std::log(a[i]);
      break;
    }
    case Op::Sqrt: {
      const auto& a = in(0).value;
      for (std::size_t i = 0; i < count; ++i) out[i] = std::sqrt(a[i]);
      break;
    }
    case Op::Reciprocal: {
      // 1/0 is defined as 0 so that sqrt and the L2 norm have a zero
      // subgradient at the origin.
      const auto& a = in(0).value;
      for (std::size_t i = 0; i < count; ++i) out[i] = a[i] == 0.0 ? 0.0 : 1.0 / a[i];
      break;
    }
    case Op::SumAxis: {
      const Node& a = in(0);
      std::size_t outer = 1, inner = 1;
      for (std::size_t d = 0; d < n.axis; ++d) outer *= a.shape[d];
      for (std::size_t d = n.axis + 1; d < a.shape.size(); ++d) inner *= a.shape[d];
      const std::size_t len = a.shape[n.axis];
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t k = 0; k < len; ++k) {
          const double* src = a.value.data() + (o * len + k) * inner;
          double* dst = out.data() + o * inner;
          for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
      break;
    }
    case Op::SumAll: {
      double s = 0.0;
      for (double v : in(0).value) s += v;
      out[0] = s;
      break;
    }
    case Op::Expand: {
      const Node& a = in(0);
      const std::size_t rank = n.shape.size();
      std::vector<std::size_t> stride(rank, 0);
      if (!a.shape.empty()) {
        std::size_t s = 1;
        for (std::size_t d = rank; d-- > 0;) {
          stride[d] = a.shape[d] == 1 ? 0 : s;
          s *= a.shape[d];
        }
      }
      std::vector<std::size_t> idx(rank, 0);
      std::size_t src = 0;
      for (std::size_t i = 0; i < count; ++i) {
        out[i] = a.value[src];
        for (std::size_t d = rank; d-- > 0;) {
          ++idx[d];
          src += stride[d];
          if (idx[d] < n.shape[d]) break;
          src -= stride[d] * idx[d];
          idx[d] = 0;
        }
      }
      break;
    }
    case Op::Reshape:
      return in(0).value;
    case Op::Concat: {
      std::size_t outer = 1, inner = 1;
      for (std::size_t d = 0; d < n.axis; ++d) outer *= n.shape[d];
      for (std::size_t d = n.axis + 1; d < n.shape.size(); ++d) inner *= n.shape[d];
      const std::size_t out_len = n.shape[n.axis];
      std::size_t offset = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const Node& a = in(k);
        const std::size_t len = a.shape[n.axis];
        for (std::size_t o = 0; o < outer; ++o)
          std::copy_n(a.value.data() + o * len * inner, len * inner,
                      out.data() + (o * out_len + offset) * inner);
        offset += len;
      }
      break;
    }
    case Op::Slice: {
      const Node& a = in(0);
      std::size_t outer = 1, inner = 1;
      for (std::size_t d = 0; d < n.axis; ++d) outer *= a.shape[d];
      for (std::size_t d = n.axis + 1; d < a.shape.size(); ++d) inner *= a.shape[d];
      const std::size_t in_len = a.shape[n.axis], len = n.shape[n.axis];
      for (std::size_t o = 0; o < outer; ++o)
        std::copy_n(a.value.data() + (o * in_len + n.start) * inner, len * inner,
                    out.data() + o * len * inner);
      break;
    }
  }
  return out;
}

}  // namespace detail

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Tensor leaf(Array value, bool requires_grad) {
    Node n;
    n.op = Op::Leaf;
    n.shape = std::move(value.shape);
    n.value = std::move(value.data);
    n.requires_grad = requires_grad;
    return push(std::move(n));
  }

  Tensor constant(Array value) {
    Node n;
    n.op = Op::Constant;
    n.shape = std::move(value.shape);
    n.value = std::move(value.data);
    return push(std::move(n));
  }

  Tensor constant(double v) { return constant(Array::scalar(v)); }

  const Node& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return nodes_.size(); }
  bool recording() const { return recording_; }
  std::size_t backward_calls() const { return backward_calls_; }

  // Records a derived node. When recording is off the result is stored as a
  // constant with no inputs, which detaches it from every leaf.
  Tensor record(Op op, std::vector<int> inputs, Shape shape, double scalar = 0.0,
                std::size_t axis = 0, std::size_t start = 0) {
    Node n;
    n.op = op;
    n.shape = std::move(shape);
    n.inputs = std::move(inputs);
    n.scalar = scalar;
    n.axis = axis;
    n.start = start;
    n.value = detail::compute(n, nodes_);
    bool rg = false;
    for (int i : n.inputs) rg = rg || nodes_[static_cast<std::size_t>(i)].requires_grad;
    if (!recording_) {
      n.op = Op::Constant;
      n.inputs.clear();
      rg = false;
    }
    n.requires_grad = rg;
    return push(std::move(n));
  }

  // Re-executes every derived node from the current leaf and constant values.
  void replay() {
    for (auto& n : nodes_)
      if (n.op != Op::Leaf && n.op != Op::Constant) n.value = detail::compute(n, nodes_);
  }

  void set_leaf_value(const Tensor& t, const Array& value) {
    Node& n = nodes_.at(static_cast<std::size_t>(t.node_id()));
    if (n.op != Op::Leaf) throw std::invalid_argument("set_leaf_value: node is not a leaf");
    if (n.shape != value.shape)
      throw ShapeError("set_leaf_value: shape " + shape_str(value.shape) + " vs " + shape_str(n.shape));
    n.value = value.data;
  }

 private:
  friend class RecordingGuard;
  friend struct GradAccess;

  Tensor push(Node n) {
    nodes_.push_back(std::move(n));
    return Tensor(this, static_cast<int>(nodes_.size() - 1));
  }

  std::deque<Node> nodes_;  // push_back keeps references to earlier nodes valid
  bool recording_ = true;
  std::size_t backward_calls_ = 0;
};

// Scoped switch of a graph's recording mode.
class RecordingGuard {
 public:
  RecordingGuard(Graph& g, bool on) : g_(g), prev_(g.recording_) { g.recording_ = on; }
  ~RecordingGuard() { g_.recording_ = prev_; }
  RecordingGuard(const RecordingGuard&) = delete;
  RecordingGuard& operator=(const RecordingGuard&) = delete;

 private:
  Graph& g_;
  bool prev_;
};

inline const Shape& Tensor::shape() const { return graph_->node(id_).shape; }
inline std::span<const double> Tensor::data() const { return graph_->node(id_).value; }
inline bool Tensor::requires_grad() const { return graph_->node(id_).requires_grad; }
inline double Tensor::item() const {
  const auto& v = graph_->node(id_).value;
  if (v.size() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
  return v[0];
}

// ---------------------------------------------------------------------------
// Primitives

namespace detail {

inline Graph& same_graph(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.valid() || !b.valid() || &a.graph() != &b.graph())
    throw std::invalid_argument(std::string(op) + ": operands belong to different graphs");
  return a.graph();
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

inline Tensor elementwise(Op op, const Tensor& a, const Tensor& b) {
  Graph& g = same_graph(a, b, op_name(op));
  require_same_shape(a, b, op_name(op));
  return g.record(op, {a.node_id(), b.node_id()}, a.shape());
}

inline Tensor unary(Op op, const Tensor& a, double scalar = 0.0) {
  return a.graph().record(op, {a.node_id()}, a.shape(), scalar);
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) { return detail::elementwise(Op::Add, a, b); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return detail::elementwise(Op::Sub, a, b); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return detail::elementwise(Op::Mul, a, b); }
inline Tensor scale(const Tensor& a, double c) { return detail::unary(Op::Scale, a, c); }
inline Tensor add_scalar(const Tensor& a, double c) { return detail::unary(Op::AddScalar, a, c); }
inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }
inline Tensor relu(const Tensor& a) { return detail::unary(Op::Relu, a); }
inline Tensor exp(const Tensor& a) { return detail::unary(Op::Exp, a); }
inline Tensor log(const Tensor& a) { return detail::unary(Op::Log, a); }
inline Tensor sqrt(const Tensor& a) { return detail::unary(Op::Sqrt, a); }
inline Tensor reciprocal(const Tensor& a) { return detail::unary(Op::Reciprocal, a); }
inline Tensor square(const Tensor& a) { return mul(a, a); }
inline Tensor div(const Tensor& a, const Tensor& b) { return mul(a, reciprocal(b)); }

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(double c, const Tensor& a) { return scale(a, c); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  Graph& g = detail::same_graph(a, b, "matmul");
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  return g.record(Op::MatMul, {a.node_id(), b.node_id()}, {a.dim(0), b.dim(1)});
}

inline Tensor transpose(const Tensor& a) {
  if (a.shape().size() != 2) throw ShapeError("transpose: expected rank 2, got " + shape_str(a.shape()));
  return a.graph().record(Op::Transpose, {a.node_id()}, {a.dim(1), a.dim(0)});
}

// Sum over one axis, keeping it with extent 1.
inline Tensor sum(const Tensor& a, std::size_t axis) {
  if (axis >= a.shape().size())
    throw ShapeError("sum_axis: axis " + std::to_string(axis) + " out of range for " + shape_str(a.shape()));
  Shape s = a.shape();
  s[axis] = 1;
  return a.graph().record(Op::SumAxis, {a.node_id()}, std::move(s), 0.0, axis);
}

// Sum of all elements as a rank-0 tensor.
inline Tensor sum(const Tensor& a) { return a.graph().record(Op::SumAll, {a.node_id()}, {}); }

// Broadcasts size-1 axes (or a rank-0 tensor) to `shape`.
inline Tensor expand(const Tensor& a, const Shape& shape) {
  const Shape& s = a.shape();
  bool ok = s.empty() || s.size() == shape.size();
  for (std::size_t d = 0; ok && !s.empty() && d < s.size(); ++d) ok = s[d] == shape[d] || s[d] == 1;
  if (!ok) throw ShapeError("expand: cannot broadcast " + shape_str(s) + " to " + shape_str(shape));
  if (s == shape) return a;
  return a.graph().record(Op::Expand, {a.node_id()}, shape);
}

inline Tensor reshape(const Tensor& a, const Shape& shape) {
  if (shape_numel(shape) != a.size())
    throw ShapeError("reshape: cannot reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  if (shape == a.shape()) return a;
  return a.graph().record(Op::Reshape, {a.node_id()}, shape);
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  if (parts.size() == 1) return parts[0];
  Shape s = parts[0].shape();
  if (axis >= s.size()) throw ShapeError("concat: axis out of range for " + shape_str(s));
  std::vector<int> ids;
  s[axis] = 0;
  for (const auto& p : parts) {
    detail::same_graph(parts[0], p, "concat");
    Shape ps = p.shape();
    if (ps.size() != s.size()) throw ShapeError("concat: rank mismatch " + shape_str(parts[0].shape()) + " vs " + shape_str(ps));
    s[axis] += ps[axis];
    ps[axis] = 0;
    Shape ref = parts[0].shape();
    ref[axis] = 0;
    if (ps != ref) throw ShapeError("concat: shape mismatch " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
    ids.push_back(p.node_id());
  }
  return parts[0].graph().record(Op::Concat, std::move(ids), std::move(s), 0.0, axis);
}

inline Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t len) {
  Shape s = a.shape();
  if (axis >= s.size() || start + len > s[axis])
    throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + len) +
                     ") out of bounds for " + shape_str(s));
  s[axis] = len;
  return a.graph().record(Op::Slice, {a.node_id()}, std::move(s), 0.0, axis, start);
}

inline Tensor detach(const Tensor& a) { return a.graph().constant(a.value()); }

// Sums `g` down to `shape` by collapsing the axes an expand broadcast.
inline Tensor reduce_to(const Tensor& g, const Shape& shape) {
  if (g.shape() == shape) return g;
  if (shape.empty()) return sum(g);
  Tensor r = g;
  for (std::size_t d = 0; d < shape.size(); ++d)
    if (shape[d] == 1 && r.dim(d) != 1) r = sum(r, d);
  return r;
}

// ---------------------------------------------------------------------------
// Composite operations built from the primitives above.

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

inline Tensor mean(const Tensor& a, std::size_t axis) {
  return scale(sum(a, axis), 1.0 / static_cast<double>(a.dim(axis)));
}

inline constexpr double kStdEpsilon = 1e-8;

// Population standard deviation over `axis` (kept with extent 1), with an
// additive epsilon inside the square root.
inline Tensor std_dev(const Tensor& a, std::size_t axis, double eps = kStdEpsilon) {
  Tensor centered = a - expand(mean(a, axis), a.shape());
  return sqrt(add_scalar(mean(square(centered), axis), eps));
}

inline Tensor l2norm(const Tensor& a) { return sqrt(sum(square(a))); }

// Per-row L2 norm of a [rows x cols] tensor, shape [rows x 1].
inline Tensor l2norm_rows(const Tensor& a) { return sqrt(sum(square(a), 1)); }

// Row-wise log-sum-exp of [rows x cols] logits, shape [rows x 1]. The row
// maximum is a constant shift; the derivative does not depend on it.
inline Tensor logsumexp_rows(const Tensor& logits) {
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  auto v = logits.data();
  Array shift = Array::zeros({rows, 1});
  for (std::size_t i = 0; i < rows; ++i)
    shift[i] = *std::max_element(v.begin() + static_cast<std::ptrdiff_t>(i * cols),
                                 v.begin() + static_cast<std::ptrdiff_t>((i + 1) * cols));
  Tensor m = logits.graph().constant(shift);
  Tensor shifted = logits - expand(m, logits.shape());
  return log(sum(exp(shifted), 1)) + m;
}

inline Tensor log_softmax(const Tensor& logits) {
  return logits - expand(logsumexp_rows(logits), logits.shape());
}

inline Tensor softmax(const Tensor& logits) { return exp(log_softmax(logits)); }

inline Array one_hot(std::span<const int> labels, std::size_t classes, const char* who) {
  Array out = Array::zeros({labels.size(), classes});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes)
      throw std::out_of_range(std::string(who) + ": label " + std::to_string(labels[i]) +
                              " outside [0, " + std::to_string(classes) + ")");
    out[i * classes + static_cast<std::size_t>(labels[i])] = 1.0;
  }
  return out;
}

// Batch-mean softmax cross-entropy of [batch x classes] logits.
inline Tensor softmax_ce(const Tensor& logits, std::span<const int> labels) {
  if (logits.shape().size() != 2 || logits.dim(0) != labels.size())
    throw ShapeError("softmax_ce: logits " + shape_str(logits.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  Tensor target = logits.graph().constant(one_hot(labels, logits.dim(1), "softmax_ce"));
  Tensor picked = sum(logits * target, 1);
  return mean(logsumexp_rows(logits) - picked);
}

// ---------------------------------------------------------------------------
// Reverse pass

struct GradMap {
  std::map<int, Tensor> grads;
  // Leaves the output does not depend on; their entries are zero tensors.
  std::vector<int> unreached;

  const Tensor& at(const Tensor& leaf) const { return grads.at(leaf.node_id()); }
  bool warned() const { return !unreached.empty(); }
  std::size_t size() const { return grads.size(); }
};

struct GradAccess {
  static void count_backward(Graph& g) { ++g.backward_calls_; }
};

namespace detail {

// Appends (input id, gradient) pairs for every input of `id` that requires grad.
inline void backward_rule(Graph& g, int id, const Tensor& grad_out, const std::vector<char>& needed,
                          std::vector<std::pair<int, Tensor>>& out) {
  const Node& n = g.node(id);
  const Op op = n.op;
  const std::vector<int> inputs = n.inputs;
  const double scalar = n.scalar;
  const std::size_t axis = n.axis;
  const Tensor self(&g, id);
  auto input = [&](std::size_t k) { return Tensor(&g, inputs[k]); };
  auto wants = [&](std::size_t k) {
    return needed[static_cast<std::size_t>(inputs[k])] && g.node(inputs[k]).requires_grad;
  };
  auto emit = [&](std::size_t k, auto&& make) {
    if (wants(k)) out.emplace_back(inputs[k], make());
  };

  switch (op) {
    case Op::Leaf:
    case Op::Constant:
      break;
    case Op::Add:
      emit(0, [&] { return grad_out; });
      emit(1, [&] { return grad_out; });
      break;
    case Op::Sub:
      emit(0, [&] { return grad_out; });
      emit(1, [&] { return neg(grad_out); });
      break;
    case Op::Mul:
      emit(0, [&] { return grad_out * input(1); });
      emit(1, [&] { return grad_out * input(0); });
      break;
    case Op::Scale:
      emit(0, [&] { return scale(grad_out, scalar); });
      break;
    case Op::AddScalar:
      emit(0, [&] { return grad_out; });
      break;
    case Op::MatMul:
      emit(0, [&] { return matmul(grad_out, transpose(input(1))); });
      emit(1, [&] { return matmul(transpose(input(0)), grad_out); });
      break;
    case Op::Transpose:
      emit(0, [&] { return transpose(grad_out); });
      break;
    case Op::Relu:
      emit(0, [&] {
        // Derivative at exactly zero is 0.
        const auto x = input(0).data();
        Array mask = Array::zeros(input(0).shape());
        for (std::size_t i = 0; i < x.size(); ++i) mask[i] = x[i] > 0.0 ? 1.0 : 0.0;
        return grad_out * g.constant(std::move(mask));
      });
      break;
    case Op::Exp:
      emit(0, [&] { return grad_out * self; });
      break;
    case Op::Log:
      emit(0, [&] { return grad_out * reciprocal(input(0)); });
      break;
    case Op::Sqrt:
      emit(0, [&] { return scale(grad_out * reciprocal(self), 0.5); });
      break;
    case Op::Reciprocal:
      emit(0, [&] { return neg(grad_out * (self * self)); });
      break;
    case Op::SumAxis:
    case Op::SumAll:
      emit(0, [&] { return expand(grad_out, input(0).shape()); });
      break;
    case Op::Expand:
      emit(0, [&] { return reduce_to(grad_out, input(0).shape()); });
      break;
    case Op::Reshape:
      emit(0, [&] { return reshape(grad_out, input(0).shape()); });
      break;
    case Op::Concat: {
      std::size_t offset = 0;
      for (std::size_t k = 0; k < inputs.size(); ++k) {
        const std::size_t len = g.node(inputs[k]).shape[axis];
        emit(k, [&] { return slice(grad_out, axis, offset, len); });
        offset += len;
      }
      break;
    }
    case Op::Slice:
      emit(0, [&] {
        const Shape in_shape = input(0).shape();
        const std::size_t start = g.node(id).start;
        const std::size_t len = g.node(id).shape[axis];
        std::vector<Tensor> parts;
        if (start > 0) {
          Shape s = in_shape;
          s[axis] = start;
          parts.push_back(g.constant(Array::zeros(s)));
        }
        parts.push_back(grad_out);
        if (start + len < in_shape[axis]) {
          Shape s = in_shape;
          s[axis] = in_shape[axis] - start - len;
          parts.push_back(g.constant(Array::zeros(s)));
        }
        return concat(parts, axis);
      });
      break;
  }
}

}  // namespace detail

// d(output)/d(leaf) for each leaf. With create_graph the returned gradients
// are recorded nodes that can be differentiated again; otherwise they are
// constants.
inline GradMap grad(const Tensor& output, std::span<const Tensor> leaves, bool create_graph = false) {
  if (!output.valid()) throw std::invalid_argument("grad: invalid output tensor");
  if (output.size() != 1)
    throw ShapeError("grad: output must be scalar, got shape " + shape_str(output.shape()));
  Graph& g = output.graph();
  GradAccess::count_backward(g);
  RecordingGuard guard(g, create_graph && g.recording());

  const int out_id = output.node_id();
  const auto n_nodes = static_cast<std::size_t>(out_id) + 1;

  // Only nodes with a path to a requested leaf receive adjoints.
  std::vector<char> needed(n_nodes, 0);
  for (const Tensor& leaf : leaves)
    if (leaf.valid() && &leaf.graph() == &g && leaf.node_id() <= out_id)
      needed[static_cast<std::size_t>(leaf.node_id())] = 1;
  for (std::size_t id = 0; id < n_nodes; ++id) {
    const Node& n = g.node(static_cast<int>(id));
    if (!n.requires_grad || n.op == Op::Leaf) continue;
    for (int in : n.inputs)
      if (needed[static_cast<std::size_t>(in)]) {
        needed[id] = 1;
        break;
      }
  }

  std::vector<Tensor> adjoint(n_nodes);
  if (output.requires_grad()) adjoint.back() = g.constant(Array::filled(output.shape(), 1.0));

  std::vector<std::pair<int, Tensor>> contributions;
  for (int id = out_id; id >= 0; --id) {
    const Tensor adj = adjoint[static_cast<std::size_t>(id)];
    if (!adj.valid() || !needed[static_cast<std::size_t>(id)]) continue;
    const Op op = g.node(id).op;
    if (op == Op::Leaf || op == Op::Constant) continue;
    contributions.clear();
    detail::backward_rule(g, id, adj, needed, contributions);
    for (auto& [in, gi] : contributions) {
      Tensor& slot = adjoint[static_cast<std::size_t>(in)];
      slot = slot.valid() ? add(slot, gi) : gi;
    }
  }

  GradMap result;
  for (const Tensor& leaf : leaves) {
    if (!leaf.valid() || &leaf.graph() != &g)
      throw std::invalid_argument("grad: leaf belongs to a different graph");
    const Node& n = g.node(leaf.node_id());
    if (n.op != Op::Leaf) throw std::invalid_argument("grad: node " + std::to_string(leaf.node_id()) + " is not a leaf");
    if (!n.requires_grad)
      throw std::invalid_argument("grad: leaf " + std::to_string(leaf.node_id()) + " does not require grad");
    const int id = leaf.node_id();
    if (id <= out_id && adjoint[static_cast<std::size_t>(id)].valid()) {
      Tensor gr = adjoint[static_cast<std::size_t>(id)];
      if (gr.shape() != n.shape) gr = reshape(gr, n.shape);
      result.grads.emplace(id, gr);
    } else {
      result.grads.emplace(id, g.constant(Array::zeros(n.shape)));
      result.unreached.push_back(id);
    }
  }
  return result;
}

inline GradMap grad(const Tensor& output, std::initializer_list<Tensor> leaves, bool create_graph = false) {
  return grad(output, std::span<const Tensor>(leaves.begin(), leaves.size()), create_graph);
}

// ---------------------------------------------------------------------------
// Finite-difference oracles

namespace detail {

template <class Fn>
double evaluate_scalar(Fn& fn, const Array& point) {
  Graph g;
  Tensor x = g.leaf(point, false);
  const double v = fn(x).item();
  if (!std::isfinite(v)) throw std::domain_error("fd_check: function value is not finite");
  return v;
}

}  // namespace detail

// Max over coordinates of |analytic - central difference| / (|central difference| + 1e-12).
// `fn` maps a leaf tensor to a scalar tensor in the leaf's graph.
template <class Fn>
double fd_check(Fn&& fn, const Array& point, double step) {
  if (!(step > 0.0 && step <= 1e-3)) throw std::invalid_argument("fd_check: step must lie in (0, 1e-3]");
  Graph g;
  Tensor x = g.leaf(point, true);
  Tensor y = fn(x);
  if (!std::isfinite(y.item())) throw std::domain_error("fd_check: function value is not finite");
  const auto analytic = grad(y, {x}).at(x).value();
  double worst = 0.0;
  Array probe = point;
  for (std::size_t i = 0; i < point.size(); ++i) {
    probe[i] = point[i] + step;
    const double up = detail::evaluate_scalar(fn, probe);
    probe[i] = point[i] - step;
    const double down = detail::evaluate_scalar(fn, probe);
    probe[i] = point[i];
    const double central = (up - down) / (2.0 * step);
    if (!std::isfinite(analytic[i])) throw std::domain_error("fd_check: analytic gradient is not finite");
    worst = std::max(worst, std::abs(analytic[i] - central) / (std::abs(central) + 1e-12));
  }
  return worst;
}

// Compares the Hessian obtained by differentiating the gradient graph with a
// double central difference of function values. The error of each entry is
// taken relative to the largest oracle entry, since Hessians of piecewise
// linear pieces are exactly zero.
template <class Fn>
double fd_hessian_check(Fn&& fn, const Array& point, double step) {
  if (!(step > 0.0 && step <= 1e-3)) throw std::invalid_argument("fd_hessian_check: step must lie in (0, 1e-3]");
  const std::size_t n = point.size();
  std::vector<double> analytic(n * n);
  {
    Graph g;
    Tensor x = g.leaf(point, true);
    Tensor gx = grad(fn(x), {x}, true).at(x);
    for (std::size_t i = 0; i < n; ++i) {
      Tensor gi = sum(slice(reshape(gx, {n}), 0, i, 1));
      const auto row = grad(gi, {x}).at(x).data();
      for (std::size_t j = 0; j < n; ++j) analytic[i * n + j] = row[j];
    }
  }
  std::vector<double> oracle(n * n);
  Array probe = point;
  auto f = [&](std::size_t i, double di, std::size_t j, double dj) {
    probe = point;
    probe[i] += di;
    probe[j] += dj;
    return detail::evaluate_scalar(fn, probe);
  };
  double largest = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double h = step;
      oracle[i * n + j] = (f(i, h, j, h) - f(i, h, j, -h) - f(i, -h, j, h) + f(i, -h, j, -h)) / (4.0 * h * h);
      largest = std::max(largest, std::abs(oracle[i * n + j]));
    }
  double worst = 0.0;
  for (std::size_t k = 0; k < n * n; ++k) {
    if (!std::isfinite(analytic[k])) throw std::domain_error("fd_hessian_check: analytic Hessian is not finite");
    worst = std::max(worst, std::abs(analytic[k] - oracle[k]) / (largest + 1e-12));
  }
  return worst;
}

}  // namespace itta
