#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "itta/autodiff.hpp"
#include "itta/nn.hpp"

namespace itta {

class DegenerateGradient : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LossBundle {
  double l_main = 0.0;
  double l_wcont = 0.0;
  double l_joint = 0.0;
  double alpha = 1.0;
};

// CE(f_phi(z), y) + CE(f_phi(z'), y), each a batch mean.
inline Tensor main_loss(const Tensor& logits, const Tensor& logits_aug, std::span<const int> labels) {
  return softmax_ce(logits, labels) + softmax_ce(logits_aug, labels);
}

// Batch mean of the per-sample L2 norm of f_w(z - z').
inline Tensor consistency_loss(const Tensor& z, const Tensor& z_aug, const LayerStack& weight_net) {
  if (z.shape() != z_aug.shape())
    throw ShapeError("consistency_loss: shape mismatch " + shape_str(z.shape()) + " vs " + shape_str(z_aug.shape()));
  return mean(l2norm_rows(weight_subnet_forward(z - z_aug, weight_net)));
}

inline Tensor joint_loss(const Tensor& l_main, const Tensor& l_wcont, double alpha) {
  return l_main + scale(l_wcont, alpha);
}

struct StandardizedGrad {
  Tensor flat;
  double mean = 0.0;
  double std = 0.0;
};

// Concatenates the gradients (in the given order), subtracts the mean and
// divides by the population standard deviation. Stays in the graph, so a
// graph-carrying input yields a differentiable output.
inline StandardizedGrad standardize(const std::vector<Tensor>& grads) {
  if (grads.empty()) throw std::invalid_argument("standardize: no gradients");
  std::vector<Tensor> parts;
  parts.reserve(grads.size());
  std::size_t total = 0;
  for (const auto& g : grads) {
    parts.push_back(reshape(g, {g.size()}));
    total += g.size();
  }
  if (total < 2) throw std::invalid_argument("standardize: need at least 2 elements");
  Tensor flat = concat(parts, 0);
  Tensor mu = mean(flat);
  Tensor centered = flat - expand(mu, flat.shape());
  Tensor sigma = sqrt(mean(square(centered)));
  if (!(sigma.item() >= 1e-12)) throw DegenerateGradient("degenerate gradient: standard deviation below 1e-12");
  return {centered * expand(reciprocal(sigma), flat.shape()), mu.item(), sigma.item()};
}

// Standardization applied to each tensor separately, then concatenated.
inline StandardizedGrad standardize_per_tensor(const std::vector<Tensor>& grads) {
  std::vector<Tensor> parts;
  for (const auto& g : grads) parts.push_back(standardize({g}).flat);
  Tensor flat = concat(parts, 0);
  return {flat, 0.0, 1.0};
}

// Mean squared difference of the standardized gradient vectors.
inline Tensor align_loss(const StandardizedGrad& main, const StandardizedGrad& wcont) {
  if (main.flat.shape() != wcont.flat.shape())
    throw ShapeError("align_loss: gradient sizes differ " + shape_str(main.flat.shape()) + " vs " +
                     shape_str(wcont.flat.shape()));
  return mean(square(main.flat - wcont.flat));
}

inline Tensor align_loss(const std::vector<Tensor>& g_main, const std::vector<Tensor>& g_wcont) {
  std::vector<Tensor> detached;
  for (const auto& g : g_main) detached.push_back(detach(g));
  return align_loss(standardize(detached), standardize(g_wcont));
}

// Batch mean Shannon entropy of softmax(logits).
inline Tensor entropy_objective(const Tensor& logits) {
  Tensor logp = log_softmax(logits);
  return neg(mean(sum(exp(logp) * logp, 1)));
}

// ---------------------------------------------------------------------------
// Rotation task

// Rotates a square image stored row-major by quarter turns counter-clockwise.
inline std::vector<double> rotate90(std::span<const double> image, std::size_t side, int quarter_turns) {
  if (image.size() != side * side) throw ShapeError("rotate90: image is not square");
  std::vector<double> out(image.begin(), image.end());
  for (int t = 0; t < ((quarter_turns % 4) + 4) % 4; ++t) {
    std::vector<double> next(out.size());
    for (std::size_t r = 0; r < side; ++r)
      for (std::size_t c = 0; c < side; ++c) next[(side - 1 - c) * side + r] = out[r * side + c];
    out = std::move(next);
  }
  return out;
}

struct RotationBatch {
  Array images;             // [4 * batch x side*side]
  std::vector<int> labels;  // quarter turns, 0..3
};

// All four rotations of each image in a [batch x side*side] array.
inline RotationBatch make_rotation_batch(const Array& images, std::size_t side) {
  if (images.shape.size() != 2 || images.shape[1] != side * side)
    throw ShapeError("rotation batch: images " + shape_str(images.shape) + " are not " + std::to_string(side) + "x" +
                     std::to_string(side));
  const std::size_t batch = images.shape[0], pixels = side * side;
  RotationBatch rb{Array::zeros({4 * batch, pixels}), {}};
  for (int k = 0; k < 4; ++k)
    for (std::size_t i = 0; i < batch; ++i) {
      auto rotated = rotate90(std::span<const double>(images.data).subspan(i * pixels, pixels), side, k);
      std::copy(rotated.begin(), rotated.end(), rb.images.data.begin() + static_cast<std::ptrdiff_t>((k * batch + i) * pixels));
      rb.labels.push_back(k);
    }
  return rb;
}

// Cross-entropy of the rotation head on features of rotated inputs.
inline Tensor rotation_objective(const Tensor& features, std::span<const int> rotation_labels, const Linear& head) {
  for (int l : rotation_labels)
    if (l < 0 || l > 3) throw std::out_of_range("rotation_objective: label outside 0..3");
  return softmax_ce(affine(features, head), rotation_labels);
}

}  // namespace itta
