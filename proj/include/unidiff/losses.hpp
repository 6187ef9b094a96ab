#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "unidiff/diffusion.hpp"
#include "unidiff/model.hpp"

namespace unidiff {

/// Per-pixel validity for a batch (n * h * w entries); empty means all valid.
using Mask = std::vector<std::uint8_t>;

namespace detail {

/// Sums, over batch items, the mean over valid pixels of a per-pixel loss.
/// `pixel(n, p, value, grad)` returns the loss at pixel p of item n and writes
/// d loss / d pred for every channel of that pixel into grad (stride hw).
template <class T, class PixelFn>
Var<T> per_item_mean_loss(Var<T> pred, const Mask& mask, PixelFn pixel) {
  const Tensor<T>& v = pred.value();
  const int n_ = v.dim(0), c_ = v.dim(1), hw = v.dim(2) * v.dim(3);
  if (!mask.empty() && mask.size() != static_cast<std::size_t>(n_) * hw)
    throw ShapeError("mask has " + std::to_string(mask.size()) + " entries, expected " + std::to_string(n_ * hw));
  Tensor<T> grad(v.shape());
  double total = 0;
  std::vector<T> g(static_cast<std::size_t>(c_));
  for (int n = 0; n < n_; ++n) {
    int count = 0;
    for (int p = 0; p < hw; ++p) count += mask.empty() || mask[static_cast<std::size_t>(n) * hw + p];
    if (count == 0) throw ParameterError("all pixels of batch item " + std::to_string(n) + " are masked out");
    double s = 0;
    for (int p = 0; p < hw; ++p) {
      if (!mask.empty() && !mask[static_cast<std::size_t>(n) * hw + p]) continue;
      s += pixel(n, p, g.data());
      for (int c = 0; c < c_; ++c) grad.plane(n, c)[p] = static_cast<T>(g[static_cast<std::size_t>(c)] / count);
    }
    total += s / count;
  }
  Tape<T>& tp = *pred.tape;
  return tp.push(Tensor<T>({1}, std::vector<T>{static_cast<T>(total)}), tp.requires_grad(pred.id),
                 [pred, grad = std::move(grad)](Tape<T>& t, const Tensor<T>& go) {
                   Tensor<T> gi(grad.shape());
                   for (std::size_t i = 0; i < gi.size(); ++i) gi[i] = go[0] * grad[i];
                   t.accumulate(pred.id, gi);
                 });
}

}  // namespace detail

namespace ops {

/// Sum over items of the per-item mean squared error.
template <class T>
Var<T> mse_loss(Var<T> pred, const Tensor<T>& target, const Mask& mask = {}) {
  require_same_shape(pred.shape(), target.shape(), "mse_loss");
  const Tensor<T>& v = pred.value();
  const int c_ = v.dim(1), hw = v.dim(2) * v.dim(3);
  return unidiff::detail::per_item_mean_loss(pred, mask, [&, c_, hw](int n, int p, T* g) {
    double s = 0;
    for (int c = 0; c < c_; ++c) {
      const double d = static_cast<double>(v.plane(n, c)[p]) - target.plane(n, c)[p];
      s += d * d;
      g[c] = static_cast<T>(2 * d / c_);
    }
    (void)hw;
    return s / c_;
  });
}

/// 1 - cosine similarity between predicted and target vectors.
template <class T>
Var<T> cosine_loss(Var<T> pred, const Tensor<T>& target, const Mask& mask = {}) {
  require_same_shape(pred.shape(), target.shape(), "cosine_loss");
  const Tensor<T>& v = pred.value();
  const int c_ = v.dim(1);
  return unidiff::detail::per_item_mean_loss(pred, mask, [&, c_](int n, int p, T* g) {
    double dot = 0;
    for (int c = 0; c < c_; ++c) {
      dot += static_cast<double>(v.plane(n, c)[p]) * target.plane(n, c)[p];
      g[c] = -target.plane(n, c)[p];
    }
    return 1.0 - dot;
  });
}

/// Softmax cross-entropy; target holds class indices in a (n, 1, h, w) map.
template <class T>
Var<T> cross_entropy_loss(Var<T> logits, const Tensor<T>& target, const Mask& mask = {}) {
  const Tensor<T>& v = logits.value();
  const int k = v.dim(1);
  if (target.rank() != 4 || target.dim(0) != v.dim(0) || target.dim(1) != 1 || target.dim(2) != v.dim(2) ||
      target.dim(3) != v.dim(3))
    throw ShapeError("cross_entropy target " + shape_str(target.shape()) + " vs logits " + shape_str(v.shape()));
  return unidiff::detail::per_item_mean_loss(logits, mask, [&, k](int n, int p, T* g) {
    const int label = static_cast<int>(target.plane(n, 0)[p]);
    if (label < 0 || label >= k) throw ParameterError("class index " + std::to_string(label) + " out of range");
    double m = v.plane(n, 0)[p];
    for (int c = 1; c < k; ++c) m = std::max(m, static_cast<double>(v.plane(n, c)[p]));
    double z = 0;
    for (int c = 0; c < k; ++c) z += std::exp(v.plane(n, c)[p] - m);
    for (int c = 0; c < k; ++c) g[c] = static_cast<T>(std::exp(v.plane(n, c)[p] - m) / z - (c == label ? 1.0 : 0.0));
    return std::log(z) + m - v.plane(n, label)[p];
  });
}

template <class T>
Var<T> task_loss(Var<T> pred, const Tensor<T>& target, Task task, const Mask& mask = {}) {
  switch (task) {
    case Task::normals: return cosine_loss(pred, target, mask);
    case Task::segmentation: return cross_entropy_loss(pred, target, mask);
    case Task::depth: return mse_loss(pred, target, mask);
  }
  throw ParameterError("unknown task");
}

}  // namespace ops

/// Supervised loss of a dense prediction against its label map, summed over
/// batch items (each item contributes its mean over valid pixels).
template <class T>
T sup_loss(const Tensor<T>& pred, const Tensor<T>& target, Task task, const Mask& mask = {}) {
  Tape<T> tape(false);
  return ops::task_loss(tape.constant(pred), target, task, mask).value()[0];
}

/// Noised batch for the denoising objective: item i is noised to ts[i].
template <class T>
Tensor<T> noise_batch(const Tensor<T>& z0, std::span<const int> ts, const Tensor<T>& eps, const NoiseSchedule& s) {
  require_same_shape(z0.shape(), eps.shape(), "noise_batch");
  if (static_cast<int>(ts.size()) != z0.dim(0)) throw ShapeError("one timestep per batch item required");
  Tensor<T> out(z0.shape());
  const std::size_t is = z0.item_size();
  for (int n = 0; n < z0.dim(0); ++n) {
    const double a = std::sqrt(s.alpha_bar(ts[n])), b = std::sqrt(1.0 - s.alpha_bar(ts[n]));
    for (std::size_t i = 0; i < is; ++i)
      out.item(n)[i] = static_cast<T>(a * z0.item(n)[i] + b * eps.item(n)[i]);
  }
  return out;
}

/// Denoising objective on a tape: sum over items of mean (eps - eps_hat)^2.
template <class T>
Var<T> ldm_loss_graph(ParamBinder<T>& p, const ModelConfig& cfg, const NoiseSchedule& s, const Tensor<T>& z0,
                      std::span<const int> ts, const Tensor<T>& eps, const Tensor<T>& cond) {
  Tensor<T> zt = noise_batch(z0, ts, eps, s);
  auto g = graph::denoiser(p, cfg, p.tape().constant(std::move(zt)), ts, cond);
  return ops::mse_loss(g.eps, eps);
}

template <class T>
T ldm_loss(const ParamSet<T>& theta, const ModelConfig& cfg, const NoiseSchedule& s, const LatentState<T>& z0, int t,
           const Tensor<T>& eps, const Condition<T>& cond) {
  check_params(theta, cfg);
  if (t < 1 || t > s.t_max()) throw ParameterError("ldm_loss timestep out of range");
  Tensor<T> z = z0.values.rank() == 4 ? z0.values : z0.values.reshaped({1, z0.values.dim(0), z0.values.dim(1), z0.values.dim(2)});
  Tensor<T> e = eps.reshaped(z.shape());
  std::vector<int> ts(static_cast<std::size_t>(z.dim(0)), t);
  std::vector<Condition<T>> cs(ts.size(), cond);
  Tape<T> tape(false);
  ParamBinder<T> p(theta, tape, false);
  return ldm_loss_graph(p, cfg, s, z, std::span<const int>(ts), e,
                        pack_conditions(std::span<const Condition<T>>(cs), cfg.cond_dim))
             .value()[0] /
         static_cast<T>(z.dim(0));
}

}  // namespace unidiff
