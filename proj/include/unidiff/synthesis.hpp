#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "unidiff/codec.hpp"
#include "unidiff/dataset.hpp"
#include "unidiff/diffusion.hpp"
#include "unidiff/losses.hpp"
#include "unidiff/model.hpp"

namespace unidiff {

/// Everything the pipelines need besides the parameters.
struct Pipeline {
  ModelConfig model;
  Codec<float> codec = Codec<float>::identity();
  NoiseSchedule schedule = default_schedule();
};

inline constexpr std::uint64_t kFeatureNoiseSeed = 0xfea7;

namespace graph {

/// Latent batch -> task prediction, noising to feature_t first when positive.
template <class T>
Var<T> discriminative(ParamBinder<T>& p, const ModelConfig& cfg, const NoiseSchedule& s, const Tensor<T>& z0,
                      const Tensor<T>& cond, Task task, int feature_t) {
  Tensor<T> z = z0;
  if (feature_t > 0) {
    Rng rng = make_rng(kFeatureNoiseSeed, static_cast<std::uint64_t>(feature_t));
    const int n = z0.dim(0);
    const Shape item(z0.shape().begin() + 1, z0.shape().end());
    std::vector<Tensor<T>> eps(static_cast<std::size_t>(n), randn<T>(rng, item));  // one map shared by all items
    std::vector<int> ts(static_cast<std::size_t>(n), feature_t);
    z = noise_batch(z0, std::span<const int>(ts), stack(std::span<const Tensor<T>>(eps)), s);
  }
  std::vector<int> ts(static_cast<std::size_t>(z0.dim(0)), feature_t);
  auto g = denoiser(p, cfg, p.tape().constant(std::move(z)), std::span<const int>(ts), cond);
  return predict_from_raw(p, cfg, g.raw, task);
}

}  // namespace graph

/// encode -> one denoiser pass at feature_t -> fuse -> (resample) -> head.
inline Tensor<float> discriminative_forward(const ParamSet<float>& theta, const Pipeline& pl, const Tensor<float>& x,
                                            std::span<const Condition<float>> conds, Task task,
                                            std::optional<int> feature_t = std::nullopt) {
  check_params(theta, pl.model);
  const int ft = feature_t.value_or(pl.model.feature_t);
  if (ft < 0 || ft > pl.schedule.t_max()) throw ParameterError("feature timestep out of range");
  if (static_cast<int>(conds.size()) != x.dim(0)) throw ShapeError("one condition per image required");
  Tape<float> tape(false);
  ParamBinder<float> p(theta, tape, false);
  return graph::discriminative(p, pl.model, pl.schedule, encode(pl.codec, x), pack_conditions(conds, pl.model.cond_dim),
                               task, ft)
      .value();
}

/// Labels for (generated) images: the discriminative pipeline run with theta_C.
inline Tensor<float> annotate(const ParamSet<float>& theta_c, const Pipeline& pl, const Tensor<float>& x_gen,
                              std::span<const Condition<float>> conds, Task task) {
  return discriminative_forward(theta_c, pl, x_gen, conds, task);
}

/// Turns raw head output into a label map: segmentation logits become class indices.
inline Tensor<float> labels_from_prediction(const Tensor<float>& pred, Task task) {
  if (task != Task::segmentation) return pred;
  const auto cls = argmax_channels(pred);
  Tensor<float> t({pred.dim(0), 1, pred.dim(2), pred.dim(3)});
  for (std::size_t i = 0; i < cls.size(); ++i) t[i] = static_cast<float>(cls[i]);
  return t;
}

struct SyntheticPair {
  Tensor<float> image;   // (3, h, w)
  Tensor<float> labels;  // task label map (c, h, w)
  Task task = Task::normals;
  int source_t = 0;
  Provenance provenance;
  std::vector<float> descriptor;
};

/// Reverse chain from t_start down to 1 for a batch; item i draws its noise
/// from its own generator rngs[i]. Noise is drawn for steps t > 1 only.
inline Tensor<float> reverse_chain(const ParamSet<float>& theta, const Pipeline& pl, Tensor<float> z, int t_start,
                                   std::span<const Condition<float>> conds, std::span<Rng> rngs,
                                   const std::function<void(int)>& on_step = {}) {
  const int n = z.dim(0);
  Shape item(z.shape().begin() + 1, z.shape().end());
  std::vector<int> ts(static_cast<std::size_t>(n));
  for (int t = t_start; t >= 1; --t) {
    std::fill(ts.begin(), ts.end(), t);
    Tensor<float> eps_hat = denoise_eps(theta, pl.model, z, std::span<const int>(ts), conds).eps_hat;
    Tensor<float> noise(z.shape());
    if (t > 1) {
      std::vector<Tensor<float>> parts;
      for (int i = 0; i < n; ++i) parts.push_back(randn<float>(rngs[static_cast<std::size_t>(i)], item));
      noise = stack(std::span<const Tensor<float>>(parts));
    }
    z = reverse_step(LatentState<float>{std::move(z), t}, t, eps_hat, noise, pl.schedule).values;
    if (on_step) on_step(t);
  }
  return z;
}

/// Images from pure Gaussian latents (t = t_max), one generator per item.
inline Tensor<float> generate_full_images(const ParamSet<float>& theta, const Pipeline& pl,
                                          std::span<const Condition<float>> conds, std::span<Rng> rngs) {
  check_params(theta, pl.model);
  const Shape item{pl.model.latent_channels, pl.model.latent_size, pl.model.latent_size};
  std::vector<Tensor<float>> parts;
  for (auto& r : rngs) parts.push_back(randn<float>(r, item));
  Tensor<float> z = stack(std::span<const Tensor<float>>(parts));
  return decode(pl.codec, reverse_chain(theta, pl, std::move(z), pl.schedule.t_max(), conds, rngs));
}

/// Images regenerated from references noised to t (0 < t < t_max).
inline Tensor<float> generate_partial_images(const ParamSet<float>& theta, const Pipeline& pl, const Tensor<float>& refs,
                                             int t, std::span<const Condition<float>> conds, std::span<Rng> rngs) {
  check_params(theta, pl.model);
  if (t <= 0 || t >= pl.schedule.t_max())
    throw ParameterError("partial generation timestep " + std::to_string(t) + " outside (0, " +
                         std::to_string(pl.schedule.t_max()) + ")");
  Tensor<float> z0 = encode(pl.codec, refs);
  Shape item(z0.shape().begin() + 1, z0.shape().end());
  std::vector<Tensor<float>> parts;
  for (auto& r : rngs) parts.push_back(randn<float>(r, item));
  std::vector<int> ts(static_cast<std::size_t>(z0.dim(0)), t);
  Tensor<float> zt = noise_batch(z0, std::span<const int>(ts), stack(std::span<const Tensor<float>>(parts)), pl.schedule);
  return decode(pl.codec, reverse_chain(theta, pl, std::move(zt), t, conds, rngs));
}

inline Tensor<float> as_batch(const Tensor<float>& x) { return x.rank() == 4 ? x : x.reshaped({1, x.dim(0), x.dim(1), x.dim(2)}); }
inline Tensor<float> first_item(const Tensor<float>& b) { return b.slice(0, 1).reshaped({b.dim(1), b.dim(2), b.dim(3)}); }

inline SyntheticPair generate_full(const ParamSet<float>& theta_c, const Pipeline& pl, const Condition<float>& cond,
                                   Rng& rng, Task task = Task::normals) {
  std::array<Condition<float>, 1> cs{cond};
  std::span<Rng> rs(&rng, 1);
  Tensor<float> img = generate_full_images(theta_c, pl, cs, rs);
  SyntheticPair sp;
  sp.labels = first_item(labels_from_prediction(annotate(theta_c, pl, img, cs, task), task));
  sp.image = first_item(img);
  sp.task = task;
  sp.source_t = pl.schedule.t_max();
  sp.provenance = {"", sp.source_t, value_digest(theta_c), 0};
  sp.descriptor = cond.descriptor;
  return sp;
}

inline SyntheticPair generate_partial(const ParamSet<float>& theta_c, const Pipeline& pl, const Sample& ref, int t,
                                      const Condition<float>& cond, Rng& rng, Task task = Task::normals) {
  std::array<Condition<float>, 1> cs{cond};
  std::span<Rng> rs(&rng, 1);
  Tensor<float> img = generate_partial_images(theta_c, pl, as_batch(ref.image), t, cs, rs);
  SyntheticPair sp;
  sp.labels = first_item(labels_from_prediction(annotate(theta_c, pl, img, cs, task), task));
  sp.image = first_item(img);
  sp.task = task;
  sp.source_t = t;
  sp.provenance = {ref.id, t, value_digest(theta_c), 0};
  sp.descriptor = cond.descriptor;
  return sp;
}

/// Writes `count` generated images (no labels) into a store. Item k uses
/// reference k mod |dataset| and its own noise seed; t == t_max selects
/// generation from pure noise. Items are generated in groups of `group`.
inline Dataset presynthesize(const ParamSet<float>& theta, const Pipeline& pl, const Dataset& data, int count, int t,
                             std::uint64_t seed, int group = 8,
                             const std::function<void(int done, int total)>& progress = {}) {
  if (count < 1) throw ParameterError("presynthesize count must be >= 1");
  if (data.samples.empty()) throw ParameterError("presynthesize needs a non-empty reference dataset");
  const bool full = t == pl.schedule.t_max();
  const std::string digest = value_digest(theta);
  Dataset store;
  store.kind = "synthetic-store";
  store.resolution = data.resolution;
  store.meta = {{"source_t", t}, {"theta_digest", digest}, {"seed", seed}};
  for (int start = 0; start < count; start += group) {
    const int end = std::min(count, start + group);
    std::vector<Rng> rngs;
    std::vector<Condition<float>> conds;
    std::vector<Tensor<float>> refs;
    std::vector<Provenance> prov;
    for (int k = start; k < end; ++k) {
      const Sample& ref = data.samples[static_cast<std::size_t>(k % data.size())];
      const std::uint64_t ns = mix_seed(seed ^ mix_seed(static_cast<std::uint64_t>(k)));
      rngs.push_back(make_rng(ns, 0x5e17));
      conds.push_back(Condition<float>::of(ref.descriptor));
      refs.push_back(ref.image);
      prov.push_back({full ? std::string() : ref.id, t, digest, ns});
    }
    Tensor<float> imgs = full ? generate_full_images(theta, pl, conds, rngs)
                              : generate_partial_images(theta, pl, stack(std::span<const Tensor<float>>(refs)), t, conds, rngs);
    for (int k = start; k < end; ++k) {
      Sample s;
      s.image = imgs.slice(k - start, k - start + 1).reshaped({3, data.resolution, data.resolution});
      s.descriptor = conds[static_cast<std::size_t>(k - start)].descriptor;
      s.id = "syn" + std::to_string(k);
      s.style = data.samples[static_cast<std::size_t>(k % data.size())].style;
      store.samples.push_back(std::move(s));
      store.provenance.push_back(prov[static_cast<std::size_t>(k - start)]);
    }
    if (progress) progress(end, count);
  }
  return store;
}

}  // namespace unidiff
