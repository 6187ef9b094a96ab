#pragma once

// Central finite-difference verification of the tape gradients in double precision.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "unidiff/codec.hpp"
#include "unidiff/losses.hpp"
#include "unidiff/synthesis.hpp"

namespace unidiff {

struct GradcheckResult {
  std::string name;
  double worst_rel = 0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double analytic = 0, numeric = 0;
  std::size_t checked = 0;
  std::size_t param_count = 0;
  bool pass = false;
};

/// |a - f| / max(|a|, |f|, floor)
inline double relative_error(double a, double f, double floor = 1e-6) {
  return std::abs(a - f) / std::max({std::abs(a), std::abs(f), floor});
}

/// Builds the scalar loss on a recording tape; the gradient is read from the binder.
using LossBuilder = std::function<Var<double>(ParamBinder<double>&)>;

inline GradcheckResult gradcheck(const std::string& name, ParamSet<double> params, const LossBuilder& build,
                                 double tolerance = 1e-4, double h = 1e-5) {
  ParamSet<double> grads;
  {
    Tape<double> tape(true);
    ParamBinder<double> p(params, tape, true);
    tape.backward(build(p));
    grads = p.gradients();
  }
  auto value = [&] {
    Tape<double> tape(false);
    ParamBinder<double> p(params, tape, false);
    return build(p).value()[0];
  };
  GradcheckResult r;
  r.name = name;
  r.param_count = params.count();
  for (auto& [pname, t] : params.entries()) {
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double orig = t[i];
      t[i] = orig + h;
      const double up = value();
      t[i] = orig - h;
      const double down = value();
      t[i] = orig;
      const double f = (up - down) / (2 * h);
      const double a = grads.at(pname)[i];
      const double e = relative_error(a, f);
      ++r.checked;
      if (e > r.worst_rel || r.checked == 1) {
        r.worst_rel = e;
        r.worst_param = pname;
        r.worst_index = i;
        r.analytic = a;
        r.numeric = f;
      }
    }
  }
  r.pass = r.worst_rel <= tolerance;
  return r;
}

/// A 3-level model on 4x4 latents with well under 1e3 parameters.
inline ModelConfig tiny_model_config(int image_size = 4, int up_stages = 0, int down_stages = 0) {
  ModelConfig c;
  c.image_size = image_size;
  c.latent_size = 4;
  c.channels = {1, 2, 2};
  c.embed_dim = 2;
  c.time_freq_dim = 4;
  c.cond_dim = 2;
  c.fuse_channels = 2;
  c.head_channels = 1;
  c.num_classes = 3;
  c.resample_up_stages = up_stages;
  c.resample_down_stages = down_stages;
  return c;
}

/// Gradient checks over every learnable path of the tiny model.
inline std::vector<GradcheckResult> gradcheck_suite(double tolerance = 1e-4, std::uint64_t seed = 7) {
  std::vector<GradcheckResult> out;
  const NoiseSchedule sched = build_schedule(20, 1e-3, 0.2);
  Rng rng = make_rng(seed, 99);
  auto init = [&](const ModelConfig& c) {
    ParamSet<double> p = init_params<double>(c, seed);
    // Wider weights and non-zero biases so every path carries a sizeable gradient.
    for (auto& [_, t] : p.entries())
      for (auto& v : t.vec()) v = t.rank() == 1 ? 0.3 * randn<double>(rng, {1})[0] : 2.0 * v;
    return p;
  };
  const ModelConfig base = tiny_model_config();
  const int n = 2;
  Tensor<double> x = randn<double>(rng, {n, 3, 4, 4});
  for (auto& v : x.vec()) v = 0.5 + 0.2 * v;
  Tensor<double> cond = randn<double>(rng, {n, base.cond_dim});
  Tensor<double> eps = randn<double>(rng, {n, 3, 4, 4});
  const std::vector<int> ts{3, 17};

  out.push_back(gradcheck("ldm_loss", init(base), [&](ParamBinder<double>& p) {
    Tensor<double> z0(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) z0[i] = 2 * x[i] - 1;
    return ldm_loss_graph(p, base, sched, z0, std::span<const int>(ts), eps, cond);
  }, tolerance));

  auto sup_case = [&](const std::string& name, const ModelConfig& c, Task task, int feature_t) {
    Tensor<double> target;
    const int s = c.image_size;
    if (task == Task::normals) {
      Tape<double> tp(false);
      target = ops::normalize_channels(tp.constant(randn<double>(rng, {n, 3, s, s}))).value();
    } else if (task == Task::depth) {
      target = randn<double>(rng, {n, 1, s, s});
      for (auto& v : target.vec()) v = 1.0 + 0.3 * std::abs(v);
    } else {
      target = Tensor<double>({n, 1, s, s});
      for (auto& v : target.vec()) v = uniform_int(rng, 0, c.num_classes - 1);
    }
    Mask mask(static_cast<std::size_t>(n) * s * s, 1);
    mask[1] = 0;
    Tensor<double> xs = x;
    if (s != 4) {
      xs = randn<double>(rng, {n, 3, 4, 4});
      for (auto& v : xs.vec()) v = 0.5 + 0.2 * v;
    }
    out.push_back(gradcheck(name, init(c), [&, target, mask, xs, task, feature_t](ParamBinder<double>& p) {
      Tensor<double> z0(xs.shape());
      for (std::size_t i = 0; i < xs.size(); ++i) z0[i] = 2 * xs[i] - 1;
      Var<double> pred = graph::discriminative(p, c, sched, z0, cond, task, feature_t);
      return ops::task_loss(pred, target, task, mask);
    }, tolerance));
  };
  sup_case("sup_normals", base, Task::normals, 0);
  sup_case("sup_segmentation", base, Task::segmentation, 0);
  sup_case("sup_depth", base, Task::depth, 0);
  sup_case("sup_normals_feature_t", base, Task::normals, 5);
  sup_case("sup_normals_resample_up2", tiny_model_config(16, 2), Task::normals, 0);

  // Downward extension of the processed pyramid, read out by a scalar.
  {
    ModelConfig c = tiny_model_config(4, 0, 1);
    Tensor<double> probe = randn<double>(rng, {n, c.fuse_channels, 1, 1});
    out.push_back(gradcheck("resample_down", init(c), [&, c, probe](ParamBinder<double>& p) {
      Tensor<double> z0(x.shape());
      for (std::size_t i = 0; i < x.size(); ++i) z0[i] = 2 * x[i] - 1;
      std::vector<int> t0(n, 0);
      auto g = graph::denoiser(p, c, p.tape().constant(z0), std::span<const int>(t0), cond);
      auto proc = graph::resample(p, c, graph::fuse(p, g.raw), {1});
      return ops::mse_loss(proc.front(), probe);
    }, tolerance));
  }

  // Learned codec reconstruction path.
  {
    Codec<double> codec = Codec<double>::learned(seed, 3, 2, 3);
    Tensor<double> img = randn<double>(rng, {n, 3, 4, 4});
    Tensor<double> target(img.shape());
    for (std::size_t i = 0; i < img.size(); ++i) target[i] = 0.3 * img[i];
    out.push_back(gradcheck("codec_reconstruction", codec.params, [&, img, target](ParamBinder<double>& p) {
      return ops::mse_loss(graph::codec_decode_raw(p, graph::codec_encode(p, p.tape().constant(img))), target);
    }, tolerance));
  }
  return out;
}

}  // namespace unidiff
