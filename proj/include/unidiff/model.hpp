#pragma once

// The unified network: an epsilon-predicting encoder-decoder whose decoder
// stages double as a multi-scale feature pyramid, a fusion block over adjacent
// pyramid levels, optional factor-2 resampling stages and dense task heads.

#include <cmath>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "unidiff/autodiff.hpp"
#include "unidiff/diffusion.hpp"
#include "unidiff/params.hpp"
#include "unidiff/rng.hpp"

namespace unidiff {

enum class Task { normals, segmentation, depth };

inline std::string to_string(Task t) {
  switch (t) {
    case Task::normals: return "normals";
    case Task::segmentation: return "segmentation";
    case Task::depth: return "depth";
  }
  return "?";
}

inline Task parse_task(const std::string& s) {
  if (s == "normals" || s == "normal") return Task::normals;
  if (s == "segmentation" || s == "seg") return Task::segmentation;
  if (s == "depth") return Task::depth;
  throw ParameterError("unknown task tag '" + s + "'");
}

struct ModelConfig {
  int image_size = 32;
  int image_channels = 3;
  int latent_size = 32;
  int latent_channels = 3;
  std::vector<int> channels{8, 16, 32, 32};  // per level, finest first
  int embed_dim = 64;
  int time_freq_dim = 32;
  int cond_dim = 6;
  int fuse_channels = 16;
  int head_channels = 16;
  int num_classes = 4;
  int resample_up_stages = 0;
  int resample_down_stages = 0;
  int feature_t = 0;

  int levels() const { return static_cast<int>(channels.size()); }

  /// Spatial size of each raw pyramid level, coarsest first.
  std::vector<int> level_sizes() const {
    std::vector<int> s;
    for (int i = levels() - 1; i >= 0; --i) s.push_back(latent_size >> i);
    return s;
  }

  void validate() const {
    auto pow2 = [](int v) { return v > 0 && (v & (v - 1)) == 0; };
    if (levels() < 2) throw ConfigError("model needs at least two levels");
    if (!pow2(latent_size) || !pow2(image_size) || latent_size > image_size)
      throw ConfigError("image/latent sizes must be powers of two with latent <= image");
    if ((latent_size >> (levels() - 1)) < 1) throw ConfigError("too many levels for latent size");
    if (time_freq_dim % 2) throw ConfigError("time_freq_dim must be even");
    for (int c : channels)
      if (c < 1) throw ConfigError("channel counts must be positive");
  }

  nlohmann::json to_json() const {
    return {{"image_size", image_size},         {"image_channels", image_channels},
            {"latent_size", latent_size},       {"latent_channels", latent_channels},
            {"channels", channels},             {"embed_dim", embed_dim},
            {"time_freq_dim", time_freq_dim},   {"cond_dim", cond_dim},
            {"fuse_channels", fuse_channels},   {"head_channels", head_channels},
            {"num_classes", num_classes},       {"resample_up_stages", resample_up_stages},
            {"resample_down_stages", resample_down_stages}, {"feature_t", feature_t}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.image_size = j.at("image_size");
    c.image_channels = j.at("image_channels");
    c.latent_size = j.at("latent_size");
    c.latent_channels = j.at("latent_channels");
    c.channels = j.at("channels").get<std::vector<int>>();
    c.embed_dim = j.at("embed_dim");
    c.time_freq_dim = j.at("time_freq_dim");
    c.cond_dim = j.at("cond_dim");
    c.fuse_channels = j.at("fuse_channels");
    c.head_channels = j.at("head_channels");
    c.num_classes = j.at("num_classes");
    c.resample_up_stages = j.at("resample_up_stages");
    c.resample_down_stages = j.at("resample_down_stages");
    c.feature_t = j.value("feature_t", 0);
    return c;
  }

  std::string digest() const {
    const std::string s = to_json().dump();
    return hex32(crc32_bytes(s.data(), s.size()));
  }
};

/// Scene-descriptor conditioning. A null condition carries the zero vector.
template <class T>
struct Condition {
  std::vector<T> descriptor;
  bool null_flag = false;

  static Condition null(int dim) { return {std::vector<T>(static_cast<std::size_t>(dim), T(0)), true}; }
  static Condition of(std::vector<T> d) { return {std::move(d), false}; }
};

enum class PyramidKind { raw, processed };

template <class T>
struct FeaturePyramid {
  std::vector<Tensor<T>> levels;  // coarsest first
  PyramidKind kind = PyramidKind::raw;

  std::vector<int> sizes() const {
    std::vector<int> s;
    for (const auto& l : levels) s.push_back(l.dim(2));
    return s;
  }
};

// ---------------------------------------------------------------------------
// Architecture description

/// Name -> shape for every parameter of the given config.
inline std::map<std::string, Shape> param_shapes(const ModelConfig& cfg) {
  cfg.validate();
  std::map<std::string, Shape> s;
  const int e = cfg.embed_dim, tf = cfg.time_freq_dim, l = cfg.levels(), f = cfg.fuse_channels;
  auto conv = [&](const std::string& n, int co, int ci, int k) {
    s[n + ".w"] = {co, ci, k, k};
    s[n + ".b"] = {co};
  };
  auto lin = [&](const std::string& n, int out, int in) {
    s[n + ".w"] = {out, in};
    s[n + ".b"] = {out};
  };
  auto res = [&](const std::string& n, int c) {
    conv(n + ".conv1", c, c, 3);
    lin(n + ".emb", c, e);
    conv(n + ".conv2", c, c, 3);
  };
  const auto& ch = cfg.channels;

  lin("temb.fc1", e, tf);
  lin("temb.fc2", e, e);
  lin("cond", e, cfg.cond_dim);
  conv("enc.in", ch[0], cfg.latent_channels, 3);
  for (int i = 0; i < l; ++i) {
    res("enc" + std::to_string(i), ch[i]);
    if (i + 1 < l) conv("down" + std::to_string(i), ch[i + 1], ch[i], 3);
  }
  res("mid", ch[l - 1]);
  for (int i = l - 2; i >= 0; --i) {
    const std::string n = "dec" + std::to_string(i);
    conv(n + ".merge", ch[i], ch[i] + ch[i + 1], 3);
    res(n + ".res", ch[i]);
  }
  conv("out", cfg.latent_channels, ch[0], 3);

  // Raw pyramid channel counts, coarsest first: ch[l-1], ..., ch[0].
  for (int i = 1; i < l; ++i) conv("fuse" + std::to_string(i), f, ch[l - i] + ch[l - 1 - i], 3);
  for (int k = 0; k < cfg.resample_up_stages; ++k) {
    const std::string n = "resample.up" + std::to_string(k);
    s[n + ".deconv.w"] = {f, f, 2, 2};
    s[n + ".deconv.b"] = {f};
    conv(n + ".mix", f, 2 * f, 3);
  }
  for (int k = 0; k < cfg.resample_down_stages; ++k) {
    const std::string n = "resample.down" + std::to_string(k);
    conv(n + ".conv", f, f, 3);
    conv(n + ".mix", f, 2 * f, 3);
  }
  conv("head.mix", cfg.head_channels, (l - 1) * f, 3);
  conv("head.normals", 3, cfg.head_channels, 1);
  conv("head.segmentation", cfg.num_classes, cfg.head_channels, 1);
  conv("head.depth", 1, cfg.head_channels, 1);
  return s;
}

/// Parameter-name prefixes of the task-prediction part (everything after the denoiser).
inline bool is_head_param(const std::string& name) {
  return name.rfind("fuse", 0) == 0 || name.rfind("resample.", 0) == 0 || name.rfind("head.", 0) == 0;
}

template <class T>
ParamSet<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  Rng rng = make_rng(seed, 0x1417);
  ParamSet<T> p;
  std::normal_distribution<double> nd(0.0, 1.0);
  for (const auto& [name, shape] : param_shapes(cfg)) {
    Tensor<T> t(shape);
    const bool is_bias = name.size() > 2 && name.compare(name.size() - 2, 2, ".b") == 0;
    if (!is_bias) {
      int fan_in = shape[1];
      if (shape.size() == 4) fan_in = name.find("deconv") != std::string::npos ? shape[0] : shape[1] * shape[2] * shape[3];
      double std = 1.0 / std::sqrt(static_cast<double>(fan_in));
      if (name.find("conv2") != std::string::npos || name.rfind("out.", 0) == 0) std *= 0.5;
      for (auto& v : t.vec()) v = static_cast<T>(std * nd(rng));
    }
    p.add(name, std::move(t));
  }
  return p;
}

/// Throws if the parameter set does not match the architecture.
template <class T>
void check_params(const ParamSet<T>& p, const ModelConfig& cfg) {
  const auto shapes = param_shapes(cfg);
  for (const auto& [name, shape] : shapes) {
    if (!p.contains(name)) throw ShapeError("parameter '" + name + "' missing for this architecture");
    if (p.at(name).shape() != shape)
      throw ShapeError("parameter '" + name + "' has shape " + shape_str(p.at(name).shape()) + ", architecture expects " +
                       shape_str(shape));
  }
  for (const auto& [name, _] : p.entries())
    if (!shapes.count(name)) throw ShapeError("unexpected parameter '" + name + "'");
}

// ---------------------------------------------------------------------------
// Graph builders (operate on tape variables; shared by inference and training)

template <class T>
Tensor<T> timestep_features(std::span<const int> ts, int dim) {
  Tensor<T> f({static_cast<int>(ts.size()), dim});
  const int half = dim / 2;
  for (std::size_t n = 0; n < ts.size(); ++n)
    for (int i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * i / half);
      f[n * dim + i] = static_cast<T>(std::sin(ts[n] * freq));
      f[n * dim + half + i] = static_cast<T>(std::cos(ts[n] * freq));
    }
  return f;
}

template <class T>
Tensor<T> pack_conditions(std::span<const Condition<T>> conds, int dim) {
  Tensor<T> c({static_cast<int>(conds.size()), dim});
  for (std::size_t n = 0; n < conds.size(); ++n) {
    if (conds[n].null_flag) continue;
    if (static_cast<int>(conds[n].descriptor.size()) != dim)
      throw ShapeError("condition dimension " + std::to_string(conds[n].descriptor.size()) + ", expected " +
                       std::to_string(dim));
    std::copy(conds[n].descriptor.begin(), conds[n].descriptor.end(), c.data() + n * dim);
  }
  return c;
}

template <class T>
struct DenoiserGraph {
  Var<T> eps;
  std::vector<Var<T>> raw;  // coarsest first
};

namespace graph {

template <class T>
Var<T> conv(ParamBinder<T>& p, const std::string& n, Var<T> x, int stride = 1) {
  return ops::conv2d(x, p(n + ".w"), p(n + ".b"), stride);
}

template <class T>
Var<T> linear(ParamBinder<T>& p, const std::string& n, Var<T> x) {
  return ops::dense(x, p(n + ".w"), p(n + ".b"));
}

template <class T>
Var<T> res_block(ParamBinder<T>& p, const std::string& n, Var<T> h, Var<T> emb) {
  Var<T> a = conv(p, n + ".conv1", ops::silu(h));
  a = ops::add_channel_bias(a, linear(p, n + ".emb", emb));
  a = conv(p, n + ".conv2", ops::silu(a));
  return ops::add(h, a);
}

/// Bilinear x2 steps until the map reaches `size`.
template <class T>
Var<T> upsample_to(Var<T> x, int size) {
  if (x.dim(2) > size) throw ShapeError("upsample_to: cannot shrink " + shape_str(x.shape()));
  while (x.dim(2) < size) x = ops::upsample2(x);
  return x;
}

template <class T>
DenoiserGraph<T> denoiser(ParamBinder<T>& p, const ModelConfig& cfg, Var<T> z, std::span<const int> ts,
                          const Tensor<T>& cond) {
  Tape<T>& tp = p.tape();
  const int l = cfg.levels();
  if (z.dim(1) != cfg.latent_channels || z.dim(2) != cfg.latent_size || z.dim(3) != cfg.latent_size)
    throw ShapeError("denoiser input " + shape_str(z.shape()) + " does not match latent config");
  if (static_cast<int>(ts.size()) != z.dim(0)) throw ShapeError("one timestep per batch item required");

  Var<T> tf = tp.constant(timestep_features<T>(ts, cfg.time_freq_dim));
  Var<T> emb = linear(p, "temb.fc2", ops::silu(linear(p, "temb.fc1", tf)));
  emb = ops::silu(ops::add(emb, linear(p, "cond", tp.constant(cond))));

  std::vector<Var<T>> skips;
  Var<T> h = conv(p, "enc.in", z);
  for (int i = 0; i < l; ++i) {
    h = res_block(p, "enc" + std::to_string(i), h, emb);
    skips.push_back(h);
    if (i + 1 < l) h = conv(p, "down" + std::to_string(i), ops::silu(h), 2);
  }
  h = res_block(p, "mid", h, emb);

  DenoiserGraph<T> g;
  g.raw.push_back(h);
  for (int i = l - 2; i >= 0; --i) {
    const std::string n = "dec" + std::to_string(i);
    Var<T> u = ops::concat_channels(ops::upsample2(h), skips[static_cast<std::size_t>(i)]);
    h = res_block(p, n + ".res", conv(p, n + ".merge", u), emb);
    g.raw.push_back(h);
  }
  g.eps = conv(p, "out", h);
  return g;
}

template <class T>
std::vector<Var<T>> fuse(ParamBinder<T>& p, const std::vector<Var<T>>& raw) {
  if (raw.size() < 2) throw ShapeError("fuse_pyramid needs at least two levels");
  std::vector<Var<T>> out;
  for (std::size_t i = 1; i < raw.size(); ++i) {
    Var<T> u = ops::concat_channels(ops::upsample2(raw[i - 1]), raw[i]);
    out.push_back(ops::silu(conv(p, "fuse" + std::to_string(i), u)));
  }
  return out;
}

template <class T>
Var<T> up_stage(ParamBinder<T>& p, int k, Var<T> f) {
  const std::string n = "resample.up" + std::to_string(k);
  Var<T> d = ops::deconv2x2(f, p(n + ".deconv.w"), p(n + ".deconv.b"));
  return ops::silu(conv(p, n + ".mix", ops::concat_channels(ops::upsample2(f), d)));
}

template <class T>
Var<T> down_stage(ParamBinder<T>& p, int k, Var<T> f) {
  const std::string n = "resample.down" + std::to_string(k);
  Var<T> c = conv(p, n + ".conv", f, 2);
  return ops::silu(conv(p, n + ".mix", ops::concat_channels(ops::avgpool2(f), c)));
}

inline bool is_pow2_ratio(int a, int b) {
  if (a <= 0 || b <= 0) return false;
  const int hi = std::max(a, b), lo = std::min(a, b);
  if (hi % lo) return false;
  const int r = hi / lo;
  return (r & (r - 1)) == 0;
}

/// Adds levels for target sizes outside the current range by chained factor-2
/// stages. Sizes already present pass through unchanged.
template <class T>
std::vector<Var<T>> resample(ParamBinder<T>& p, const ModelConfig& cfg, std::vector<Var<T>> levels,
                             const std::vector<int>& targets) {
  if (levels.empty()) throw ShapeError("resample_pyramid on empty pyramid");
  for (int t : targets) {
    bool ok = false;
    for (auto& l : levels) ok = ok || is_pow2_ratio(t, l.dim(2));
    if (!ok) throw ParameterError("target size " + std::to_string(t) + " is not a power-of-two multiple/divisor of any level");
  }
  auto has = [&](int s) {
    for (auto& l : levels)
      if (l.dim(2) == s) return true;
    return false;
  };
  int up_used = 0, down_used = 0;
  for (int t : targets) {
    while (!has(t) && t > levels.back().dim(2)) {
      if (up_used >= cfg.resample_up_stages)
        throw ConfigError("resample needs more upsampling stages than configured (" +
                          std::to_string(cfg.resample_up_stages) + ")");
      levels.push_back(up_stage(p, up_used++, levels.back()));
    }
    while (!has(t) && t < levels.front().dim(2)) {
      if (down_used >= cfg.resample_down_stages)
        throw ConfigError("resample needs more downsampling stages than configured (" +
                          std::to_string(cfg.resample_down_stages) + ")");
      levels.insert(levels.begin(), down_stage(p, down_used++, levels.front()));
    }
    if (!has(t)) throw ParameterError("target size " + std::to_string(t) + " falls between existing levels");
  }
  return levels;
}

/// Task prediction from the finest (levels - 1) maps of a processed pyramid.
template <class T>
Var<T> head(ParamBinder<T>& p, const ModelConfig& cfg, const std::vector<Var<T>>& proc, Task task) {
  const auto used = static_cast<std::size_t>(cfg.levels() - 1);
  if (proc.size() < used) throw ShapeError("head needs " + std::to_string(used) + " processed levels");
  const int size = proc.back().dim(2);
  Var<T> cat = upsample_to(proc[proc.size() - used], size);
  for (std::size_t i = proc.size() - used + 1; i < proc.size(); ++i)
    cat = ops::concat_channels(cat, upsample_to(proc[i], size));
  Var<T> h = ops::silu(conv(p, "head.mix", cat));
  switch (task) {
    case Task::normals: return ops::normalize_channels(conv(p, "head.normals", h));
    case Task::segmentation: return conv(p, "head.segmentation", h);
    case Task::depth: return ops::softplus(conv(p, "head.depth", h));
  }
  throw ParameterError("unknown task");
}

/// Latent features -> dense prediction at image resolution.
template <class T>
Var<T> predict_from_raw(ParamBinder<T>& p, const ModelConfig& cfg, const std::vector<Var<T>>& raw, Task task) {
  std::vector<Var<T>> proc = fuse(p, raw);
  if (cfg.image_size > proc.back().dim(2)) proc = resample(p, cfg, proc, {cfg.image_size});
  Var<T> pred = head(p, cfg, proc, task);
  return upsample_to(pred, cfg.image_size);
}

}  // namespace graph

// ---------------------------------------------------------------------------
// Tensor-level operations

template <class T>
struct DenoiseResult {
  Tensor<T> eps_hat;
  FeaturePyramid<T> pyramid;
};

/// One evaluation of the denoiser on a batch (n, c, h, w); one timestep per item.
template <class T>
DenoiseResult<T> denoise_eps(const ParamSet<T>& theta, const ModelConfig& cfg, const Tensor<T>& z_t,
                             std::span<const int> ts, std::span<const Condition<T>> conds) {
  check_params(theta, cfg);
  if (conds.size() != ts.size()) throw ShapeError("one condition per batch item required");
  Tape<T> tape(false);
  ParamBinder<T> p(theta, tape, false);
  auto g = graph::denoiser(p, cfg, tape.constant(z_t), ts, pack_conditions(conds, cfg.cond_dim));
  DenoiseResult<T> r;
  r.eps_hat = g.eps.value();
  for (auto& v : g.raw) r.pyramid.levels.push_back(v.value());
  r.pyramid.kind = PyramidKind::raw;
  return r;
}

template <class T>
DenoiseResult<T> denoise_eps(const ParamSet<T>& theta, const ModelConfig& cfg, const LatentState<T>& z_t,
                             const Condition<T>& cond) {
  const int n = z_t.values.rank() == 4 ? z_t.values.dim(0) : 1;
  Tensor<T> z = z_t.values.rank() == 4 ? z_t.values : z_t.values.reshaped({1, z_t.values.dim(0), z_t.values.dim(1), z_t.values.dim(2)});
  std::vector<int> ts(static_cast<std::size_t>(n), z_t.t);
  std::vector<Condition<T>> cs(static_cast<std::size_t>(n), cond);
  return denoise_eps(theta, cfg, z, std::span<const int>(ts), std::span<const Condition<T>>(cs));
}

template <class T>
FeaturePyramid<T> fuse_pyramid(const FeaturePyramid<T>& raw, const ParamSet<T>& theta) {
  if (raw.levels.size() < 2) throw ShapeError("fuse_pyramid needs at least two levels");
  Tape<T> tape(false);
  ParamBinder<T> p(theta, tape, false);
  std::vector<Var<T>> in;
  for (const auto& l : raw.levels) in.push_back(tape.constant(l));
  FeaturePyramid<T> out;
  out.kind = PyramidKind::processed;
  for (auto& v : graph::fuse(p, in)) out.levels.push_back(v.value());
  return out;
}

template <class T>
FeaturePyramid<T> resample_pyramid(const FeaturePyramid<T>& proc, const std::vector<int>& targets,
                                   const ParamSet<T>& theta, const ModelConfig& cfg) {
  Tape<T> tape(false);
  ParamBinder<T> p(theta, tape, false);
  std::vector<Var<T>> in;
  for (const auto& l : proc.levels) in.push_back(tape.constant(l));
  FeaturePyramid<T> out;
  out.kind = proc.kind;
  for (auto& v : graph::resample(p, cfg, in, targets)) out.levels.push_back(v.value());
  return out;
}

template <class T>
Tensor<T> task_predict(const ParamSet<T>& theta, const ModelConfig& cfg, const FeaturePyramid<T>& proc, Task task) {
  Tape<T> tape(false);
  ParamBinder<T> p(theta, tape, false);
  std::vector<Var<T>> in;
  for (const auto& l : proc.levels) in.push_back(tape.constant(l));
  return graph::head(p, cfg, in, task).value();
}

/// Softmax over the class axis of (n, k, h, w) logits.
template <class T>
Tensor<T> softmax_channels(const Tensor<T>& logits) {
  Tensor<T> out(logits.shape());
  const int n_ = logits.dim(0), k = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
  for (int n = 0; n < n_; ++n)
    for (int p = 0; p < hw; ++p) {
      T m = logits.plane(n, 0)[p];
      for (int c = 1; c < k; ++c) m = std::max(m, logits.plane(n, c)[p]);
      T s = 0;
      for (int c = 0; c < k; ++c) s += std::exp(logits.plane(n, c)[p] - m);
      for (int c = 0; c < k; ++c) out.plane(n, c)[p] = std::exp(logits.plane(n, c)[p] - m) / s;
    }
  return out;
}

/// Per-pixel argmax class map of (n, k, h, w) logits -> (n, h, w) ints.
template <class T>
std::vector<int> argmax_channels(const Tensor<T>& logits) {
  const int n_ = logits.dim(0), k = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
  std::vector<int> out(static_cast<std::size_t>(n_) * hw);
  for (int n = 0; n < n_; ++n)
    for (int p = 0; p < hw; ++p) {
      int best = 0;
      for (int c = 1; c < k; ++c)
        if (logits.plane(n, c)[p] > logits.plane(n, best)[p]) best = c;
      out[static_cast<std::size_t>(n) * hw + p] = best;
    }
  return out;
}

}  // namespace unidiff
