#pragma once

// Warm-up on real pairs, then the dual-parameter loop: theta_E learns from real
// plus synthetic pairs labelled by theta_C, and theta_C follows theta_E by EMA.

#include <cmath>
#include <deque>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "unidiff/checkpoint.hpp"
#include "unidiff/dataset.hpp"
#include "unidiff/losses.hpp"
#include "unidiff/metrics.hpp"
#include "unidiff/optim.hpp"
#include "unidiff/synthesis.hpp"

namespace unidiff {

enum class TrainMode { self_improve, gna, warmup_only };

inline std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::self_improve: return "self-improve";
    case TrainMode::gna: return "gna";
    case TrainMode::warmup_only: return "warmup-only";
  }
  return "?";
}

inline TrainMode parse_mode(const std::string& s) {
  if (s == "self-improve") return TrainMode::self_improve;
  if (s == "gna") return TrainMode::gna;
  if (s == "warmup-only") return TrainMode::warmup_only;
  throw ParameterError("unknown mode '" + s + "'");
}

enum class EmaScope { full, head };

struct TrainConfig {
  int m = 8;
  int n = 2;
  double ema_alpha = 0.998;
  int ema_interval_samples = 40;
  int gen_t = 600;
  int warmup_steps = 1000;
  int improve_steps = 1000;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  TrainMode mode = TrainMode::self_improve;
  Task task = Task::normals;
  double ldm_weight = 1.0;
  double syn_weight = 1.0;
  EmaScope ema_scope = EmaScope::full;
  int plateau_patience = 200;
  int plateau_window = 100;
  bool conditioned = true;

  void validate() const {
    if (m < 1) throw ConfigError("real batch m must be positive");
    if (n < 0) throw ConfigError("synthetic batch n must be non-negative");
    if (!(ema_alpha >= 0 && ema_alpha < 1)) throw ConfigError("ema_alpha must lie in [0, 1)");
    if (ema_interval_samples < 1) throw ConfigError("ema interval must be positive");
    if (warmup_steps < 0 || improve_steps < 0) throw ConfigError("step counts must be non-negative");
    if (!(lr > 0)) throw ConfigError("learning rate must be positive");
    if (mode == TrainMode::warmup_only && n > 0) throw ConfigError("warmup-only mode takes no synthetic pairs (use n = 0)");
  }

  nlohmann::json to_json() const {
    return {{"m", m},
            {"n", n},
            {"ema_alpha", ema_alpha},
            {"ema_interval_samples", ema_interval_samples},
            {"gen_t", gen_t},
            {"warmup_steps", warmup_steps},
            {"improve_steps", improve_steps},
            {"lr", lr},
            {"seed", seed},
            {"mode", to_string(mode)},
            {"task", to_string(task)},
            {"ldm_weight", ldm_weight},
            {"syn_weight", syn_weight},
            {"ema_scope", ema_scope == EmaScope::full ? "full" : "head"},
            {"plateau_patience", plateau_patience},
            {"plateau_window", plateau_window},
            {"conditioned", conditioned}};
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.m = j.at("m");
    c.n = j.at("n");
    c.ema_alpha = j.at("ema_alpha");
    c.ema_interval_samples = j.at("ema_interval_samples");
    c.gen_t = j.at("gen_t");
    c.warmup_steps = j.at("warmup_steps");
    c.improve_steps = j.at("improve_steps");
    c.lr = j.at("lr");
    c.seed = j.at("seed");
    c.mode = parse_mode(j.at("mode"));
    c.task = parse_task(j.at("task"));
    c.ldm_weight = j.at("ldm_weight");
    c.syn_weight = j.at("syn_weight");
    c.ema_scope = j.at("ema_scope") == "full" ? EmaScope::full : EmaScope::head;
    c.plateau_patience = j.at("plateau_patience");
    c.plateau_window = j.at("plateau_window");
    c.conditioned = j.at("conditioned");
    return c;
  }

  /// Identifies a run for resumption; the step budgets are left out so a run can be extended.
  std::string digest() const {
    nlohmann::json j = to_json();
    j.erase("warmup_steps");
    j.erase("improve_steps");
    const std::string s = j.dump();
    return hex32(crc32_bytes(s.data(), s.size()));
  }
};

/// theta_C <- alpha * theta_C + (1 - alpha) * theta_E over the selected scope.
/// Each result is clamped to the interval spanned by its two inputs.
template <class T>
void ema_update(ParamSet<T>& theta_c, const ParamSet<T>& theta_e, double alpha, EmaScope scope = EmaScope::full) {
  if (!(alpha >= 0 && alpha < 1)) throw ParameterError("ema alpha must lie in [0, 1), got " + std::to_string(alpha));
  require_same_structure(theta_c, theta_e);
  const T w = static_cast<T>(1 - alpha);
  for (auto& [name, c] : theta_c.entries()) {
    if (scope == EmaScope::head && !is_head_param(name)) continue;
    const Tensor<T>& e = theta_e.at(name);
    for (std::size_t i = 0; i < c.size(); ++i) {
      const T lo = std::min(c[i], e[i]), hi = std::max(c[i], e[i]);
      c[i] = std::clamp(static_cast<T>(c[i] + w * (e[i] - c[i])), lo, hi);
    }
  }
}

struct DualParams {
  ParamSet<float> theta_c;
  ParamSet<float> theta_e;
  double ema_alpha = 0.998;
  int samples_since_ema = 0;

  static DualParams from_warmup(const ParamSet<float>& theta_w, double alpha) { return {theta_w, theta_w, alpha, 0}; }
};

/// One logged training iteration.
struct StepRecord {
  std::string stage;
  int step = 0;
  double loss = 0, sup = 0, syn = 0, ldm = 0;
  bool ema = false;
  int ema_count = 0;
  std::vector<int> real_idx;
  std::vector<int> syn_idx;
  bool plateau_stop = false;

  nlohmann::json to_json() const {
    return {{"stage", stage}, {"step", step}, {"loss", loss},          {"sup", sup},
            {"syn", syn},     {"ldm", ldm},   {"ema", ema},            {"ema_count", ema_count},
            {"real_idx", real_idx}, {"syn_idx", syn_idx}, {"plateau_stop", plateau_stop}};
  }
};

/// Differentiable slice of items [begin, end) along the batch axis.
template <class T>
Var<T> slice_batch(Var<T> x, int begin, int end) {
  Tensor<T> out = x.value().slice(begin, end);
  return x.tape->push(std::move(out), x.tape->requires_grad(x.id), [x, begin, end](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T> gx = Tensor<T>::zeros_like(x.value());
    const std::size_t is = gx.item_size();
    std::copy(g.data(), g.data() + g.size(), gx.data() + static_cast<std::size_t>(begin) * is);
    (void)end;
    t.accumulate(x.id, gx);
  });
}

/// Stateful, resumable trainer. Randomness comes from three independent streams:
/// batch selection, diffusion noise and synthesis.
class Trainer {
 public:
  Trainer(Pipeline pl, TrainConfig cfg, const Dataset& data, const Dataset* store = nullptr)
      : pl_(std::move(pl)), cfg_(cfg), data_(data), store_(store) {
    cfg_.validate();
    if (data_.samples.empty()) throw ParameterError("training needs a non-empty dataset");
    for (const auto& s : data_.samples)
      if (!s.has_labels()) throw ParameterError("training sample '" + s.id + "' has no labels");
    rng_data_ = make_rng(cfg_.seed, 1);
    rng_noise_ = make_rng(cfg_.seed, 2);
    rng_synth_ = make_rng(cfg_.seed, 3);
  }

  /// Starts warm-up from the given parameters.
  void start_warmup(const ParamSet<float>& theta0) {
    check_params(theta0, pl_.model);
    dual_.theta_e = theta0;
    dual_.theta_c = ParamSet<float>{};
    opt_ = OptimState<float>::for_params(theta0);
    stage_ = "warmup";
    step_ = 0;
    plateau_ = {};
  }

  /// Copies theta_E into both parameter sets; optimizer moments are kept.
  void start_improve() {
    dual_ = DualParams::from_warmup(dual_.theta_e, cfg_.ema_alpha);
    stage_ = "improve";
    step_ = 0;
    ema_count_ = 0;
  }

  /// Starts the self-improving stage directly from given parameters and moments.
  void start_improve(const ParamSet<float>& theta_w, const OptimState<float>& opt) {
    check_params(theta_w, pl_.model);
    dual_.theta_e = theta_w;
    opt_ = opt.m.size() ? opt : OptimState<float>::for_params(theta_w);
    start_improve();
  }

  /// Enters the self-improving stage where a saved warm-up left off: parameters,
  /// optimizer moments and all three random streams carry over.
  void start_improve(const Checkpoint& warm) {
    if (warm.model.digest() != pl_.model.digest()) throw DigestMismatchError("warm-up checkpoint architecture differs");
    const auto& s = warm.state;
    dual_.theta_e = warm.sets.at("theta_e");
    check_params(dual_.theta_e, pl_.model);
    opt_.m = warm.sets.at("adam_m");
    opt_.v = warm.sets.at("adam_v");
    opt_.step = s.at("opt_step");
    rng_data_ = rng_from_state(s.at("rng_data"));
    rng_noise_ = rng_from_state(s.at("rng_noise"));
    rng_synth_ = rng_from_state(s.at("rng_synth"));
    start_improve();
  }

  StepRecord step() {
    if (stage_ == "warmup") return warmup_step();
    if (stage_ == "improve") return improve_step();
    throw ConfigError("trainer has not been started");
  }

  /// Warm-up until warmup_steps or a plateau of the moving-average loss.
  ParamSet<float> run_warmup(const std::function<void(const StepRecord&)>& log = {}) {
    while (step_ < cfg_.warmup_steps && !plateau_.stopped) {
      StepRecord r = warmup_step();
      if (log) log(r);
    }
    return dual_.theta_e;
  }

  /// Runs the configured mode to improve_steps; returns the inference parameters.
  ParamSet<float> run_improve(const std::function<void(const StepRecord&)>& log = {}) {
    while (step_ < cfg_.improve_steps) {
      StepRecord r = improve_step();
      if (log) log(r);
    }
    return result();
  }

  /// theta_C for the dual modes, theta_E for warmup-only.
  const ParamSet<float>& result() const {
    return cfg_.mode == TrainMode::warmup_only || stage_ == "warmup" ? dual_.theta_e : dual_.theta_c;
  }

  const DualParams& dual() const { return dual_; }
  const OptimState<float>& optimizer() const { return opt_; }
  const std::string& stage() const { return stage_; }
  int step_index() const { return step_; }
  bool plateaued() const { return plateau_.stopped; }
  const TrainConfig& config() const { return cfg_; }
  const Pipeline& pipeline() const { return pl_; }

  /// Loss of a logged iteration recomputed from its batch indices (no update).
  /// Requires the parameter sets and noise stream as they were before that step.
  struct Losses {
    double sup, syn, ldm, total;
  };

  // ------------------------------------------------------------------ persistence

  Checkpoint to_checkpoint() const {
    Checkpoint ck;
    ck.model = pl_.model;
    ck.schedule = pl_.schedule;
    ck.config_digest = cfg_.digest();
    ck.sets["theta_e"] = dual_.theta_e;
    if (dual_.theta_c.size()) ck.sets["theta_c"] = dual_.theta_c;
    ck.sets["adam_m"] = opt_.m;
    ck.sets["adam_v"] = opt_.v;
    if (pl_.codec.mode == CodecMode::learned) ck.sets["codec"] = pl_.codec.params;
    nlohmann::json window = nlohmann::json::array();
    for (double v : plateau_.window) window.push_back(v);
    ck.state = {{"train_config", cfg_.to_json()},
                {"stage", stage_},
                {"step", step_},
                {"opt_step", opt_.step},
                {"samples_since_ema", dual_.samples_since_ema},
                {"ema_count", ema_count_},
                {"ema_alpha", dual_.ema_alpha},
                {"rng_data", rng_state(rng_data_)},
                {"rng_noise", rng_state(rng_noise_)},
                {"rng_synth", rng_state(rng_synth_)},
                {"plateau",
                 {{"window", window},
                  {"sum", plateau_.sum},
                  {"best", std::isfinite(plateau_.best) ? nlohmann::json(plateau_.best) : nlohmann::json()},
                  {"since_best", plateau_.since_best},
                  {"stopped", plateau_.stopped}}},
                {"codec_mode", pl_.codec.mode == CodecMode::learned ? "learned" : "identity"}};
    return ck;
  }

  /// Restores the full trainer state; the run configuration must match.
  void restore(const Checkpoint& ck) {
    if (ck.model.digest() != pl_.model.digest()) throw DigestMismatchError("checkpoint architecture differs from trainer");
    if (ck.config_digest != cfg_.digest())
      throw DigestMismatchError("checkpoint was produced by a different training configuration");
    const auto& s = ck.state;
    stage_ = s.at("stage");
    step_ = s.at("step");
    dual_.theta_e = ck.sets.at("theta_e");
    check_params(dual_.theta_e, pl_.model);
    dual_.theta_c = ck.sets.count("theta_c") ? ck.sets.at("theta_c") : ParamSet<float>{};
    dual_.ema_alpha = s.at("ema_alpha");
    dual_.samples_since_ema = s.at("samples_since_ema");
    ema_count_ = s.at("ema_count");
    opt_.m = ck.sets.at("adam_m");
    opt_.v = ck.sets.at("adam_v");
    opt_.step = s.at("opt_step");
    rng_data_ = rng_from_state(s.at("rng_data"));
    rng_noise_ = rng_from_state(s.at("rng_noise"));
    rng_synth_ = rng_from_state(s.at("rng_synth"));
    const auto& p = s.at("plateau");
    plateau_.window.clear();
    for (double v : p.at("window")) plateau_.window.push_back(v);
    plateau_.sum = p.at("sum");
    plateau_.best = p.at("best").is_null() ? std::numeric_limits<double>::infinity() : p.at("best").get<double>();
    plateau_.since_best = p.at("since_best");
    plateau_.stopped = p.at("stopped");
  }

 private:
  struct Plateau {
    std::deque<double> window;
    double sum = 0;
    double best = std::numeric_limits<double>::infinity();
    int since_best = 0;
    bool stopped = false;
  };

  std::vector<int> draw_indices(int k, int pool, Rng& rng) {
    std::vector<int> all(static_cast<std::size_t>(pool));
    std::iota(all.begin(), all.end(), 0);
    k = std::min(k, pool);
    for (int i = 0; i < k; ++i) std::swap(all[static_cast<std::size_t>(i)], all[static_cast<std::size_t>(uniform_int(rng, i, pool - 1))]);
    all.resize(static_cast<std::size_t>(k));
    return all;
  }

  /// Forward + backward over one mixed batch; returns the per-term losses and
  /// leaves the gradient in `grads`.
  Losses evaluate(const ParamSet<float>& theta, const Batch& real, const std::optional<Batch>& syn,
                  const std::vector<int>& ldm_t, const Tensor<float>& ldm_eps, ParamSet<float>* grads) {
    Tape<float> tape(grads != nullptr);
    ParamBinder<float> p(theta, tape, true);
    const int mr = real.images.dim(0);
    Tensor<float> images = real.images;
    std::vector<Condition<float>> conds = real.conds;
    if (syn) {
      std::array<Tensor<float>, 2> parts{real.images, syn->images};
      images = concat_batch(std::span<const Tensor<float>>(parts));
      conds.insert(conds.end(), syn->conds.begin(), syn->conds.end());
    }
    const int total = images.dim(0);
    Tensor<float> z0 = encode(pl_.codec, images);
    Tensor<float> cond = pack_conditions(std::span<const Condition<float>>(conds), pl_.model.cond_dim);
    Var<float> pred = graph::discriminative(p, pl_.model, pl_.schedule, z0, cond, cfg_.task, pl_.model.feature_t);
    Var<float> sup = ops::task_loss(total == mr ? pred : slice_batch(pred, 0, mr), real.targets, cfg_.task, real.mask);
    std::vector<Var<float>> terms{sup};
    Losses l{sup.value()[0], 0, 0, 0};
    if (syn) {
      Var<float> sl = ops::task_loss(slice_batch(pred, mr, total), syn->targets, cfg_.task, syn->mask);
      l.syn = sl.value()[0];
      terms.push_back(cfg_.syn_weight == 1.0 ? sl : ops::scale(sl, static_cast<float>(cfg_.syn_weight)));
    }
    if (cfg_.ldm_weight > 0) {
      Tensor<float> zr = z0.slice(0, mr);
      Tensor<float> cr = cond.slice(0, mr);
      Var<float> ll = ldm_loss_graph(p, pl_.model, pl_.schedule, zr, std::span<const int>(ldm_t), ldm_eps, cr);
      l.ldm = ll.value()[0];
      terms.push_back(ops::scale(ll, static_cast<float>(cfg_.ldm_weight)));
    }
    Var<float> loss = ops::sum_scalars(terms);
    l.total = loss.value()[0];
    if (grads) {
      if (std::isfinite(l.total)) tape.backward(loss);
      *grads = p.gradients();
    }
    return l;
  }

  void draw_ldm_noise(int count, std::vector<int>& ts, Tensor<float>& eps) {
    ts.resize(static_cast<std::size_t>(count));
    for (auto& t : ts) t = uniform_int(rng_noise_, 1, pl_.schedule.t_max());
    eps = randn<float>(rng_noise_, {count, pl_.model.latent_channels, pl_.model.latent_size, pl_.model.latent_size});
  }

  StepRecord apply(Losses l, StepRecord r, const ParamSet<float>& grads) {
    r.loss = l.total;
    r.sup = l.sup;
    r.syn = l.syn;
    r.ldm = l.ldm;
    if (!std::isfinite(l.total)) throw DivergenceError("non-finite training loss", step_);
    OptimConfig oc;
    oc.lr = cfg_.lr;
    optimize_step(dual_.theta_e, grads, opt_, oc);
    ++step_;
    return r;
  }

  StepRecord warmup_step() {
    StepRecord r;
    r.stage = "warmup";
    r.step = step_;
    r.real_idx = draw_indices(cfg_.m, data_.size(), rng_data_);
    Batch real = make_batch(data_.samples, r.real_idx, cfg_.task, cfg_.conditioned);
    std::vector<int> ts;
    Tensor<float> eps;
    draw_ldm_noise(real.images.dim(0), ts, eps);
    ParamSet<float> grads;
    r = apply(evaluate(dual_.theta_e, real, std::nullopt, ts, eps, &grads), r, grads);
    track_plateau(r.loss);
    r.plateau_stop = plateau_.stopped;
    return r;
  }

  void track_plateau(double loss) {
    plateau_.window.push_back(loss);
    plateau_.sum += loss;
    if (static_cast<int>(plateau_.window.size()) > cfg_.plateau_window) {
      plateau_.sum -= plateau_.window.front();
      plateau_.window.pop_front();
    }
    if (static_cast<int>(plateau_.window.size()) < cfg_.plateau_window) return;
    const double ma = plateau_.sum / static_cast<double>(plateau_.window.size());
    if (ma < plateau_.best) {
      plateau_.best = ma;
      plateau_.since_best = 0;
    } else if (++plateau_.since_best >= cfg_.plateau_patience) {
      plateau_.stopped = true;
    }
  }

  Batch synthetic_batch(std::vector<int>& syn_idx) {
    Batch b;
    std::vector<Tensor<float>> images;
    if (store_ && store_->size() > 0) {
      syn_idx = draw_indices(cfg_.n, store_->size(), rng_synth_);
      for (int i : syn_idx) {
        const Sample& s = store_->samples[static_cast<std::size_t>(i)];
        images.push_back(s.image);
        b.conds.push_back(cfg_.conditioned ? Condition<float>::of(s.descriptor)
                                           : Condition<float>::null(static_cast<int>(s.descriptor.size())));
      }
      b.images = stack(std::span<const Tensor<float>>(images));
    } else {
      // No store: generate on the fly from the synthesis stream.
      syn_idx = draw_indices(cfg_.n, data_.size(), rng_synth_);
      std::vector<Rng> rngs;
      std::vector<Tensor<float>> refs;
      for (int i : syn_idx) {
        const Sample& s = data_.samples[static_cast<std::size_t>(i)];
        rngs.push_back(make_rng(rng_synth_(), 0x5e17));
        refs.push_back(s.image);
        b.conds.push_back(cfg_.conditioned ? Condition<float>::of(s.descriptor)
                                           : Condition<float>::null(static_cast<int>(s.descriptor.size())));
      }
      b.images = cfg_.mode == TrainMode::gna
                     ? generate_full_images(dual_.theta_c, pl_, b.conds, rngs)
                     : generate_partial_images(dual_.theta_c, pl_, stack(std::span<const Tensor<float>>(refs)),
                                               cfg_.gen_t, b.conds, rngs);
    }
    b.targets = labels_from_prediction(annotate(dual_.theta_c, pl_, b.images, b.conds, cfg_.task), cfg_.task);
    return b;
  }

  StepRecord improve_step() {
    StepRecord r;
    r.stage = "improve";
    r.step = step_;
    r.real_idx = draw_indices(cfg_.m, data_.size(), rng_data_);
    Batch real = make_batch(data_.samples, r.real_idx, cfg_.task, cfg_.conditioned);
    std::optional<Batch> syn;
    if (cfg_.n > 0) syn = synthetic_batch(r.syn_idx);
    std::vector<int> ts;
    Tensor<float> eps;
    draw_ldm_noise(real.images.dim(0), ts, eps);
    ParamSet<float> grads;
    r = apply(evaluate(dual_.theta_e, real, syn, ts, eps, &grads), r, grads);
    if (cfg_.mode != TrainMode::warmup_only) {
      dual_.samples_since_ema += real.images.dim(0) + (syn ? syn->images.dim(0) : 0);
      while (dual_.samples_since_ema >= cfg_.ema_interval_samples) {
        dual_.samples_since_ema -= cfg_.ema_interval_samples;
        ema_update(dual_.theta_c, dual_.theta_e, dual_.ema_alpha, cfg_.ema_scope);
        ++ema_count_;
        r.ema = true;
      }
    }
    r.ema_count = ema_count_;
    return r;
  }

  Pipeline pl_;
  TrainConfig cfg_;
  const Dataset& data_;
  const Dataset* store_;
  DualParams dual_;
  OptimState<float> opt_;
  std::string stage_;
  int step_ = 0;
  int ema_count_ = 0;
  Plateau plateau_;
  Rng rng_data_, rng_noise_, rng_synth_;

 public:
  /// Recomputes the losses of a logged record from its batch indices, using the
  /// given parameters and the noise that step drew. Used to audit loss accounting.
  Losses recompute(const StepRecord& r, const ParamSet<float>& theta_e, const ParamSet<float>& theta_c,
                   const Tensor<float>& syn_images, const std::vector<int>& ldm_t, const Tensor<float>& ldm_eps) {
    Batch real = make_batch(data_.samples, r.real_idx, cfg_.task, cfg_.conditioned);
    std::optional<Batch> syn;
    if (!r.syn_idx.empty()) {
      Batch b;
      b.images = syn_images;
      const Dataset& src = store_ ? *store_ : data_;
      for (int i : r.syn_idx) {
        const Sample& s = src.samples[static_cast<std::size_t>(i)];
        b.conds.push_back(cfg_.conditioned ? Condition<float>::of(s.descriptor)
                                           : Condition<float>::null(static_cast<int>(s.descriptor.size())));
      }
      b.targets = labels_from_prediction(annotate(theta_c, pl_, b.images, b.conds, cfg_.task), cfg_.task);
      syn = std::move(b);
    }
    return evaluate(theta_e, real, syn, ldm_t, ldm_eps, nullptr);
  }

  /// The LDM noise the next step will draw, without consuming it.
  std::pair<std::vector<int>, Tensor<float>> peek_ldm_noise() const {
    Rng copy = rng_noise_;
    std::vector<int> ts(static_cast<std::size_t>(std::min(cfg_.m, data_.size())));
    for (auto& t : ts) t = uniform_int(copy, 1, pl_.schedule.t_max());
    Tensor<float> eps = randn<float>(copy, {static_cast<int>(ts.size()), pl_.model.latent_channels,
                                            pl_.model.latent_size, pl_.model.latent_size});
    return {ts, eps};
  }
};

/// Runs the discriminative pipeline over a labelled dataset and scores it.
inline MetricReport evaluate_model(const ParamSet<float>& theta, const Pipeline& pl, const Dataset& data, Task task,
                                   bool conditioned = true, int batch = 16) {
  if (data.samples.empty()) throw ParameterError("evaluation dataset is empty");
  std::vector<Tensor<float>> preds, targets;
  Mask mask;
  for (int start = 0; start < data.size(); start += batch) {
    std::vector<int> idx;
    for (int i = start; i < std::min(data.size(), start + batch); ++i) idx.push_back(i);
    Batch b = make_batch(data.samples, idx, task, conditioned);
    preds.push_back(labels_from_prediction(discriminative_forward(theta, pl, b.images, b.conds, task), task));
    targets.push_back(b.targets);
    mask.insert(mask.end(), b.mask.begin(), b.mask.end());
  }
  const Tensor<float> pred = concat_batch(std::span<const Tensor<float>>(preds));
  const Tensor<float> gt = concat_batch(std::span<const Tensor<float>>(targets));
  MetricReport r;
  if (task == Task::normals) {
    r = normal_metrics(pred, gt, mask);
  } else if (task == Task::depth) {
    r = depth_rmse(pred, gt, mask);
  } else {
    std::vector<int> p(pred.size()), g(gt.size());
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = static_cast<int>(pred[i]), g[i] = static_cast<int>(gt[i]);
    r = miou(p, g, pl.model.num_classes, mask);
  }
  r.samples = data.size();
  return r;
}

}  // namespace unidiff
