#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "unidiff/gradcheck.hpp"
#include "unidiff/training.hpp"

using namespace unidiff;

namespace {

Pipeline small_pipeline() {
  Pipeline pl;
  pl.model.image_size = pl.model.latent_size = 16;
  pl.model.channels = {4, 4, 8, 8};
  pl.model.embed_dim = 8;
  pl.model.time_freq_dim = 8;
  pl.model.fuse_channels = 4;
  pl.model.head_channels = 4;
  pl.schedule = build_schedule(20, 1e-3, 0.2);
  return pl;
}

Dataset small_data(int count, std::uint64_t seed = 3) {
  Dataset d;
  d.resolution = 16;
  d.samples = render_dataset(count, Style::A, 16, seed, "tr");
  return d;
}

TrainConfig small_config(TrainMode mode = TrainMode::self_improve) {
  TrainConfig c;
  c.m = 4;
  c.n = mode == TrainMode::warmup_only ? 0 : 1;
  c.gen_t = 8;
  c.ema_alpha = 0.9;
  c.ema_interval_samples = 10;
  c.warmup_steps = 6;
  c.improve_steps = 6;
  c.lr = 1e-3;
  c.seed = 21;
  c.mode = mode;
  return c;
}

ParamSet<double> random_set(std::uint64_t seed) {
  ParamSet<double> p = init_params<double>(tiny_model_config(), seed);
  Rng rng = make_rng(seed, 5);
  for (auto& [_, t] : p.entries())
    for (auto& v : t.vec()) v = randn<double>(rng, {1})[0];
  return p;
}

double distance(const ParamSet<double>& a, const ParamSet<double>& b) {
  double s = 0;
  for (const auto& [name, t] : a.entries())
    for (std::size_t i = 0; i < t.size(); ++i) s += std::pow(t[i] - b.at(name)[i], 2);
  return std::sqrt(s);
}

/// Trainer that has finished a short warm-up, ready for start_improve().
struct Warmed {
  Pipeline pl = small_pipeline();
  Dataset data = small_data(8);
  ParamSet<float> theta_w;
  OptimState<float> opt;

  Warmed() {
    Trainer t(pl, small_config(TrainMode::warmup_only), data);
    t.start_warmup(init_params<float>(pl.model, 2));
    theta_w = t.run_warmup();
    opt = t.optimizer();
  }
};

}  // namespace

// ---------------------------------------------------------------- EMA update

TEST(EmaUpdate, EqualSetsAreAFixedPoint) {
  const ParamSet<double> e = random_set(1);
  ParamSet<double> c = e;
  ema_update(c, e, 0.998);
  EXPECT_TRUE(c == e);
}

TEST(EmaUpdate, ScalarCase) {
  ParamSet<double> c, e;
  c.add("w", Tensor<double>({1}, std::vector<double>{1.0}));
  e.add("w", Tensor<double>({1}, std::vector<double>{0.0}));
  ema_update(c, e, 0.9);
  EXPECT_DOUBLE_EQ(c.at("w")[0], 0.9);
}

// Relative error is taken over the whole difference vector; updates continue until
// the gap has shrunk to a tenth of its initial size.
TEST(EmaUpdate, RepeatedUpdatesContractGeometrically) {
  for (double alpha : {0.9, 0.998, 0.999}) {
    const ParamSet<double> e = random_set(2);
    const ParamSet<double> c0 = random_set(3);
    ParamSet<double> c = c0;
    const int updates = static_cast<int>(std::log(0.1) / std::log(alpha));
    for (int k = 1; k <= updates; ++k) {
      ema_update(c, e, alpha);
      const double ak = std::pow(alpha, k);
      double err = 0, ref = 0;
      for (const auto& [name, t] : c.entries())
        for (std::size_t i = 0; i < t.size(); ++i) {
          const double expect = ak * (c0.at(name)[i] - e.at(name)[i]);
          err += std::pow((t[i] - e.at(name)[i]) - expect, 2);
          ref += expect * expect;
        }
      ASSERT_LE(std::sqrt(err / ref), 1e-12) << "alpha " << alpha << " after " << k << " updates";
    }
  }
}

TEST(EmaUpdate, DistanceShrinksByAlphaEachStep) {
  const double alpha = 0.95;
  const ParamSet<double> e = random_set(4);
  ParamSet<double> c = random_set(5);
  for (int k = 0; k < 20; ++k) {
    const double before = distance(c, e);
    ema_update(c, e, alpha);
    EXPECT_NEAR(distance(c, e), alpha * before, 1e-12 * before);
  }
}

TEST(EmaUpdate, ResultLiesBetweenInputs) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const ParamSet<double> e = random_set(10 + s);
    const ParamSet<double> c0 = random_set(30 + s);
    ParamSet<double> c = c0;
    ema_update(c, e, 0.5 + 0.049 * static_cast<double>(s));
    for (const auto& [name, t] : c.entries())
      for (std::size_t i = 0; i < t.size(); ++i) {
        EXPECT_GE(t[i], std::min(c0.at(name)[i], e.at(name)[i]));
        EXPECT_LE(t[i], std::max(c0.at(name)[i], e.at(name)[i]));
      }
  }
}

TEST(EmaUpdate, HeadScopeLeavesBackboneUntouched) {
  const ParamSet<float> e = init_params<float>(tiny_model_config(), 1);
  const ParamSet<float> c0 = init_params<float>(tiny_model_config(), 2);
  ParamSet<float> c = c0;
  ema_update(c, e, 0.5, EmaScope::head);
  for (const auto& [name, t] : c.entries()) {
    if (t == e.at(name)) continue;
    if (is_head_param(name))
      EXPECT_FALSE(t == c0.at(name)) << name;
    else
      EXPECT_TRUE(t == c0.at(name)) << name;
  }
}

TEST(EmaUpdate, MismatchedShapesNameTheParameter) {
  ParamSet<double> c, e;
  c.add("head.depth.w", Tensor<double>({2}));
  e.add("head.depth.w", Tensor<double>({3}));
  try {
    ema_update(c, e, 0.9);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& err) {
    EXPECT_NE(std::string(err.what()).find("head.depth.w"), std::string::npos);
  }
  EXPECT_THROW(ema_update(c, c, 1.0), ParameterError);
  EXPECT_THROW(ema_update(c, c, -0.1), ParameterError);
}

// ---------------------------------------------------------------- configuration

TEST(TrainConfig, ValidationRejectsInconsistentSettings) {
  TrainConfig c = small_config(TrainMode::warmup_only);
  c.n = 2;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_config();
  c.ema_alpha = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_config();
  c.m = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_config();
  c.lr = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(TrainConfig, JsonRoundTripKeepsDigest) {
  TrainConfig c = small_config(TrainMode::gna);
  c.ema_scope = EmaScope::head;
  const TrainConfig back = TrainConfig::from_json(c.to_json());
  EXPECT_EQ(back.digest(), c.digest());
  EXPECT_EQ(back.mode, TrainMode::gna);
  c.seed += 1;
  EXPECT_NE(back.digest(), c.digest());
}

// ---------------------------------------------------------------- trainer

TEST(Trainer, ZeroWarmupStepsReturnsInitialParameters) {
  const Pipeline pl = small_pipeline();
  const Dataset d = small_data(4);
  TrainConfig c = small_config(TrainMode::warmup_only);
  c.warmup_steps = 0;
  Trainer t(pl, c, d);
  const auto init = init_params<float>(pl.model, 9);
  t.start_warmup(init);
  EXPECT_TRUE(t.run_warmup() == init);
}

TEST(Trainer, RejectsUnlabelledData) {
  Dataset d = small_data(2);
  d.samples[1].normals = {};
  EXPECT_THROW(Trainer(small_pipeline(), small_config(), d), ParameterError);
  EXPECT_THROW(Trainer(small_pipeline(), small_config(), Dataset{}), ParameterError);
}

TEST(Trainer, EmaFiresEveryFourIterationsForBatchTenAndIntervalForty) {
  Warmed w;
  TrainConfig c = small_config();
  c.m = 8;
  c.n = 2;
  c.ema_interval_samples = 40;
  c.improve_steps = 12;
  const Dataset store = presynthesize(w.theta_w, w.pl, w.data, 4, c.gen_t, 1);
  Trainer t(w.pl, c, w.data, &store);
  t.start_improve(w.theta_w, w.opt);
  std::vector<int> fired;
  t.run_improve([&](const StepRecord& r) {
    if (r.ema) fired.push_back(r.step);
  });
  EXPECT_EQ(fired, (std::vector<int>{3, 7, 11}));
}

TEST(Trainer, ImproveStartsFromEqualParameterSets) {
  Warmed w;
  Trainer t(w.pl, small_config(), w.data);
  t.start_improve(w.theta_w, w.opt);
  EXPECT_TRUE(t.dual().theta_c == w.theta_w);
  EXPECT_TRUE(t.dual().theta_e == w.theta_w);
}

TEST(Trainer, NoSyntheticPairsEqualsContinuedWarmup) {
  const Pipeline pl = small_pipeline();
  const Dataset d = small_data(8);
  const auto init = init_params<float>(pl.model, 2);

  TrainConfig straight = small_config(TrainMode::warmup_only);
  straight.warmup_steps = 8;
  Trainer a(pl, straight, d);
  a.start_warmup(init);
  const ParamSet<float> through = a.run_warmup();

  for (TrainMode mode : {TrainMode::warmup_only, TrainMode::self_improve}) {
    TrainConfig split = small_config(mode);
    split.n = 0;
    split.warmup_steps = 8;
    split.improve_steps = 4;
    Trainer b(pl, split, d);
    b.start_warmup(init);
    while (b.step_index() < 4) b.step();
    b.start_improve();
    b.run_improve();
    EXPECT_TRUE(b.dual().theta_e == through) << to_string(mode);
  }
}

TEST(Trainer, ResultIsCreationSetExceptForWarmupOnly) {
  Warmed w;
  for (TrainMode mode : {TrainMode::warmup_only, TrainMode::self_improve}) {
    Trainer t(w.pl, small_config(mode), w.data);
    t.start_improve(w.theta_w, w.opt);
    const ParamSet<float> r = t.run_improve();
    EXPECT_TRUE(r == (mode == TrainMode::warmup_only ? t.dual().theta_e : t.dual().theta_c)) << to_string(mode);
    EXPECT_FALSE(t.dual().theta_c == t.dual().theta_e) << to_string(mode);
  }
}

TEST(Trainer, ReportedLossMatchesIndependentRecomputation) {
  Warmed w;
  const TrainConfig c = small_config();
  const Dataset store = presynthesize(w.theta_w, w.pl, w.data, 5, c.gen_t, 3);
  Trainer t(w.pl, c, w.data, &store);
  t.start_improve(w.theta_w, w.opt);
  for (int k = 0; k < 4; ++k) {
    const DualParams before = t.dual();
    const auto [ts, eps] = t.peek_ldm_noise();
    const StepRecord r = t.step();
    std::vector<Tensor<float>> imgs;
    for (int i : r.syn_idx) imgs.push_back(store.samples[static_cast<std::size_t>(i)].image);
    const auto l = t.recompute(r, before.theta_e, before.theta_c, stack(std::span<const Tensor<float>>(imgs)), ts, eps);
    EXPECT_EQ(l.total, r.loss);
    EXPECT_EQ(l.sup, r.sup);
    EXPECT_EQ(l.syn, r.syn);
    EXPECT_NEAR(r.sup + r.syn + c.ldm_weight * r.ldm, r.loss, 1e-5 * std::abs(r.loss));
    EXPECT_EQ(r.real_idx.size(), static_cast<std::size_t>(c.m));
    EXPECT_EQ(r.syn_idx.size(), static_cast<std::size_t>(c.n));
  }
}

TEST(Trainer, GnaAndSelfImproveShareEverythingButTheSynthesis) {
  Warmed w;
  const TrainConfig si = small_config(TrainMode::self_improve);
  TrainConfig gna = si;
  gna.mode = TrainMode::gna;
  const Dataset partial = presynthesize(w.theta_w, w.pl, w.data, 6, si.gen_t, 4);
  const Dataset full = presynthesize(w.theta_w, w.pl, w.data, 6, w.pl.schedule.t_max(), 4);
  Trainer a(w.pl, si, w.data, &partial), b(w.pl, gna, w.data, &full);
  a.start_improve(w.theta_w, w.opt);
  b.start_improve(w.theta_w, w.opt);
  for (int k = 0; k < 6; ++k) {
    const StepRecord ra = a.step(), rb = b.step();
    EXPECT_EQ(ra.real_idx, rb.real_idx);
    EXPECT_EQ(ra.syn_idx, rb.syn_idx);
    EXPECT_EQ(ra.ema, rb.ema);
    EXPECT_EQ(ra.ema_count, rb.ema_count);
    if (k == 0) {
      EXPECT_EQ(ra.sup, rb.sup);
    }
  }
}

TEST(Trainer, OnTheFlySynthesisIsDeterministic) {
  Warmed w;
  ParamSet<float> first;
  for (int run = 0; run < 2; ++run) {
    Trainer t(w.pl, small_config(), w.data);
    t.start_improve(w.theta_w, w.opt);
    const ParamSet<float> r = t.run_improve();
    if (run == 0)
      first = r;
    else
      EXPECT_TRUE(r == first);
  }
}

TEST(Trainer, ResumeFromCheckpointReplaysStraightThroughRun) {
  Warmed w;
  const TrainConfig c = small_config();
  const auto dir = std::filesystem::temp_directory_path() / "unidiff_test_resume";
  std::filesystem::remove_all(dir);

  Trainer straight(w.pl, c, w.data);
  straight.start_improve(w.theta_w, w.opt);
  straight.run_improve();

  Trainer first(w.pl, c, w.data);
  first.start_improve(w.theta_w, w.opt);
  for (int k = 0; k < 3; ++k) first.step();
  save_checkpoint(first.to_checkpoint(), dir);

  Trainer resumed(w.pl, c, w.data);
  resumed.restore(load_checkpoint(dir));
  EXPECT_EQ(resumed.step_index(), 3);
  resumed.run_improve();
  EXPECT_TRUE(resumed.dual().theta_e == straight.dual().theta_e);
  EXPECT_TRUE(resumed.dual().theta_c == straight.dual().theta_c);
  EXPECT_TRUE(resumed.optimizer().m == straight.optimizer().m);
  EXPECT_TRUE(resumed.optimizer().v == straight.optimizer().v);
  std::filesystem::remove_all(dir);
}

TEST(Trainer, RestoreRefusesForeignCheckpoints) {
  Warmed w;
  Trainer t(w.pl, small_config(), w.data);
  t.start_improve(w.theta_w, w.opt);
  const Checkpoint ck = t.to_checkpoint();

  TrainConfig other = small_config();
  other.ema_alpha = 0.8;
  Trainer a(w.pl, other, w.data);
  EXPECT_THROW(a.restore(ck), DigestMismatchError);

  Pipeline wide = w.pl;
  wide.model.fuse_channels = 6;
  Trainer b(wide, small_config(), w.data);
  EXPECT_THROW(b.restore(ck), DigestMismatchError);
}

TEST(Trainer, NonFiniteLossRaisesDivergence) {
  const Pipeline pl = small_pipeline();
  Dataset d = small_data(2);
  for (auto& s : d.samples) s.image[0] = std::numeric_limits<float>::quiet_NaN();
  Trainer t(pl, small_config(TrainMode::warmup_only), d);
  t.start_warmup(init_params<float>(pl.model, 1));
  EXPECT_THROW(t.step(), DivergenceError);
}

TEST(Trainer, WarmupStopsOnPlateau) {
  const Pipeline pl = small_pipeline();
  const Dataset d = small_data(1);
  TrainConfig c = small_config(TrainMode::warmup_only);
  c.m = 1;
  c.ldm_weight = 0;
  c.lr = 1e-12;
  c.warmup_steps = 100;
  c.plateau_window = 5;
  c.plateau_patience = 3;
  Trainer t(pl, c, d);
  t.start_warmup(init_params<float>(pl.model, 1));
  t.run_warmup();
  EXPECT_TRUE(t.plateaued());
  EXPECT_EQ(t.step_index(), c.plateau_window + c.plateau_patience);
}

TEST(Trainer, UnstartedTrainerRefusesToStep) {
  Trainer t(small_pipeline(), small_config(), small_data(2));
  EXPECT_THROW(t.step(), ConfigError);
}

TEST(EvaluateModel, ReportsEverySampleOnce) {
  Warmed w;
  const Dataset test = small_data(5, 77);
  const MetricReport n = evaluate_model(w.theta_w, w.pl, test, Task::normals, true, 2);
  EXPECT_EQ(n.samples, 5);
  EXPECT_GE(n.values.at("mean"), 0);
  EXPECT_LE(n.values.at("mean"), 180);
  const MetricReport s = evaluate_model(w.theta_w, w.pl, test, Task::segmentation, true, 3);
  EXPECT_GE(s.values.at("miou"), 0);
  EXPECT_LE(s.values.at("miou"), 1);
  EXPECT_THROW(evaluate_model(w.theta_w, w.pl, Dataset{}, Task::normals), ParameterError);
}
