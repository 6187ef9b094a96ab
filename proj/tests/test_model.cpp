#include <gtest/gtest.h>

#include <cmath>

#include "unidiff/gradcheck.hpp"
#include "unidiff/synthesis.hpp"

using namespace unidiff;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.channels = {4, 4, 8, 8};
  c.embed_dim = 8;
  c.time_freq_dim = 8;
  c.fuse_channels = 4;
  c.head_channels = 4;
  return c;
}

Tensor<float> random_latent(std::uint64_t seed, int n, int size) {
  Rng rng = make_rng(seed, 0);
  return randn<float>(rng, {n, 3, size, size});
}

std::vector<Condition<float>> conds(int n, int dim = kDescriptorDim) {
  std::vector<Condition<float>> c;
  for (int i = 0; i < n; ++i) {
    std::vector<float> d(static_cast<std::size_t>(dim), 0.0f);
    d[static_cast<std::size_t>(i % dim)] = 1.0f;
    c.push_back(Condition<float>::of(d));
  }
  return c;
}

bool bit_equal(const Tensor<float>& a, const Tensor<float>& b) {
  return a.shape() == b.shape() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

}  // namespace

TEST(ModelConfig, DefaultSizeWithinBudget) {
  const ModelConfig cfg;
  const auto p = init_params<float>(cfg, 0);
  EXPECT_GE(p.count(), 50000u);
  EXPECT_LE(p.count(), 200000u);
  EXPECT_EQ(cfg.level_sizes(), (std::vector<int>{4, 8, 16, 32}));
}

TEST(ModelConfig, JsonRoundTripPreservesDigest) {
  ModelConfig c = small_config();
  c.resample_up_stages = 1;
  const ModelConfig back = ModelConfig::from_json(c.to_json());
  EXPECT_EQ(back.digest(), c.digest());
  c.fuse_channels = 5;
  EXPECT_NE(back.digest(), c.digest());
}

TEST(ModelConfig, RejectsBadSizes) {
  ModelConfig c;
  c.latent_size = 24;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig{};
  c.channels = {8};
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Condition, NullCarriesZeroVector) {
  const auto c = Condition<float>::null(6);
  EXPECT_TRUE(c.null_flag);
  for (float v : c.descriptor) EXPECT_EQ(v, 0.0f);
}

TEST(Params, MismatchNamesTheParameter) {
  const ModelConfig cfg = small_config();
  auto p = init_params<float>(cfg, 1);
  p.at("head.mix.w") = Tensor<float>({1, 1, 1, 1});
  try {
    check_params(p, cfg);
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("head.mix.w"), std::string::npos);
  }
}

TEST(Denoiser, DeterministicAndBitIdentical) {
  const ModelConfig cfg = small_config();
  const auto theta = init_params<float>(cfg, 3);
  EXPECT_EQ(value_digest(theta), value_digest(init_params<float>(cfg, 3)));
  const Tensor<float> z = random_latent(4, 2, 32);
  const std::vector<int> ts{10, 700};
  const auto cs = conds(2);
  const auto a = denoise_eps(theta, cfg, z, std::span<const int>(ts), std::span<const Condition<float>>(cs));
  const auto b = denoise_eps(theta, cfg, z, std::span<const int>(ts), std::span<const Condition<float>>(cs));
  EXPECT_TRUE(bit_equal(a.eps_hat, b.eps_hat));
  for (std::size_t i = 0; i < a.pyramid.levels.size(); ++i) EXPECT_TRUE(bit_equal(a.pyramid.levels[i], b.pyramid.levels[i]));
}

TEST(Denoiser, PyramidShapesCoarsestFirst) {
  const ModelConfig cfg;
  const auto theta = init_params<float>(cfg, 3);
  const LatentState<float> z{random_latent(5, 1, 32), 0};
  const auto r = denoise_eps(theta, cfg, z, Condition<float>::null(cfg.cond_dim));
  EXPECT_EQ(r.eps_hat.shape(), (Shape{1, 3, 32, 32}));
  EXPECT_EQ(r.pyramid.kind, PyramidKind::raw);
  EXPECT_EQ(r.pyramid.sizes(), (std::vector<int>{4, 8, 16, 32}));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(r.pyramid.levels[i].dim(1), cfg.channels[3 - i]);
}

TEST(Denoiser, ConditionAndTimestepChangeOutput) {
  const ModelConfig cfg = small_config();
  const auto theta = init_params<float>(cfg, 3);
  const Tensor<float> z = random_latent(6, 1, 32);
  auto run = [&](int t, const Condition<float>& c) { return denoise_eps(theta, cfg, LatentState<float>{z, t}, c).eps_hat; };
  const auto base = run(100, Condition<float>::null(6));
  EXPECT_FALSE(bit_equal(base, run(101, Condition<float>::null(6))));
  EXPECT_FALSE(bit_equal(base, run(100, conds(1)[0])));
}

TEST(Fuse, DropsOneLevelAndKeepsFinerSizes) {
  const ModelConfig cfg = small_config();
  const auto theta = init_params<float>(cfg, 3);
  const auto raw = denoise_eps(theta, cfg, LatentState<float>{random_latent(7, 2, 32), 0}, Condition<float>::null(6)).pyramid;
  const auto proc = fuse_pyramid(raw, theta);
  EXPECT_EQ(proc.kind, PyramidKind::processed);
  EXPECT_EQ(proc.sizes(), (std::vector<int>{8, 16, 32}));
  for (const auto& l : proc.levels) EXPECT_EQ(l.dim(1), cfg.fuse_channels);
}

TEST(Fuse, ZeroMixingGivesZeroOutput) {
  const ModelConfig cfg = small_config();
  auto theta = init_params<float>(cfg, 3);
  for (auto& [name, t] : theta.entries())
    if (name.rfind("fuse", 0) == 0) t.fill(0.0f);
  const auto raw = denoise_eps(theta, cfg, LatentState<float>{random_latent(8, 1, 32), 0}, Condition<float>::null(6)).pyramid;
  const auto proc = fuse_pyramid(raw, theta);
  for (const auto& l : proc.levels)
    for (float v : l.vec()) EXPECT_EQ(v, 0.0f);
}

TEST(Fuse, SingleLevelThrows) {
  const ModelConfig cfg = small_config();
  FeaturePyramid<float> one;
  one.levels.push_back(Tensor<float>({1, 8, 4, 4}));
  EXPECT_THROW(fuse_pyramid(one, init_params<float>(cfg, 0)), ShapeError);
}

TEST(Resample, ExistingSizesPassThrough) {
  const ModelConfig cfg = small_config();
  const auto theta = init_params<float>(cfg, 3);
  const auto raw = denoise_eps(theta, cfg, LatentState<float>{random_latent(9, 1, 32), 0}, Condition<float>::null(6)).pyramid;
  const auto proc = fuse_pyramid(raw, theta);
  const auto same = resample_pyramid(proc, {8, 32}, theta, cfg);
  ASSERT_EQ(same.levels.size(), proc.levels.size());
  for (std::size_t i = 0; i < proc.levels.size(); ++i) EXPECT_TRUE(bit_equal(same.levels[i], proc.levels[i]));
}

TEST(Resample, UpAndDownStagesAddLevels) {
  ModelConfig cfg = small_config();
  cfg.resample_up_stages = 2;
  cfg.resample_down_stages = 1;
  const auto theta = init_params<float>(cfg, 3);
  const auto raw = denoise_eps(theta, cfg, LatentState<float>{random_latent(10, 1, 32), 0}, Condition<float>::null(6)).pyramid;
  const auto proc = fuse_pyramid(raw, theta);
  EXPECT_EQ(resample_pyramid(proc, {64}, theta, cfg).sizes(), (std::vector<int>{8, 16, 32, 64}));
  EXPECT_EQ(resample_pyramid(proc, {128}, theta, cfg).sizes(), (std::vector<int>{8, 16, 32, 64, 128}));
  EXPECT_EQ(resample_pyramid(proc, {4}, theta, cfg).sizes(), (std::vector<int>{4, 8, 16, 32}));
}

TEST(Resample, RejectsNonPowerOfTwoRatio) {
  ModelConfig cfg = small_config();
  cfg.resample_up_stages = 1;
  const auto theta = init_params<float>(cfg, 3);
  const auto raw = denoise_eps(theta, cfg, LatentState<float>{random_latent(10, 1, 32), 0}, Condition<float>::null(6)).pyramid;
  const auto proc = fuse_pyramid(raw, theta);
  EXPECT_THROW(resample_pyramid(proc, {48}, theta, cfg), ParameterError);
  EXPECT_THROW(resample_pyramid(proc, {256}, theta, cfg), ConfigError);
}

TEST(Head, OutputContracts) {
  const ModelConfig cfg = small_config();
  const auto theta = init_params<float>(cfg, 3);
  const auto raw = denoise_eps(theta, cfg, LatentState<float>{random_latent(11, 2, 32), 0}, Condition<float>::null(6)).pyramid;
  const auto proc = fuse_pyramid(raw, theta);

  const auto n = task_predict(theta, cfg, proc, Task::normals);
  EXPECT_EQ(n.shape(), (Shape{2, 3, 32, 32}));
  for (int b = 0; b < 2; ++b)
    for (int p = 0; p < 32 * 32; ++p) {
      double s = 0;
      for (int c = 0; c < 3; ++c) s += double(n.plane(b, c)[p]) * n.plane(b, c)[p];
      EXPECT_NEAR(std::sqrt(s), 1.0, 1e-6);
    }

  const auto logits = task_predict(theta, cfg, proc, Task::segmentation);
  EXPECT_EQ(logits.shape(), (Shape{2, cfg.num_classes, 32, 32}));
  const auto sm = softmax_channels(logits);
  for (int b = 0; b < 2; ++b)
    for (int p = 0; p < 32 * 32; ++p) {
      double s = 0;
      for (int c = 0; c < cfg.num_classes; ++c) s += sm.plane(b, c)[p];
      EXPECT_NEAR(s, 1.0, 1e-6);
    }

  const auto d = task_predict(theta, cfg, proc, Task::depth);
  EXPECT_EQ(d.shape(), (Shape{2, 1, 32, 32}));
  for (float v : d.vec()) EXPECT_GT(v, 0.0f);
}

TEST(Head, UnknownTaskTagThrows) { EXPECT_THROW(parse_task("saliency"), ParameterError); }

TEST(Discriminative, ImageSizedPredictionAtTimeZeroByDefault) {
  Pipeline pl;
  pl.model = small_config();
  EXPECT_EQ(pl.model.feature_t, 0);
  const auto theta = init_params<float>(pl.model, 2);
  Tensor<float> x({2, 3, 32, 32}, 0.3f);
  const auto cs = conds(2);
  const auto pred = discriminative_forward(theta, pl, x, cs, Task::normals);
  EXPECT_EQ(pred.shape(), (Shape{2, 3, 32, 32}));
  EXPECT_TRUE(bit_equal(pred, discriminative_forward(theta, pl, x, cs, Task::normals, 0)));
  EXPECT_FALSE(bit_equal(pred, discriminative_forward(theta, pl, x, cs, Task::normals, 50)));
}

TEST(Discriminative, LearnedCodecUpsamplesToImageSize) {
  Pipeline pl;
  pl.model = small_config();
  pl.model.latent_size = 16;
  pl.model.latent_channels = 4;
  pl.model.resample_up_stages = 1;
  pl.codec = Codec<float>::learned(1, 3, 4, 8);
  const auto theta = init_params<float>(pl.model, 2);
  Tensor<float> x({1, 3, 32, 32}, 0.6f);
  const auto pred = discriminative_forward(theta, pl, x, conds(1), Task::depth);
  EXPECT_EQ(pred.shape(), (Shape{1, 1, 32, 32}));
}

TEST(Losses, DenoisingLossZeroForPerfectPrediction) {
  Tape<double> tape(false);
  Rng rng = make_rng(1, 0);
  const auto eps = randn<double>(rng, {2, 3, 4, 4});
  EXPECT_EQ(ops::mse_loss(tape.constant(eps), eps).value()[0], 0.0);
}

TEST(Losses, DenoisingLossOfZeroPredictorIsNoisePower) {
  ModelConfig cfg = small_config();
  auto theta = init_params<float>(cfg, 3);
  theta.at("out.w").fill(0.0f);
  theta.at("out.b").fill(0.0f);
  Rng rng = make_rng(2, 0);
  const auto z0 = randn<float>(rng, {3, 32, 32});
  const auto eps = randn<float>(rng, {3, 32, 32});
  double ms = 0;
  for (float v : eps.vec()) ms += double(v) * v;
  ms /= static_cast<double>(eps.size());
  const float loss = ldm_loss(theta, cfg, default_schedule(), LatentState<float>{z0, 0}, 400, eps, Condition<float>::null(6));
  EXPECT_NEAR(loss, ms, 1e-5);
  EXPECT_NEAR(loss, 1.0, 4 * std::sqrt(2.0 / static_cast<double>(eps.size())));
}

TEST(Losses, CosineLossExamples) {
  Tape<double> tape(false);
  Tensor<double> up({1, 3, 2, 2}), side({1, 3, 2, 2});
  for (int p = 0; p < 4; ++p) {
    up.plane(0, 2)[p] = 1;
    side.plane(0, 0)[p] = 1;
  }
  EXPECT_EQ(sup_loss(up, up, Task::normals), 0.0);
  EXPECT_NEAR(sup_loss(side, up, Task::normals), 1.0, 1e-15);
}

TEST(Losses, CrossEntropyLogitGap) {
  for (double g : {0.0, 1.0, 3.5}) {
    Tensor<double> logits({1, 2, 1, 1}, std::vector<double>{g, 0.0});
    Tensor<double> target({1, 1, 1, 1}, std::vector<double>{0.0});
    EXPECT_NEAR(sup_loss(logits, target, Task::segmentation), std::log1p(std::exp(-g)), 1e-14);
  }
  Tensor<double> logits({1, 2, 1, 1}, std::vector<double>{0.0, 0.0});
  EXPECT_NEAR(sup_loss(logits, Tensor<double>({1, 1, 1, 1}), Task::segmentation), std::log(2.0), 1e-15);
}

TEST(Losses, DepthMseHonoursMask) {
  Tensor<double> pred({1, 1, 1, 2}, std::vector<double>{1.0, 5.0});
  Tensor<double> gt({1, 1, 1, 2}, std::vector<double>{2.0, 1.0});
  EXPECT_NEAR(sup_loss(pred, gt, Task::depth), (1.0 + 16.0) / 2, 1e-15);
  EXPECT_NEAR(sup_loss(pred, gt, Task::depth, Mask{1, 0}), 1.0, 1e-15);
  EXPECT_THROW(sup_loss(pred, gt, Task::depth, Mask{0, 0}), ParameterError);
}

TEST(Losses, PerItemMeansAreSummed) {
  Tensor<double> pred({2, 1, 1, 2}, std::vector<double>{1, 1, 3, 3});
  Tensor<double> gt({2, 1, 1, 2}, std::vector<double>{0, 0, 0, 0});
  EXPECT_NEAR(sup_loss(pred, gt, Task::depth, Mask{1, 0, 1, 1}), 1.0 + 9.0, 1e-15);
}
