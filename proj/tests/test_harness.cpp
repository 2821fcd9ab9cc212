#include <gtest/gtest.h>

#include <numbers>
#include <set>

#include "oracles.hpp"
#include "pfseg/harness.hpp"

using namespace pfseg;

TEST(Data, Deterministic) {
  const auto a = gen_sample(42, 32, 40, 4), b = gen_sample(42, 32, 40, 4);
  EXPECT_EQ(a.image, b.image);
  EXPECT_EQ(a.mask, b.mask);
  const auto c = gen_sample(43, 32, 40, 4);
  EXPECT_NE(a.image, c.image);
}

TEST(Data, ShapesAndLabels) {
  for (int C : {2, 3, 5}) {
    const auto s = gen_sample(7, 48, 32, C);
    ASSERT_EQ(s.image.size(), 3u * 48 * 32);
    ASSERT_EQ(s.mask.size(), 48u * 32);
    EXPECT_EQ(s.blobs.size(), static_cast<std::size_t>(C - 1));
    std::set<int> seen(s.mask.begin(), s.mask.end());
    EXPECT_TRUE(seen.count(0));
    for (int v : seen) EXPECT_TRUE(v >= 0 && v < C);
    for (float v : s.image) EXPECT_TRUE(v >= 0.f && v <= 1.f);
  }
}

TEST(Data, MaskMatchesRasterizedShapes) {
  // later shapes occlude earlier ones; every pixel takes the label of the last covering shape
  const auto s = gen_sample(5, 64, 64, 4);
  std::vector<std::int32_t> expect(64 * 64, 0);
  for (const auto& b : s.blobs) {
    const auto r = rasterize(b, 64, 64);
    for (std::size_t i = 0; i < r.size(); ++i)
      if (r[i]) expect[i] = b.label;
  }
  EXPECT_EQ(s.mask, expect);
}

TEST(Data, EllipseAreaWithinFivePercent) {
  for (auto [a, b] : std::vector<std::pair<double, double>>{{10, 6}, {14, 9}, {8, 8}, {20, 5}}) {
    BlobInfo e;
    e.shape = BlobShape::Ellipse;
    e.cy = 40.3;
    e.cx = 38.7;
    e.a = a;
    e.b = b;
    e.theta = 0.6;
    e.wobble = 0;
    const auto r = rasterize(e, 80, 80);
    double count = 0;
    for (auto v : r) count += v;
    EXPECT_NEAR(count / (std::numbers::pi * a * b), 1.0, 0.05) << a << "x" << b;
  }
}

TEST(Data, SplitsUseDisjointSeeds) {
  std::set<std::uint64_t> seeds;
  for (int split : {0, 1})
    for (int i = 0; i < 500; ++i) EXPECT_TRUE(seeds.insert(sample_seed(9, split, i)).second);
}

TEST(Data, DatasetMatchesSerialGeneration) {
  DatasetSpec spec;
  spec.height = spec.width = 32;
  const auto d = gen_dataset(spec, 1, 6);
  for (int i = 0; i < 6; ++i) EXPECT_EQ(d.samples[i].mask, gen_sample(sample_seed(spec.seed, 1, i), 32, 32, 3, spec.gen).mask);
}

TEST(Data, ImpossiblePlacementIsGeometryError) {
  GenOptions o;
  o.max_attempts = 4;
  try {
    for (std::uint64_t s = 0; s < 50; ++s) gen_sample(s, 16, 16, 40, o);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::InvalidGeometry);
  }
}

namespace {

// image channel 0 = label / 4, so alignment can be read back from the pixels
SyntheticSample labeled_sample(std::int64_t h, std::int64_t w) {
  auto s = gen_sample(3, h, w, 4);
  for (std::int64_t i = 0; i < h * w; ++i) s.image[static_cast<std::size_t>(i)] = static_cast<float>(s.mask[static_cast<std::size_t>(i)]) / 4.f;
  return s;
}

}  // namespace

TEST(Augment, ExactTransformsKeepAlignment) {
  auto s = labeled_sample(40, 56);
  AugmentConfig cfg;
  cfg.rotation_deg = 0;
  cfg.crop = 32;
  Rng rng(1);
  for (int t = 0; t < 20; ++t) {
    const auto a = augment(s, rng, cfg);
    ASSERT_EQ(a.height, 32);
    ASSERT_EQ(a.width, 32);
    for (std::size_t i = 0; i < a.mask.size(); ++i) ASSERT_EQ(a.image[i], static_cast<float>(a.mask[i]) / 4.f);
  }
}

TEST(Augment, SmallRotationMostlyAligned) {
  auto s = labeled_sample(48, 48);
  AugmentConfig cfg;
  cfg.crop = 0;
  Rng rng(2);
  for (int t = 0; t < 10; ++t) {
    const auto a = augment(s, rng, cfg);
    std::size_t agree = 0;
    for (std::size_t i = 0; i < a.mask.size(); ++i) agree += std::abs(a.image[i] - a.mask[i] / 4.f) < 0.01f;
    EXPECT_GT(static_cast<double>(agree) / a.mask.size(), 0.9);
  }
}

TEST(Augment, PadsWhenSmallerThanCrop) {
  auto s = labeled_sample(16, 16);
  AugmentConfig cfg;
  cfg.crop = 24;
  cfg.rotation_deg = 0;
  Rng rng(3);
  const auto a = augment(s, rng, cfg);
  EXPECT_EQ(a.height, 24);
  EXPECT_EQ(a.width, 24);
}

TEST(Metrics, HandCaseSevenTwelfths) {
  const std::vector<std::int32_t> gt{0, 0, 1, 1}, pred{0, 0, 0, 1};
  EXPECT_DOUBLE_EQ(miou(pred, gt, 2), 7.0 / 12.0);
}

TEST(Metrics, AbsentClassSkipped) {
  const std::vector<std::int32_t> gt{0, 0, 1, 1}, pred{0, 0, 1, 1};
  EXPECT_DOUBLE_EQ(miou(pred, gt, 5), 1.0);
}

TEST(Metrics, MatchesBruteForce) {
  Rng rng(4);
  for (int t = 0; t < 1000; ++t) {
    const int C = 2 + static_cast<int>(rng.below(5));
    std::vector<std::int32_t> p(64), g(64);
    for (int i = 0; i < 64; ++i) {
      p[i] = static_cast<std::int32_t>(rng.below(C));
      g[i] = static_cast<std::int32_t>(rng.below(C));
    }
    ASSERT_DOUBLE_EQ(miou(p, g, C), oracle::miou_brute(p, g, C));
  }
}

TEST(Metrics, RejectsBadLabels) {
  const std::vector<std::int32_t> a{0, 3}, b{0, 1}, c{0};
  EXPECT_THROW(miou(a, b, 2), Error);
  EXPECT_THROW(miou(c, b, 2), Error);
}

TEST(Metrics, AccumulatorPoolsCounts) {
  IoUAccumulator acc(2);
  acc.add(std::vector<std::int32_t>{0, 1}, std::vector<std::int32_t>{0, 0});
  acc.add(std::vector<std::int32_t>{1, 1}, std::vector<std::int32_t>{1, 1});
  // class 0: I=1 U=2; class 1: I=2 U=3
  EXPECT_DOUBLE_EQ(acc.miou(), (0.5 + 2.0 / 3.0) / 2);
}

TEST(Schedule, CosineEndpoints) {
  EXPECT_DOUBLE_EQ(cosine_lr(0.01, 0, 100), 0.01);
  EXPECT_NEAR(cosine_lr(0.01, 50, 100), 0.005, 1e-15);
  EXPECT_NEAR(cosine_lr(0.01, 100, 100), 0.0, 1e-15);
  EXPECT_NEAR(cosine_lr(0.01, 25, 100), 0.005 * (1 + std::cos(std::numbers::pi / 4)), 1e-15);
}

TEST(Optim, AdamFirstStepsMatchHandComputation) {
  Tensor<double> x({2}, {1.0, -2.0}, true);
  ParamList<double> ps{{"x", x}};
  Adam<double> adam(ps, 0.9, 0.999, 1e-8);
  double m[2] = {0, 0}, v[2] = {0, 0}, ref[2] = {1.0, -2.0};
  for (int t = 1; t <= 3; ++t) {
    backward(sum(square(x)));
    for (int i = 0; i < 2; ++i) {
      const double g = 2 * ref[i];
      m[i] = 0.9 * m[i] + 0.1 * g;
      v[i] = 0.999 * v[i] + 0.001 * g * g;
      ref[i] -= 0.1 * (m[i] / (1 - std::pow(0.9, t))) / (std::sqrt(v[i] / (1 - std::pow(0.999, t))) + 1e-8);
    }
    adam.step(0.1);
    EXPECT_NEAR(x.data()[0], ref[0], 1e-12);
    EXPECT_NEAR(x.data()[1], ref[1], 1e-12);
  }
  EXPECT_EQ(adam.steps(), 3);
}

namespace {

DatasetSpec tiny_spec() {
  DatasetSpec s;
  s.height = s.width = 32;
  return s;
}

TrainConfig tiny_train() {
  TrainConfig t;
  t.epochs = 1;
  t.augment.crop = 24;
  return t;
}

}  // namespace

TEST(Train, FrozenBitwiseAndLearnableMoves) {
  ModelConfig mc;
  mc.adapter.kind = AdapterKind::LW;
  auto model = SegModel<float>::make(mc);
  const auto part = freeze_partition(model);
  std::map<std::string, std::vector<float>> before;
  for (const auto& p : model.parameters()) before[p.name].assign(p.tensor.data().begin(), p.tensor.data().end());
  const auto data = gen_dataset(tiny_spec(), 0, 4);
  const auto r = train(model, data, &data, tiny_train());
  EXPECT_EQ(r.steps, 2);
  ASSERT_EQ(r.history.size(), 1u);
  EXPECT_GE(r.history[0].val_miou, 0.0);
  const std::set<std::string> learn(part.learnable.begin(), part.learnable.end());
  for (const auto& p : model.parameters()) {
    const std::vector<float> now(p.tensor.data().begin(), p.tensor.data().end());
    if (learn.count(p.name))
      EXPECT_NE(now, before[p.name]) << p.name;
    else
      EXPECT_EQ(now, before[p.name]) << p.name;
  }
}

TEST(Train, DeterministicForFixedSeed) {
  const auto data = gen_dataset(tiny_spec(), 0, 4);
  auto run = [&] {
    auto m = SegModel<float>::make(ModelConfig{});
    freeze_partition(m);
    return train(m, data, nullptr, tiny_train()).history[0].loss;
  };
  EXPECT_EQ(run(), run());
}

TEST(Train, NonFiniteLossIsNumericError) {
  auto model = SegModel<float>::make(ModelConfig{});
  freeze_partition(model);
  for (auto& p : model.parameters())
    if (p.name == "head.class_bias") p.tensor.mutable_data()[0] = std::numeric_limits<float>::quiet_NaN();
  const auto data = gen_dataset(tiny_spec(), 0, 2);
  try {
    train(model, data, nullptr, tiny_train());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Numeric);
    EXPECT_NE(std::string(e.what()).find("step 0"), std::string::npos);
  }
}

TEST(Evaluate, PerfectPredictorScoresOne) {
  IoUAccumulator acc(3);
  const auto s = gen_sample(1, 32, 32, 3);
  acc.add(s.mask, s.mask);
  EXPECT_DOUBLE_EQ(acc.miou(), 1.0);
}
