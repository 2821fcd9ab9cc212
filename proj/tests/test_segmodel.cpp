#include <gtest/gtest.h>

#include <set>

#include "oracles.hpp"
#include "pfseg/segmodel.hpp"
#include "pfseg/verify.hpp"

using namespace pfseg;

namespace {

ModelConfig with_adapter(AdapterKind kind) {
  ModelConfig c;
  c.adapter.kind = kind;
  return c;
}

std::map<std::string, Tensor<float>> by_name(const ParamList<float>& ps) {
  std::map<std::string, Tensor<float>> m;
  for (const auto& p : ps) m[p.name] = p.tensor;
  return m;
}

}  // namespace

TEST(SegModel, OutputShape) {
  auto m = SegModel<float>::make(with_adapter(AdapterKind::LW));
  Rng rng(1);
  const auto y = m.forward(Tensor<float>::uniform({2, 3, 32, 48}, rng, 0, 1));
  EXPECT_EQ(y.shape(), (Shape{2, 3, 32, 48}));
  const auto feats = m.encoder_forward(Tensor<float>::uniform({1, 3, 32, 48}, rng, 0, 1));
  ASSERT_EQ(feats.maps.size(), 2u);
  EXPECT_EQ(feats.maps[0].shape(), (Shape{1, 32, 8, 12}));
  EXPECT_EQ(feats.maps[1].shape(), (Shape{1, 64, 4, 6}));
}

TEST(SegModel, BadGeometry) {
  auto m = SegModel<float>::make(ModelConfig{});
  for (auto [h, w] : std::vector<std::pair<int, int>>{{30, 32}, {32, 34}, {4, 4}}) {
    try {
      m.forward(Tensor<float>::zeros({1, 3, h, w}));
      FAIL() << h << "x" << w;
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::InvalidGeometry);
    }
  }
  EXPECT_THROW(m.forward(Tensor<float>::zeros({1, 4, 32, 32})), Error);
}

TEST(SegModel, FrozenWeightsIndependentOfAddOns) {
  const auto base = by_name(SegModel<float>::make(ModelConfig::vanilla()).parameters());
  for (auto k : {AdapterKind::Plain, AdapterKind::HP, AdapterKind::LW}) {
    const auto other = by_name(SegModel<float>::make(with_adapter(k)).parameters());
    for (const auto& [name, t] : base) {
      if (!name.starts_with("encoder.") && !name.starts_with("decoder.")) continue;
      ASSERT_TRUE(other.count(name)) << name;
      const auto a = t.data(), b = other.at(name).data();
      ASSERT_EQ(a.size(), b.size());
      EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin())) << name;
    }
  }
}

TEST(SegModel, ParameterNamesUniqueAndStable) {
  auto m = SegModel<float>::make(with_adapter(AdapterKind::HP));
  std::set<std::string> names;
  for (const auto& p : m.parameters()) EXPECT_TRUE(names.insert(p.name).second) << p.name;
  for (const char* n : {"encoder.patch_embed.weight", "encoder.stages.1.downsample.weight", "encoder.stages.0.blocks.1.attn.q.weight",
                        "adapter.0.down.weight", "adapter.3.dcn.2.offset_conv.weight", "peg.0.weight", "decoder.layers.0.self_attn.q.lora_A",
                        "decoder.layers.1.mlp.fc2.lora_B", "decoder.projector.conv2.weight", "tokens", "head.class_bias"})
    EXPECT_TRUE(names.count(n)) << n;
  EXPECT_FALSE(names.count("decoder.layers.0.self_attn.k.lora_A"));
}

TEST(Partition, ClassifiesByName) {
  ModelConfig c;
  EXPECT_EQ(classify_parameter("encoder.stages.0.blocks.0.ln1.weight", c), ParamRole::Frozen);
  EXPECT_EQ(classify_parameter("decoder.layers.0.self_attn.q.weight", c), ParamRole::Frozen);
  EXPECT_EQ(classify_parameter("decoder.layers.0.self_attn.q.lora_B", c), ParamRole::Learnable);
  EXPECT_EQ(classify_parameter("adapter.2.up.bias", c), ParamRole::Learnable);
  EXPECT_EQ(classify_parameter("peg.0.bias", c), ParamRole::Learnable);
  EXPECT_EQ(classify_parameter("head.hypernet.fc1.weight", c), ParamRole::Learnable);
  EXPECT_EQ(classify_parameter("tokens", c), ParamRole::Learnable);
  c.head_trainable = false;
  c.tokens_learnable = false;
  EXPECT_EQ(classify_parameter("head.class_bias", c), ParamRole::Frozen);
  EXPECT_EQ(classify_parameter("tokens", c), ParamRole::Frozen);
  try {
    classify_parameter("mystery.weight", c);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Contract);
  }
}

TEST(Partition, DisjointCoverAndRequiresGrad) {
  auto m = SegModel<float>::make(with_adapter(AdapterKind::LW));
  const auto part = freeze_partition(m);
  std::set<std::string> f(part.frozen.begin(), part.frozen.end()), l(part.learnable.begin(), part.learnable.end());
  std::size_t total = 0;
  for (const auto& p : m.parameters()) {
    ++total;
    EXPECT_NE(f.count(p.name), l.count(p.name)) << p.name;
    EXPECT_EQ(p.tensor.requires_grad(), l.count(p.name) == 1) << p.name;
  }
  EXPECT_EQ(f.size() + l.size(), total);
  auto v = SegModel<float>::make(ModelConfig::vanilla());
  EXPECT_TRUE(freeze_partition(v).learnable.empty());
}

TEST(SegModel, TransparentAtInit) {
  auto vanilla = SegModel<float>::make(ModelConfig::vanilla());
  Rng rng(2);
  auto x = Tensor<float>::uniform({2, 3, 32, 32}, rng, 0, 1);
  NoGradGuard g;
  const auto ref = vanilla.forward(x);
  for (auto k : {AdapterKind::Plain, AdapterKind::HP, AdapterKind::LW}) {
    auto c = with_adapter(k);
    c.peg_placement = PegPlacement::EveryStage;
    const auto y = SegModel<float>::make(c).forward(x);
    for (std::int64_t i = 0; i < y.numel(); ++i) ASSERT_EQ(y.data()[i], ref.data()[i]) << to_string(k) << " at " << i;
  }
}

TEST(SegModel, AbsPeChangesOutput) {
  ModelConfig c = ModelConfig::vanilla();
  c.posenc = PosEncKind::AbsInterp;
  Rng rng(3);
  auto x = Tensor<float>::uniform({1, 3, 32, 32}, rng, 0, 1);
  NoGradGuard g;
  const auto a = SegModel<float>::make(c).forward(x), b = SegModel<float>::make(ModelConfig::vanilla()).forward(x);
  EXPECT_GT(max_abs_diff(a, b), 1e-3);
}

TEST(SegModel, FusedAndMergedAgree) {
  auto m = SegModel<double>::make(with_adapter(AdapterKind::LW));
  Rng rng(4);
  ParamList<double> learn;
  for (const auto& p : m.parameters())
    if (classify_parameter(p.name, m.config()) == ParamRole::Learnable) learn.push_back(p);
  randomize(learn, rng, 0.1);
  auto x = Tensor<double>::uniform({1, 3, 32, 32}, rng, 0, 1);
  NoGradGuard g;
  const auto y = m.forward(x);
  const auto f = m.fused();
  EXPECT_FALSE(m.is_deployed());
  EXPECT_FALSE(f.is_deployed());
  EXPECT_LT(max_abs_diff(f.forward(x), y), 1e-10);
  const auto d = f.lora_merged();
  EXPECT_TRUE(d.is_deployed());
  EXPECT_LT(max_abs_diff(d.forward(x), y), 1e-10);
  for (const auto& p : d.parameters()) EXPECT_FALSE(p.name.ends_with(".lora_A")) << p.name;
}

TEST(SegModelGrad, LoraPathThroughDecoder) {
  auto c = with_adapter(AdapterKind::None);
  c.posenc = PosEncKind::None;
  auto m = SegModel<double>::make(c);
  Rng rng(5);
  auto x = Tensor<double>::uniform({1, 3, 16, 16}, rng, 0, 1);
  std::vector<std::int32_t> labels(256);
  for (auto& l : labels) l = static_cast<std::int32_t>(rng.below(3));
  auto& layer = m.decoder_layers()[0];
  auto& lora = *layer.self_attn.q.lora;
  lora.B = Tensor<double>::normal(lora.B.shape(), rng, 0, 0.1);
  const auto r = grad_check(
      [&](const Tensor<double>& t) {
        auto copy = m;
        copy.decoder_layers()[0].self_attn.q.lora->A = t;
        return cross_entropy(copy.forward(x), labels);
      },
      lora.A);
  EXPECT_LE(r.max_relative_error, 1e-4);
}
