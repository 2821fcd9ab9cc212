#include <gtest/gtest.h>

#include "oracles.hpp"
#include "pfseg/attention.hpp"

using namespace pfseg;

TEST(LoRA, InitShapesAndZeroB) {
  Rng rng(1);
  auto p = LoRAParams<float>::make(6, 5, 4, 8.0, rng);
  EXPECT_EQ(p.A.shape(), (Shape{4, 6}));
  EXPECT_EQ(p.B.shape(), (Shape{5, 4}));
  EXPECT_EQ(p.param_count(), 4 * (6 + 5));
  EXPECT_FLOAT_EQ(p.scaling(), 2.0f);
  for (float v : p.B.data()) EXPECT_EQ(v, 0.0f);
}

TEST(LoRA, ForwardIsWxPlusScaledBAx) {
  Rng rng(2);
  auto base = Linear<double>::make(6, 5, rng);
  base.bias = Tensor<double>::normal({5}, rng, 0, 1);
  auto p = LoRAParams<double>::make(6, 5, 3, 6.0, rng);
  p.B = Tensor<double>::normal({5, 3}, rng, 0, 1);
  auto x = Tensor<double>::normal({4, 6}, rng, 0, 1);
  const auto y = lora_forward(x, base, p);
  const auto W = oracle::to_vec(base.weight.data()), A = oracle::to_vec(p.A.data()), B = oracle::to_vec(p.B.data());
  const auto BA = oracle::matmul(B, A, 5, 3, 6);
  for (int r = 0; r < 4; ++r)
    for (int o = 0; o < 5; ++o) {
      double s = base.bias.data()[o];
      for (int i = 0; i < 6; ++i) s += (W[o * 6 + i] + 2.0 * BA[o * 6 + i]) * x.data()[r * 6 + i];
      EXPECT_NEAR(y.data()[r * 5 + o], s, 1e-12);
    }
}

TEST(LoRA, MergeUnmergeRoundTrip) {
  Rng rng(3);
  auto base = Linear<double>::make(8, 7, rng);
  auto p = LoRAParams<double>::make(8, 7, 4, 8.0, rng);
  p.B = Tensor<double>::normal({7, 4}, rng, 0, 0.5);
  const auto merged = lora_merge(base, p);
  const auto back = lora_unmerge(merged, p);
  EXPECT_LT(oracle::max_abs(oracle::to_vec(back.weight.data()), oracle::to_vec(base.weight.data())), 1e-14);
  EXPECT_TRUE(std::ranges::equal(merged.bias.data(), base.bias.data()));
  auto x = Tensor<double>::normal({3, 8}, rng, 0, 1);
  EXPECT_LT(oracle::max_abs(oracle::to_vec(merged.forward(x).data()), oracle::to_vec(lora_forward(x, base, p).data())), 1e-12);
}

TEST(LoRA, ZeroBIsTransparent) {
  Rng rng(4);
  auto base = Linear<float>::make(5, 5, rng);
  auto p = LoRAParams<float>::make(5, 5, 2, 4.0, rng);
  auto x = Tensor<float>::normal({3, 5}, rng, 0, 1);
  const auto a = lora_forward(x, base, p), b = base.forward(x);
  for (std::int64_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a.data()[i], b.data()[i]);
}

TEST(LoRA, GradCheckBothFactors) {
  Rng rng(5);
  auto base = Linear<double>::make(4, 3, rng);
  auto p = LoRAParams<double>::make(4, 3, 2, 4.0, rng);
  p.B = Tensor<double>::normal({3, 2}, rng, 0, 1);
  auto x = Tensor<double>::normal({5, 4}, rng, 0, 1);
  auto fa = [&](const Tensor<double>& t) {
    auto q = p;
    q.A = t;
    return sum(square(lora_forward(x, base, q)));
  };
  auto fb = [&](const Tensor<double>& t) {
    auto q = p;
    q.B = t;
    return sum(square(lora_forward(x, base, q)));
  };
  EXPECT_LE(grad_check(fa, p.A).max_relative_error, 1e-4);
  EXPECT_LE(grad_check(fb, p.B).max_relative_error, 1e-4);
}

TEST(LoRA, LinearMergeDropsFactors) {
  Rng rng(6);
  LoRALinear<float> l{Linear<float>::make(4, 4, rng), LoRAParams<float>::make(4, 4, 2, 2.0, rng)};
  ParamList<float> before, after;
  l.collect(before, "m");
  l.merge();
  l.collect(after, "m");
  EXPECT_EQ(before.size(), 4u);
  EXPECT_EQ(after.size(), 2u);
}

TEST(Attention, MatchesExplicitSoftmaxAttention) {
  Rng rng(7);
  auto mha = MultiHeadAttention<double>::make(4, 2, rng);
  auto q = Tensor<double>::normal({1, 3, 4}, rng, 0, 1), kv = Tensor<double>::normal({1, 5, 4}, rng, 0, 1);
  const auto y = mha.forward(q, kv, kv);
  auto proj = [](const Linear<double>& l, const Tensor<double>& x, int rows) {
    oracle::Vec out(rows * 4);
    for (int r = 0; r < rows; ++r)
      for (int o = 0; o < 4; ++o) {
        double s = l.bias.defined() ? l.bias.data()[o] : 0.0;
        for (int i = 0; i < 4; ++i) s += l.weight.data()[o * 4 + i] * x.data()[r * 4 + i];
        out[r * 4 + o] = s;
      }
    return out;
  };
  const auto Q = proj(mha.q.base, q, 3), K = proj(mha.k.base, kv, 5), V = proj(mha.v.base, kv, 5);
  oracle::Vec ctx(3 * 4, 0.0);
  for (int h = 0; h < 2; ++h)
    for (int i = 0; i < 3; ++i) {
      std::vector<double> s(5);
      double mx = -1e300, z = 0;
      for (int j = 0; j < 5; ++j) {
        s[j] = 0;
        for (int d = 0; d < 2; ++d) s[j] += Q[i * 4 + h * 2 + d] * K[j * 4 + h * 2 + d];
        s[j] /= std::sqrt(2.0);
        mx = std::max(mx, s[j]);
      }
      for (auto& v : s) z += (v = std::exp(v - mx));
      for (int j = 0; j < 5; ++j)
        for (int d = 0; d < 2; ++d) ctx[i * 4 + h * 2 + d] += s[j] / z * V[j * 4 + h * 2 + d];
    }
  Tensor<double> ctx_t({3, 4}, ctx);
  const auto ref = proj(mha.out.base, ctx_t, 3);
  EXPECT_LT(oracle::max_abs(oracle::to_vec(y.data()), ref), 1e-12);
}
