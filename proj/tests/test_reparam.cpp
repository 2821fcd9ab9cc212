#include <gtest/gtest.h>

#include "oracles.hpp"
#include "pfseg/reparam.hpp"

using namespace pfseg;

namespace {

// x + sum over conv branches of the stacked naive convolutions.
template <typename T>
oracle::Vec stacked_reference(const ReparamBlock<T>& block, const Tensor<T>& x) {
  const auto in = oracle::map_of(x.data(), x.dim(0), x.dim(1), x.dim(2), x.dim(3));
  oracle::Vec out = in.v;
  for (const auto& br : block.branches()) {
    if (br.kind == BranchKind::Identity) continue;
    auto cur = in;
    for (const auto& l : br.layers) {
      const auto k = l.kh();
      cur = oracle::conv2d(cur, oracle::to_vec(l.weight.data()), l.bias.defined() ? oracle::to_vec(l.bias.data()) : oracle::Vec{},
                           l.out_channels(), k, k, 1, 1, int(k / 2), int(k / 2), 1, 1);
    }
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += cur.v[i];
  }
  return out;
}

template <typename T>
void randomize_block(ReparamBlock<T>& b, Rng& rng) {
  for (auto& br : b.branches())
    for (auto& l : br.layers) {
      for (auto& v : l.weight.mutable_data()) v = static_cast<T>(rng.normal(0, 0.5));
      if (l.bias.defined())
        for (auto& v : l.bias.mutable_data()) v = static_cast<T>(rng.normal(0, 0.5));
    }
}

}  // namespace

TEST(Reparam, ParsePatterns) {
  EXPECT_EQ(parse_branch_patterns("1x1-3x3", 3), (std::vector<BranchPattern>{{1, 3}, {1, 3}, {1, 3}}));
  EXPECT_EQ(parse_branch_patterns("3x3,1x1-3x3", 2), (std::vector<BranchPattern>{{3}, {1, 3}}));
  EXPECT_THROW(parse_branch_patterns("5x5", 1), Error);
  EXPECT_THROW(parse_branch_patterns("3x3,1x1", 3), Error);
  EXPECT_EQ(format_branch_pattern({1, 3}), "1x1-3x3");
}

TEST(Reparam, BlockStructure) {
  Rng rng(1);
  auto b = ReparamBlock<float>::make(4, parse_branch_patterns("1x1-3x3", 3), rng);
  EXPECT_EQ(b.conv_branch_count(), 3);
  ASSERT_EQ(b.branches().size(), 4u);
  EXPECT_EQ(b.branches()[0].kind, BranchKind::Identity);
  for (std::size_t i = 1; i < 4; ++i) {
    ASSERT_EQ(b.branches()[i].layers.size(), 2u);
    EXPECT_FALSE(b.branches()[i].layers[0].bias.defined());
    EXPECT_TRUE(b.branches()[i].layers[1].bias.defined());
  }
}

TEST(Reparam, PadOneByOneIsCentered) {
  Tensor<double> w({2, 1, 1, 1}, {3.0, -1.0});
  const auto p = pad_1x1_to_3x3(w);
  ASSERT_EQ(p.shape(), (Shape{2, 1, 3, 3}));
  for (int o = 0; o < 2; ++o)
    for (int k = 0; k < 9; ++k) EXPECT_EQ(p.data()[o * 9 + k], k == 4 ? w.data()[o] : 0.0);
}

TEST(Reparam, IdentityKernelIsDelta) {
  const auto f = identity_to_conv<double>(3);
  for (int o = 0; o < 3; ++o)
    for (int i = 0; i < 3; ++i)
      for (int k = 0; k < 9; ++k) EXPECT_EQ(f.weight.data()[(o * 3 + i) * 9 + k], (o == i && k == 4) ? 1.0 : 0.0);
}

TEST(Reparam, TrainForwardMatchesStackedConvs) {
  Rng rng(2);
  auto b = ReparamBlock<double>::make(3, parse_branch_patterns("1x1-3x3,3x3,1x1", 3), rng);
  randomize_block(b, rng);
  auto x = Tensor<double>::normal({2, 3, 6, 5}, rng, 0, 1);
  EXPECT_LT(oracle::max_abs(oracle::to_vec(b.branch_forward(x).data()), stacked_reference(b, x)), 1e-12);
}

TEST(Reparam, FusedEqualsStackedFloat64) {
  Rng rng(3);
  for (const char* pat : {"1x1-3x3", "3x3-1x1", "1x1-1x1", "3x3", "1x1", "1x1-3x3,3x3-1x1"}) {
    auto b = ReparamBlock<double>::make(4, parse_branch_patterns(pat, 2), rng);
    randomize_block(b, rng);
    auto x = Tensor<double>::normal({1, 4, 7, 6}, rng, 0, 1);
    const auto fused = fuse_block(b);
    EXPECT_EQ(fused.mode(), BlockMode::Deploy);
    EXPECT_LT(oracle::max_abs(oracle::to_vec(fused.forward(x).data()), stacked_reference(b, x)), 1e-10) << pat;
  }
}

TEST(Reparam, FusedKernelIsExplicitComposition) {
  // single 1x1 -> 3x3 branch: K[o,i] = delta + sum_m W3[o,m] * W1[m,i]
  Rng rng(4);
  auto b = ReparamBlock<double>::make(2, parse_branch_patterns("1x1-3x3", 1), rng);
  randomize_block(b, rng);
  const auto& w1 = b.branches()[1].layers[0].weight.data();
  const auto& w3 = b.branches()[1].layers[1].weight.data();
  const auto& bias = b.branches()[1].layers[1].bias.data();
  const auto f = fuse_block(b);
  for (int o = 0; o < 2; ++o) {
    EXPECT_NEAR(f.fused()->bias.data()[o], bias[o], 1e-14);
    for (int i = 0; i < 2; ++i)
      for (int k = 0; k < 9; ++k) {
        double e = (o == i && k == 4) ? 1.0 : 0.0;
        for (int m = 0; m < 2; ++m) e += w3[(o * 2 + m) * 9 + k] * w1[m * 2 + i];
        EXPECT_NEAR(f.fused()->weight.data()[(o * 2 + i) * 9 + k], e, 1e-14);
      }
  }
}

TEST(Reparam, FuseIsIdempotentAndKeepsBranches) {
  Rng rng(5);
  auto b = ReparamBlock<float>::make(2, parse_branch_patterns("1x1-3x3", 3), rng);
  const auto f = fuse_block(b);
  const auto g = fuse_block(f);
  EXPECT_EQ(g.fused()->weight.node(), f.fused()->weight.node());
  EXPECT_EQ(f.branches().size(), b.branches().size());
}

TEST(Reparam, FusedFloat32WithinTolerance) {
  Rng rng(6);
  auto b = ReparamBlock<float>::make(8, parse_branch_patterns("1x1-3x3", 3), rng, 0.3);
  auto x = Tensor<float>::normal({1, 8, 16, 16}, rng, 0, 1);
  const auto f = fuse_block(b);
  EXPECT_LT(oracle::max_abs(oracle::to_vec(f.forward(x).data()), oracle::to_vec(b.forward(x).data())), 1e-5);
}

TEST(Reparam, GradFlowsThroughBranches) {
  Rng rng(7);
  auto b = ReparamBlock<double>::make(2, parse_branch_patterns("1x1-3x3", 2), rng, 0.5);
  auto x = Tensor<double>::normal({1, 2, 4, 4}, rng, 0, 1);
  auto& w = b.branches()[2].layers[0].weight;
  const auto r = grad_check(
      [&](const Tensor<double>& t) {
        auto copy = b;
        copy.branches()[2].layers[0].weight = t;
        return sum(square(copy.forward(x)));
      },
      w);
  EXPECT_LE(r.max_relative_error, 1e-4);
}
