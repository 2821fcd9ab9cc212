#include <gtest/gtest.h>

#include "oracles.hpp"
#include "pfseg/adapters.hpp"

using namespace pfseg;

namespace {

AdapterConfig config(AdapterKind kind, std::int64_t dim) {
  AdapterConfig c;
  c.kind = kind;
  c.embed_dim = dim;
  c.hp_dilation_rates = {1, 2, 3};
  return c;
}

template <typename T>
void randomize_all(AdapterState<T>& s, Rng& rng, double sd) {
  ParamList<T> ps;
  s.collect(ps, "a");
  for (auto& p : ps)
    for (auto& v : p.tensor.mutable_data()) v = static_cast<T>(rng.normal(0, sd));
}

// Linear on rows of [L, Din].
oracle::Vec dense(const Linear<double>& l, const oracle::Vec& x, std::int64_t rows) {
  const auto din = l.in_features(), dout = l.out_features();
  oracle::Vec y(rows * dout);
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t o = 0; o < dout; ++o) {
      double s = l.bias.defined() ? l.bias.data()[o] : 0.0;
      for (std::int64_t i = 0; i < din; ++i) s += l.weight.data()[o * din + i] * x[r * din + i];
      y[r * dout + o] = s;
    }
  return y;
}

oracle::Map4 tokens_as_map(const oracle::Vec& t, std::int64_t d, std::int64_t h, std::int64_t w) {
  oracle::Map4 m(1, d, h, w);
  for (std::int64_t p = 0; p < h * w; ++p)
    for (std::int64_t c = 0; c < d; ++c) m.at(0, c, p / w, p % w) = t[p * d + c];
  return m;
}

oracle::Vec map_as_tokens(const oracle::Map4& m) {
  oracle::Vec t(m.c * m.h * m.w);
  for (std::int64_t p = 0; p < m.h * m.w; ++p)
    for (std::int64_t c = 0; c < m.c; ++c) t[p * m.c + c] = m.get(0, c, p / m.w, p % m.w);
  return t;
}

oracle::Map4 conv_same(const oracle::Map4& x, const Conv2dParams<double>& p) {
  return oracle::conv2d(x, oracle::to_vec(p.weight.data()), p.bias.defined() ? oracle::to_vec(p.bias.data()) : oracle::Vec{},
                        p.out_channels(), p.kh(), p.kw(), 1, 1, p.geom.padding.y, p.geom.padding.x, p.geom.dilation.y, p.geom.dilation.x);
}

oracle::Map4 dcn_ref(const oracle::Map4& x, const DCNv2Params<double>& p) {
  auto off = conv_same(x, p.offset_conv);
  auto mask = conv_same(x, p.mask_conv);
  for (auto& v : mask.v) v = 1.0 / (1.0 + std::exp(-v));
  return oracle::deform_conv(x, off, mask, oracle::to_vec(p.base.weight.data()), oracle::to_vec(p.base.bias.data()), p.base.out_channels(), 3, 1,
                             1, 1);
}

void apply_gelu(oracle::Vec& v) {
  for (auto& e : v) e = oracle::gelu(e);
}

oracle::Vec hp_reference(const AdapterState<double>& s, const Tensor<double>& x, std::int64_t h, std::int64_t w) {
  const auto L = h * w, d = s.config.bottleneck();
  auto t = dense(s.down, oracle::to_vec(x.data()), L);
  apply_gelu(t);
  const auto z = tokens_as_map(t, d, h, w);
  auto core = z;
  for (const auto& layer : s.dcn) {
    const auto delta = dcn_ref(s.config.hp_wiring == HpWiring::Sequential ? core : z, layer);
    for (std::size_t i = 0; i < core.v.size(); ++i) core.v[i] += delta.v[i];
  }
  const auto a = conv_same(z, s.skip1x1), b = conv_same(z, s.skip3x3);
  for (std::size_t i = 0; i < core.v.size(); ++i) core.v[i] += a.v[i] + b.v[i];
  apply_gelu(core.v);
  return dense(s.up, map_as_tokens(core), L);
}

oracle::Vec lw_reference(const AdapterState<double>& s, const Tensor<double>& x, std::int64_t h, std::int64_t w) {
  const auto L = h * w, d = s.config.bottleneck();
  auto t = dense(s.down, oracle::to_vec(x.data()), L);
  apply_gelu(t);
  const auto z = tokens_as_map(t, d, h, w);
  auto core = z;
  for (const auto& br : s.reparam.branches()) {
    if (br.kind == BranchKind::Identity) continue;
    auto cur = z;
    for (const auto& l : br.layers) cur = conv_same(cur, l);
    for (std::size_t i = 0; i < core.v.size(); ++i) core.v[i] += cur.v[i];
  }
  apply_gelu(core.v);
  return dense(s.up, map_as_tokens(core), L);
}

}  // namespace

TEST(Adapters, ParseAndSizes) {
  EXPECT_EQ(parse_adapter_kind("lw"), AdapterKind::LW);
  EXPECT_EQ(parse_adapter_kind("none"), AdapterKind::None);
  EXPECT_THROW(parse_adapter_kind("xl"), Error);
  EXPECT_EQ(hp_size_rate('s'), 12);
  EXPECT_EQ(hp_size_rate('m'), 24);
  EXPECT_EQ(hp_size_rate('l'), 36);
  EXPECT_THROW(hp_size_rate('q'), Error);
  AdapterConfig c = config(AdapterKind::HP, 32);
  c.hp_dilation_rates = {12, 24, 36};
  c.dr_scale = 0.25;
  EXPECT_EQ(c.effective_dilations(), (std::vector<int>{3, 6, 9}));
  EXPECT_EQ(c.bottleneck(), 8);
}

TEST(Adapters, UpProjectionStartsAtZero) {
  Rng rng(1);
  for (auto k : {AdapterKind::Plain, AdapterKind::HP, AdapterKind::LW}) {
    auto s = AdapterState<float>::make(config(k, 16), rng);
    for (float v : s.up.weight.data()) EXPECT_EQ(v, 0.0f);
    auto x = Tensor<float>::normal({1, 16, 16}, rng, 0, 1);
    const auto y = s.forward(x, 4, 4);
    for (float v : y.data()) EXPECT_EQ(v, 0.0f);
  }
}

TEST(Adapters, HpMatchesReference) {
  Rng rng(2);
  for (auto wiring : {HpWiring::Sequential, HpWiring::Parallel}) {
    auto c = config(AdapterKind::HP, 8);
    c.hp_wiring = wiring;
    auto s = AdapterState<double>::make(c, rng);
    randomize_all(s, rng, 0.3);
    auto x = Tensor<double>::normal({1, 20, 8}, rng, 0, 1);
    EXPECT_LT(oracle::max_abs(oracle::to_vec(hp_forward(s, x, 4, 5).data()), hp_reference(s, x, 4, 5)), 1e-11);
  }
}

TEST(Adapters, LwMatchesReferenceInBothModes) {
  Rng rng(3);
  auto s = AdapterState<double>::make(config(AdapterKind::LW, 8), rng);
  randomize_all(s, rng, 0.3);
  auto x = Tensor<double>::normal({1, 30, 8}, rng, 0, 1);
  const auto ref = lw_reference(s, x, 5, 6);
  EXPECT_LT(oracle::max_abs(oracle::to_vec(lw_forward(s, x, 5, 6, BlockMode::Train).data()), ref), 1e-11);
  const auto f = fuse_adapter(s);
  EXPECT_LT(oracle::max_abs(oracle::to_vec(lw_forward(f, x, 5, 6, BlockMode::Deploy).data()), ref), 1e-10);
  EXPECT_THROW(lw_forward(f, x, 5, 6, BlockMode::Train), Error);
}

TEST(Adapters, HpIsNotFusable) {
  Rng rng(4);
  auto s = AdapterState<float>::make(config(AdapterKind::HP, 8), rng);
  try {
    fuse_adapter(s);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("HP adapter is not fusable"), std::string::npos);
  }
}

TEST(Adapters, HpDilationBeyondMapIsZeroFilled) {
  Rng rng(5);
  auto c = config(AdapterKind::HP, 8);
  c.hp_dilation_rates = {12};
  auto s = AdapterState<double>::make(c, rng);
  randomize_all(s, rng, 0.3);
  auto x = Tensor<double>::normal({1, 16, 8}, rng, 0, 1);
  EXPECT_LT(oracle::max_abs(oracle::to_vec(s.forward(x, 4, 4).data()), hp_reference(s, x, 4, 4)), 1e-11);
  EXPECT_THROW(DCNv2Params<float>::init(2, 2, 0, rng, 0.1), Error);
}

TEST(Adapters, TokenCountMustMatchGrid) {
  Rng rng(6);
  auto s = AdapterState<float>::make(config(AdapterKind::LW, 8), rng);
  EXPECT_THROW(s.forward(Tensor<float>::zeros({1, 15, 8}), 4, 4), Error);
  EXPECT_THROW(s.forward(Tensor<float>::zeros({1, 16, 9}), 4, 4), Error);
}

TEST(AdapterGrad, HpEndToEnd) {
  Rng rng(7);
  auto s = AdapterState<double>::make(config(AdapterKind::HP, 8), rng);
  randomize_all(s, rng, 0.2);
  // keep learned offsets small so sample points stay off integer coordinates
  for (auto& l : s.dcn) {
    for (auto& v : l.offset_conv.weight.mutable_data()) v *= 0.1;
    for (auto& v : l.offset_conv.bias.mutable_data()) v = 0.25 + 0.05 * v;
  }
  auto x = Tensor<double>::normal({1, 16, 8}, rng, 0, 1);
  auto probe = Tensor<double>::normal({1, 16, 8}, rng, 0, 1);
  auto loss = [&](const AdapterState<double>& a) { return sum(mul(a.forward(x, 4, 4), probe)); };
  auto run = [&](auto setter, const Tensor<double>& at) {
    return grad_check(
               [&](const Tensor<double>& t) {
                 auto copy = s;
                 setter(copy, t);
                 return loss(copy);
               },
               at)
        .max_relative_error;
  };
  EXPECT_LE(run([](auto& a, const auto& t) { a.down.weight = t; }, s.down.weight), 1e-4);
  EXPECT_LE(run([](auto& a, const auto& t) { a.up.weight = t; }, s.up.weight), 1e-4);
  EXPECT_LE(run([](auto& a, const auto& t) { a.dcn[1].base.weight = t; }, s.dcn[1].base.weight), 1e-4);
  EXPECT_LE(run([](auto& a, const auto& t) { a.dcn[0].offset_conv.bias = t; }, s.dcn[0].offset_conv.bias), 1e-4);
  EXPECT_LE(run([](auto& a, const auto& t) { a.skip3x3.weight = t; }, s.skip3x3.weight), 1e-4);
}

TEST(AdapterGrad, LwEndToEnd) {
  Rng rng(8);
  auto s = AdapterState<double>::make(config(AdapterKind::LW, 8), rng);
  randomize_all(s, rng, 0.2);
  auto x = Tensor<double>::normal({1, 16, 8}, rng, 0, 1);
  auto probe = Tensor<double>::normal({1, 16, 8}, rng, 0, 1);
  auto run = [&](auto setter, const Tensor<double>& at) {
    return grad_check(
               [&](const Tensor<double>& t) {
                 auto copy = s;
                 setter(copy, t);
                 return sum(mul(copy.forward(x, 4, 4), probe));
               },
               at)
        .max_relative_error;
  };
  EXPECT_LE(run([](auto& a, const auto& t) { a.down.weight = t; }, s.down.weight), 1e-4);
  EXPECT_LE(run([](auto& a, const auto& t) { a.reparam.branches()[1].layers[0].weight = t; }, s.reparam.branches()[1].layers[0].weight), 1e-4);
  EXPECT_LE(run([](auto& a, const auto& t) { a.reparam.branches()[3].layers[1].bias = t; }, s.reparam.branches()[3].layers[1].bias), 1e-4);
  EXPECT_LE(run([](auto& a, const auto& t) { a.up.bias = t; }, s.up.bias), 1e-4);
}

TEST(TransformerBlockTest, ParallelAdapterAddsScaledOutput) {
  Rng rng(9);
  auto block = TransformerBlock<double>::make(8, 2, 32, rng);
  auto adapter = AdapterState<double>::make(config(AdapterKind::Plain, 8), rng);
  randomize_all(adapter, rng, 0.3);
  const auto with = insert_parallel(block, adapter, 0.1);
  auto x = Tensor<double>::normal({1, 9, 8}, rng, 0, 1);
  const auto base = block.forward(x, 3, 3);
  const auto y = with.forward(x, 3, 3);
  // y - base = 0.1 * adapter(LN2(x + attn(LN1(x))))
  const auto x1 = add(x, block.attn.self_attention(block.ln1.forward(x)));
  const auto a = adapter.forward(block.ln2.forward(x1), 3, 3);
  for (std::int64_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y.data()[i] - base.data()[i], 0.1 * a.data()[i], 1e-12);
  EXPECT_EQ(with.attn.q.base.weight.node(), block.attn.q.base.weight.node());
}
