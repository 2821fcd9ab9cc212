#include "pfseg/verify.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>

namespace pfseg {

template <typename T>
void randomize(const ParamList<T>& params, Rng& rng, double stddev) {
  for (const auto& p : params) {
    auto t = p.tensor;
    for (auto& v : t.mutable_data()) v = static_cast<T>(rng.normal(0.0, stddev));
  }
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) fail(ErrorKind::ShapeMismatch, "max_abs_diff: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  double m = 0;
  for (std::size_t i = 0; i < a.data().size(); ++i) m = std::max(m, std::abs(static_cast<double>(a.data()[i]) - b.data()[i]));
  return m;
}

namespace {

std::int64_t pick(Rng& rng, std::int64_t lo, std::int64_t hi) { return lo + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(hi - lo + 1))); }

SuiteResult finish(std::string name, double err, double tol, std::string detail = {}) {
  SuiteResult r;
  r.name = std::move(name);
  r.max_error = err;
  r.tolerance = tol;
  r.passed = std::isfinite(err) && err <= tol;
  r.detail = std::move(detail);
  return r;
}

template <typename T>
SuiteResult fusion_impl(const VerifyOptions& opts) {
  NoGradGuard guard;
  Rng rng(opts.seed ^ 0xf05e);
  const std::int64_t channels[] = {1, 2, 4, 8};
  const auto patterns = parse_branch_patterns("1x1-3x3", 3);
  double worst = 0;
  for (int i = 0; i < opts.fusion_blocks; ++i) {
    const auto C = channels[rng.below(4)];
    const auto H = pick(rng, 4, 16), W = pick(rng, 4, 16);
    auto block = ReparamBlock<T>::make(C, patterns, rng, 0.3);
    ParamList<T> params;
    block.collect(params, "");
    randomize(params, rng, 0.3);
    auto fused = fuse_block(block);
    if (opts.perturb_fused) {
      auto w = fused.fused()->weight;
      w.mutable_data()[0] += static_cast<T>(1e-2);
    }
    Tensor<T> x = Tensor<T>::normal({1, C, H, W}, rng, 0.0, 1.0);
    worst = std::max(worst, max_abs_diff(block.branch_forward(x), fused.fused_forward(x)));
  }
  return finish("fusion", worst, sizeof(T) == 4 ? 1e-5 : 1e-10, std::to_string(opts.fusion_blocks) + " random LW blocks");
}

template <typename T>
SuiteResult dcn_impl(const VerifyOptions& opts) {
  NoGradGuard guard;
  Rng rng(opts.seed ^ 0xdc2);
  double worst = 0;
  for (int i = 0; i < opts.dcn_instances; ++i) {
    const auto C = pick(rng, 1, 6), Co = pick(rng, 1, 6), H = pick(rng, 3, 12), W = pick(rng, 3, 12);
    const int rate = static_cast<int>(pick(rng, 1, 4));
    auto p = DCNv2Params<T>::init(C, Co, rate, rng, 0.5);
    p.base.bias = Tensor<T>::normal({Co}, rng, 0.0, 0.5);
    // learned predictors would move the taps; the hooks must override them
    p.offset_conv.weight = Tensor<T>::normal(p.offset_conv.weight.shape(), rng, 0.0, 0.5);
    Tensor<T> x = Tensor<T>::normal({pick(rng, 1, 2), C, H, W}, rng, 0.0, 1.0);
    DcnOverride hooks;
    hooks.zero_offsets = true;
    hooks.modulation = 1.0;
    worst = std::max(worst, max_abs_diff(dcn_v2(x, p, hooks), conv2d(x, p.base)));
  }
  return finish("dcn-degenerate", worst, sizeof(T) == 4 ? 1e-6 : 1e-12, std::to_string(opts.dcn_instances) + " instances");
}

template <typename T>
SuiteResult lora_impl(const VerifyOptions& opts) {
  NoGradGuard guard;
  Rng rng(opts.seed ^ 0x10a);
  double worst = 0, worst_unmerge = 0;
  for (int i = 0; i < opts.lora_probes; ++i) {
    const auto din = pick(rng, 4, 32), dout = pick(rng, 4, 32);
    const int r = static_cast<int>(pick(rng, 1, 4));
    auto base = Linear<T>::make(din, dout, rng);
    auto lora = LoRAParams<T>::make(din, dout, r, 8.0, rng);
    lora.B = Tensor<T>::normal({dout, r}, rng, 0.0, 0.1);
    Tensor<T> x = Tensor<T>::normal({3, din}, rng, 0.0, 1.0);
    const auto merged = lora_merge(base, lora);
    worst = std::max(worst, max_abs_diff(lora_forward(x, base, lora), merged.forward(x)));
    worst_unmerge = std::max(worst_unmerge, max_abs_diff(lora_unmerge(merged, lora).weight, base.weight));
  }
  std::ostringstream detail;
  detail << opts.lora_probes << " probes, unmerge error " << std::setprecision(3) << worst_unmerge;
  return finish("lora-merge", std::max(worst, worst_unmerge), sizeof(T) == 4 ? 1e-6 : 1e-12, detail.str());
}

// Weighted sum with fixed random weights, so every output coordinate matters.
std::function<Tensor<double>(const Tensor<double>&)> probe(std::function<Tensor<double>(const Tensor<double>&)> f,
                                                            const Tensor<double>& at, Rng& rng) {
  Tensor<double> shape_probe;
  {
    NoGradGuard guard;
    shape_probe = f(at);
  }
  auto weights = Tensor<double>::normal(shape_probe.shape(), rng, 0.0, 1.0);
  return [f = std::move(f), weights](const Tensor<double>& p) { return sum(mul(f(p), weights)); };
}

struct GradTally {
  double worst = 0;
  std::string where;
  void add(const std::string& name, const GradCheckResult& r) {
    if (where.empty() || r.max_relative_error > worst) {
      worst = r.max_relative_error;
      where = name + " (analytic " + std::to_string(r.analytic) + ", numeric " + std::to_string(r.numeric) + ")";
    }
  }
};

AdapterState<double> random_adapter(AdapterKind kind, Rng& rng) {
  AdapterConfig c;
  c.kind = kind;
  c.embed_dim = 8;
  c.bottleneck_dim = 4;
  c.hp_dilation_rates = {1, 2, 3};
  c.dr_scale = 1.0;
  auto s = AdapterState<double>::make(c, rng);
  ParamList<double> params;
  s.collect(params, "");
  randomize(params, rng, 0.4);
  // keep sampling positions off the integer grid and modulation away from saturation
  for (auto& d : s.dcn) {
    for (auto& v : d.offset_conv.bias.mutable_data()) v = rng.uniform(-1.5, 1.5) + 0.37;
    for (auto& v : d.mask_conv.bias.mutable_data()) v = rng.uniform(-1.0, 1.0);
  }
  return s;
}

}  // namespace

SuiteResult verify_fusion(const VerifyOptions& opts) { return opts.float64 ? fusion_impl<double>(opts) : fusion_impl<float>(opts); }
SuiteResult verify_dcn_degenerate(const VerifyOptions& opts) { return opts.float64 ? dcn_impl<double>(opts) : dcn_impl<float>(opts); }
SuiteResult verify_lora_merge(const VerifyOptions& opts) { return opts.float64 ? lora_impl<double>(opts) : lora_impl<float>(opts); }

SuiteResult verify_grad(const VerifyOptions& opts) {
  using D = double;
  Rng rng(opts.seed ^ 0x9ad);
  GradTally tally;
  for (int i = 0; i < opts.grad_points; ++i) {
    // conv2d: input, weight, bias
    {
      const ConvGeometry geom{{1 + static_cast<int>(rng.below(2)), 1}, {1, 1}, {1, 1 + static_cast<int>(rng.below(2))}};
      auto x = Tensor<D>::normal({1, 2, 5, 6}, rng, 0.0, 1.0);
      auto w = Tensor<D>::normal({3, 2, 3, 3}, rng, 0.0, 0.5);
      auto b = Tensor<D>::normal({3}, rng, 0.0, 0.5);
      tally.add("conv2d.x", grad_check(probe([&](const Tensor<D>& p) { return conv2d(p, w, b, geom); }, x, rng), x));
      tally.add("conv2d.weight", grad_check(probe([&](const Tensor<D>& p) { return conv2d(x, p, b, geom); }, w, rng), w));
      tally.add("conv2d.bias", grad_check(probe([&](const Tensor<D>& p) { return conv2d(x, w, p, geom); }, b, rng), b));
    }
    // depthwise
    {
      auto x = Tensor<D>::normal({2, 3, 5, 4}, rng, 0.0, 1.0);
      auto w = Tensor<D>::normal({3, 1, 3, 3}, rng, 0.0, 0.5);
      auto b = Tensor<D>::normal({3}, rng, 0.0, 0.5);
      tally.add("depthwise.x", grad_check(probe([&](const Tensor<D>& p) { return depthwise_conv2d(p, w, b); }, x, rng), x));
      tally.add("depthwise.weight", grad_check(probe([&](const Tensor<D>& p) { return depthwise_conv2d(x, p, b); }, w, rng), w));
    }
    // modulated deformable conv, including the offset coordinates
    {
      const ConvGeometry geom{{1, 1}, {1, 1}, {1, 1}};
      auto x = Tensor<D>::normal({1, 2, 5, 5}, rng, 0.0, 1.0);
      auto w = Tensor<D>::normal({2, 2, 3, 3}, rng, 0.0, 0.5);
      auto b = Tensor<D>::normal({2}, rng, 0.0, 0.5);
      auto off = Tensor<D>::uniform({1, 18, 5, 5}, rng, -1.8, 1.8);
      auto mask = Tensor<D>::uniform({1, 9, 5, 5}, rng, 0.1, 0.9);
      tally.add("dcn.x", grad_check(probe([&](const Tensor<D>& p) { return deform_conv2d(p, off, mask, w, b, geom); }, x, rng), x));
      tally.add("dcn.offset", grad_check(probe([&](const Tensor<D>& p) { return deform_conv2d(x, p, mask, w, b, geom); }, off, rng), off));
      tally.add("dcn.mask", grad_check(probe([&](const Tensor<D>& p) { return deform_conv2d(x, off, p, w, b, geom); }, mask, rng), mask));
      tally.add("dcn.weight", grad_check(probe([&](const Tensor<D>& p) { return deform_conv2d(x, off, mask, p, b, geom); }, w, rng), w));
    }
    // HP adapter end to end
    {
      auto s = random_adapter(AdapterKind::HP, rng);
      auto x = Tensor<D>::normal({1, 16, 8}, rng, 0.0, 1.0);
      tally.add("hp.x", grad_check(probe([&](const Tensor<D>& p) { return hp_forward(s, p, 4, 4); }, x, rng), x));
      auto with = [&](auto setter) {
        return [&, setter](const Tensor<D>& p) {
          auto c = s;
          setter(c, p);
          return hp_forward(c, x, 4, 4);
        };
      };
      auto set_offset = [](AdapterState<D>& c, const Tensor<D>& p) { c.dcn[1].offset_conv.weight = p; };
      auto set_mask = [](AdapterState<D>& c, const Tensor<D>& p) { c.dcn[2].mask_conv.weight = p; };
      auto set_base = [](AdapterState<D>& c, const Tensor<D>& p) { c.dcn[0].base.weight = p; };
      auto set_down = [](AdapterState<D>& c, const Tensor<D>& p) { c.down.weight = p; };
      auto set_up = [](AdapterState<D>& c, const Tensor<D>& p) { c.up.weight = p; };
      auto set_skip = [](AdapterState<D>& c, const Tensor<D>& p) { c.skip3x3.weight = p; };
      tally.add("hp.offset_conv", grad_check(probe(with(set_offset), s.dcn[1].offset_conv.weight, rng), s.dcn[1].offset_conv.weight));
      tally.add("hp.mask_conv", grad_check(probe(with(set_mask), s.dcn[2].mask_conv.weight, rng), s.dcn[2].mask_conv.weight));
      tally.add("hp.dcn_weight", grad_check(probe(with(set_base), s.dcn[0].base.weight, rng), s.dcn[0].base.weight));
      tally.add("hp.down", grad_check(probe(with(set_down), s.down.weight, rng), s.down.weight));
      tally.add("hp.up", grad_check(probe(with(set_up), s.up.weight, rng), s.up.weight));
      tally.add("hp.skip3x3", grad_check(probe(with(set_skip), s.skip3x3.weight, rng), s.skip3x3.weight));
    }
    // LW adapter end to end (train mode)
    {
      auto s = random_adapter(AdapterKind::LW, rng);
      auto x = Tensor<D>::normal({1, 16, 8}, rng, 0.0, 1.0);
      tally.add("lw.x", grad_check(probe([&](const Tensor<D>& p) { return lw_forward(s, p, 4, 4, BlockMode::Train); }, x, rng), x));
      for (std::size_t b = 1; b < s.reparam.branches().size(); ++b)
        for (std::size_t l = 0; l < s.reparam.branches()[b].layers.size(); ++l) {
          const auto w0 = s.reparam.branches()[b].layers[l].weight;
          auto f = [&, b, l](const Tensor<D>& p) {
            auto c = s;
            c.reparam.branches()[b].layers[l].weight = p;
            return lw_forward(c, x, 4, 4, BlockMode::Train);
          };
          tally.add("lw.branch", grad_check(probe(f, w0, rng), w0));
        }
      auto fd = [&](const Tensor<D>& p) {
        auto c = s;
        c.down.weight = p;
        return lw_forward(c, x, 4, 4, BlockMode::Train);
      };
      tally.add("lw.down", grad_check(probe(fd, s.down.weight, rng), s.down.weight));
    }
    // LoRA path
    {
      auto base = Linear<D>::make(6, 5, rng);
      auto lora = LoRAParams<D>::make(6, 5, 2, 4.0, rng);
      lora.B = Tensor<D>::normal({5, 2}, rng, 0.0, 0.5);
      auto x = Tensor<D>::normal({3, 6}, rng, 0.0, 1.0);
      tally.add("lora.x", grad_check(probe([&](const Tensor<D>& p) { return lora_forward(p, base, lora); }, x, rng), x));
      auto fa = [&](const Tensor<D>& p) {
        auto l = lora;
        l.A = p;
        return lora_forward(x, base, l);
      };
      auto fb = [&](const Tensor<D>& p) {
        auto l = lora;
        l.B = p;
        return lora_forward(x, base, l);
      };
      tally.add("lora.A", grad_check(probe(fa, lora.A, rng), lora.A));
      tally.add("lora.B", grad_check(probe(fb, lora.B, rng), lora.B));
    }
  }
  return finish("grad-check", tally.worst, 1e-4, "worst at " + tally.where);
}

SuiteResult verify_peg_shapes(const VerifyOptions& opts) {
  NoGradGuard guard;
  ModelConfig c;
  c.seed = opts.seed;
  c.adapter.kind = AdapterKind::LW;
  c.posenc = PosEncKind::Peg;
  auto model = SegModel<float>::make(c);
  Rng rng(opts.seed ^ 0x9e9);
  ParamList<float> pegs;
  for (std::size_t s = 0; s < model.pegs().size(); ++s) model.pegs()[s].collect(pegs, "peg");
  randomize(pegs, rng, 0.1);
  std::ostringstream bad;
  const std::pair<std::int64_t, std::int64_t> sizes[] = {{64, 64}, {96, 64}, {128, 128}};
  for (auto [h, w] : sizes) {
    auto x = Tensor<float>::uniform({1, 3, h, w}, rng, 0.0, 1.0);
    auto f = model.encoder_forward(x);
    auto low = model.decoder_forward(f);
    auto full = resize_bilinear(low, h, w);
    const Shape want_low{1, c.num_classes, h / 2, w / 2}, want_full{1, c.num_classes, h, w};
    const Shape want_s0{1, c.encoder.stages[0].dim, h / 4, w / 4};
    if (low.shape() != want_low || full.shape() != want_full || f.maps[0].shape() != want_s0)
      bad << h << "x" << w << " gave " << shape_str(low.shape()) << "; ";
    for (float v : full.data())
      if (!std::isfinite(v)) {
        bad << h << "x" << w << " produced non-finite logits; ";
        break;
      }
  }
  SuiteResult r = finish("peg-shapes", bad.str().empty() ? 0.0 : 1.0, 0.0, bad.str().empty() ? "64x64, 96x64, 128x128" : bad.str());
  return r;
}

SuiteResult verify_transparency(const VerifyOptions& opts) {
  NoGradGuard guard;
  double worst = 0;
  for (AdapterKind kind : {AdapterKind::Plain, AdapterKind::HP, AdapterKind::LW}) {
    ModelConfig c;
    c.seed = opts.seed;
    c.adapter.kind = kind;
    c.posenc = PosEncKind::Peg;
    ModelConfig v = ModelConfig::vanilla();
    v.seed = opts.seed;
    auto adapted = SegModel<float>::make(c);
    auto vanilla = SegModel<float>::make(v);
    Rng rng(opts.seed ^ 0x7a5);
    for (int i = 0; i < opts.transparency_images; ++i) {
      auto x = Tensor<float>::uniform({1, 3, 32, 32}, rng, 0.0, 1.0);
      const auto a = adapted.forward(x), b = vanilla.forward(x);
      for (std::size_t k = 0; k < a.data().size(); ++k)
        if (a.data()[k] != b.data()[k]) worst = std::max(worst, std::abs(static_cast<double>(a.data()[k]) - b.data()[k]) + 1e-30);
    }
  }
  return finish("transparency", worst, 0.0, "zero-init add-ons vs vanilla, bitwise");
}

std::vector<SuiteResult> run_verify(const VerifyOptions& opts) {
  return {verify_fusion(opts), verify_grad(opts), verify_dcn_degenerate(opts), verify_lora_merge(opts), verify_peg_shapes(opts),
          verify_transparency(opts)};
}

std::string format_results(const std::vector<SuiteResult>& results) {
  std::ostringstream os;
  os << std::left << std::setw(16) << "suite" << std::setw(6) << "ok" << std::setw(14) << "max_error" << std::setw(12) << "tolerance"
     << "detail\n";
  for (const auto& r : results)
    os << std::left << std::setw(16) << r.name << std::setw(6) << (r.passed ? "PASS" : "FAIL") << std::setw(14) << std::scientific
       << std::setprecision(3) << r.max_error << std::setw(12) << r.tolerance << r.detail << "\n";
  return os.str();
}

#define PFSEG_INSTANTIATE(T)                                          \
  template void randomize<T>(const ParamList<T>&, Rng&, double);      \
  template double max_abs_diff<T>(const Tensor<T>&, const Tensor<T>&);

PFSEG_INSTANTIATE(float)
PFSEG_INSTANTIATE(double)
#undef PFSEG_INSTANTIATE

}  // namespace pfseg
