#include "pfseg/reparam.hpp"

#include <sstream>

namespace pfseg {

const char* to_string(BlockMode mode) { return mode == BlockMode::Train ? "train" : "deploy"; }

std::vector<BranchPattern> parse_branch_patterns(const std::string& text, int branches) {
  if (branches < 0) fail(ErrorKind::Config, "branch count must be >= 0");
  std::vector<BranchPattern> patterns;
  std::stringstream all(text);
  std::string one;
  while (std::getline(all, one, ',')) {
    BranchPattern pattern;
    std::stringstream layers(one);
    std::string layer;
    while (std::getline(layers, layer, '-')) {
      if (layer == "1x1")
        pattern.push_back(1);
      else if (layer == "3x3")
        pattern.push_back(3);
      else
        fail(ErrorKind::Config, "branch_pattern: unknown layer '" + layer + "' (expected 1x1 or 3x3)");
    }
    if (pattern.empty()) fail(ErrorKind::Config, "branch_pattern: empty branch in '" + text + "'");
    patterns.push_back(std::move(pattern));
  }
  if (patterns.empty()) fail(ErrorKind::Config, "branch_pattern is empty");
  if (patterns.size() == 1) return std::vector<BranchPattern>(static_cast<std::size_t>(branches), patterns.front());
  if (static_cast<int>(patterns.size()) != branches)
    fail(ErrorKind::Config, "branch_pattern lists " + std::to_string(patterns.size()) + " branches, expected " +
                                std::to_string(branches));
  return patterns;
}

std::string format_branch_pattern(const BranchPattern& pattern) {
  std::string s;
  for (std::size_t i = 0; i < pattern.size(); ++i) s += (i ? "-" : "") + std::to_string(pattern[i]) + "x" + std::to_string(pattern[i]);
  return s;
}

template <typename T>
ReparamBlock<T> ReparamBlock<T>::make(std::int64_t channels, const std::vector<BranchPattern>& patterns, Rng& rng,
                                      double init_std) {
  if (channels < 1) fail(ErrorKind::InvalidShape, "ReparamBlock needs >= 1 channel");
  ReparamBlock block;
  block.channels_ = channels;
  block.branches_.push_back(BranchSpec<T>{BranchKind::Identity, {}});
  for (const auto& pattern : patterns) {
    BranchSpec<T> branch;
    for (std::size_t i = 0; i < pattern.size(); ++i) {
      const int k = pattern[i];
      Conv2dParams<T> layer;
      layer.weight = Tensor<T>::normal({channels, channels, k, k}, rng, 0.0, init_std);
      if (i + 1 == pattern.size()) layer.bias = Tensor<T>::zeros({channels});
      layer.geom.padding = {k / 2, k / 2};
      branch.layers.push_back(std::move(layer));
    }
    block.branches_.push_back(std::move(branch));
  }
  return block;
}

template <typename T>
int ReparamBlock<T>::conv_branch_count() const {
  int n = 0;
  for (const auto& b : branches_) n += b.kind == BranchKind::ConvSeq;
  return n;
}

template <typename T>
Tensor<T> ReparamBlock<T>::evaluate_branch(std::size_t index, const Tensor<T>& x) const {
  const auto& branch = branches_.at(index);
  if (branch.kind == BranchKind::Identity) return x;
  Tensor<T> h = x;
  for (const auto& layer : branch.layers) h = conv2d(h, layer);
  return h;
}

template <typename T>
Tensor<T> ReparamBlock<T>::branch_forward(const Tensor<T>& x) const {
  if (mode_ != BlockMode::Train) fail(ErrorKind::Contract, "branch_forward on a deploy-mode block; use fused_forward");
  if (x.rank() != 4 || x.dim(1) != channels_)
    fail(ErrorKind::ShapeMismatch, "ReparamBlock expects [N," + std::to_string(channels_) + ",H,W], got " + shape_str(x.shape()));
  Tensor<T> out;
  for (std::size_t i = 0; i < branches_.size(); ++i) {
    Tensor<T> y = evaluate_branch(i, x);
    out = out.defined() ? add(out, y) : y;
  }
  return out;
}

template <typename T>
Tensor<T> ReparamBlock<T>::fused_forward(const Tensor<T>& x) const {
  if (mode_ != BlockMode::Deploy || !fused_) fail(ErrorKind::Contract, "fused_forward on a train-mode block; call fuse_block first");
  return conv2d(x, fused_->weight, fused_->bias, ConvGeometry{{1, 1}, {1, 1}, {1, 1}});
}

template <typename T>
void ReparamBlock<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  for (std::size_t b = 0; b < branches_.size(); ++b) {
    const auto& branch = branches_[b];
    for (std::size_t l = 0; l < branch.layers.size(); ++l) {
      const std::string p = join_name(prefix, "branch." + std::to_string(b) + "." + std::to_string(l));
      push_param(out, p, "weight", branch.layers[l].weight);
      push_param(out, p, "bias", branch.layers[l].bias);
    }
  }
  if (fused_) {
    push_param(out, prefix, "fused.weight", fused_->weight);
    push_param(out, prefix, "fused.bias", fused_->bias);
  }
}

template <typename T>
Tensor<T> pad_1x1_to_3x3(const Tensor<T>& w) {
  if (w.rank() != 4 || w.dim(2) != 1 || w.dim(3) != 1)
    fail(ErrorKind::Contract, "pad_1x1_to_3x3 expects a [C_out,C_in,1,1] kernel, got " + shape_str(w.shape()));
  const auto co = w.dim(0), ci = w.dim(1);
  std::vector<T> out(static_cast<std::size_t>(co * ci * 9), T(0));
  for (std::int64_t i = 0; i < co * ci; ++i) out[static_cast<std::size_t>(i * 9 + 4)] = w.data()[static_cast<std::size_t>(i)];
  return Tensor<T>({co, ci, 3, 3}, std::move(out));
}

template <typename T>
FusedConv<T> identity_to_conv(std::int64_t channels) {
  if (channels < 1) fail(ErrorKind::InvalidShape, "identity_to_conv needs >= 1 channel");
  std::vector<T> w(static_cast<std::size_t>(channels * channels * 9), T(0));
  for (std::int64_t c = 0; c < channels; ++c) w[static_cast<std::size_t>((c * channels + c) * 9 + 4)] = T(1);
  return {Tensor<T>({channels, channels, 3, 3}, std::move(w)), Tensor<T>::zeros({channels})};
}

template <typename T>
Conv2dParams<T> fuse_sequential(const Conv2dParams<T>& first, const Conv2dParams<T>& second) {
  auto unit_stride = [](const Conv2dParams<T>& p) {
    return p.geom.stride == Pair{1, 1} && p.geom.dilation == Pair{1, 1} && p.kh() == p.kw() &&
           p.geom.padding == Pair{static_cast<int>(p.kh() / 2), static_cast<int>(p.kw() / 2)};
  };
  if (!unit_stride(first) || !unit_stride(second))
    fail(ErrorKind::Contract, "fuse_sequential: both convolutions must be stride 1, undilated and same-padded");
  if (second.in_channels() != first.out_channels())
    fail(ErrorKind::Contract, "fuse_sequential: channel chain " + shape_str(first.weight.shape()) + " -> " +
                                  shape_str(second.weight.shape()));
  const auto k1 = first.kh(), k2 = second.kh();
  if (k1 == 3 && k2 == 3) fail(ErrorKind::Contract, "fuse_sequential: 3x3 -> 3x3 would need a 5x5 kernel");
  if ((k1 != 1 && k1 != 3) || (k2 != 1 && k2 != 3)) fail(ErrorKind::Contract, "fuse_sequential: only 1x1 / 3x3 kernels");

  const auto ci = first.in_channels(), cm = first.out_channels(), co = second.out_channels();
  const auto kout = std::max(k1, k2);
  const auto taps = kout * kout;
  auto W1 = first.weight.data();
  auto W2 = second.weight.data();
  std::vector<T> w(static_cast<std::size_t>(co * ci * taps), T(0));
  for (std::int64_t o = 0; o < co; ++o)
    for (std::int64_t m = 0; m < cm; ++m)
      for (std::int64_t i = 0; i < ci; ++i)
        for (std::int64_t t = 0; t < taps; ++t) {
          // One of the two kernels is 1x1 (or both), so spatial taps never mix.
          const T a = k2 == 1 ? W2[static_cast<std::size_t>(o * cm + m)] : W2[static_cast<std::size_t>((o * cm + m) * taps + t)];
          const T b = k1 == 1 ? W1[static_cast<std::size_t>(m * ci + i)] : W1[static_cast<std::size_t>((m * ci + i) * taps + t)];
          w[static_cast<std::size_t>((o * ci + i) * taps + t)] += a * b;
        }

  std::vector<T> bias(static_cast<std::size_t>(co), T(0));
  if (second.bias.defined())
    for (std::int64_t o = 0; o < co; ++o) bias[static_cast<std::size_t>(o)] = second.bias.data()[static_cast<std::size_t>(o)];
  if (first.bias.defined()) {
    const auto t2 = k2 * k2;
    for (std::int64_t o = 0; o < co; ++o)
      for (std::int64_t m = 0; m < cm; ++m) {
        T spatial = 0;
        for (std::int64_t t = 0; t < t2; ++t) spatial += W2[static_cast<std::size_t>((o * cm + m) * t2 + t)];
        bias[static_cast<std::size_t>(o)] += spatial * first.bias.data()[static_cast<std::size_t>(m)];
      }
  }
  Conv2dParams<T> fused;
  fused.weight = Tensor<T>({co, ci, kout, kout}, std::move(w));
  fused.bias = Tensor<T>({co}, std::move(bias));
  fused.geom.padding = {static_cast<int>(kout / 2), static_cast<int>(kout / 2)};
  return fused;
}

template <typename T>
ReparamBlock<T> fuse_block(const ReparamBlock<T>& block) {
  if (block.mode() == BlockMode::Deploy) return block;
  const auto C = block.channels();
  std::vector<T> weight(static_cast<std::size_t>(C * C * 9), T(0));
  std::vector<T> bias(static_cast<std::size_t>(C), T(0));
  auto accumulate = [&](const Tensor<T>& w, const Tensor<T>& b) {
    for (std::size_t i = 0; i < weight.size(); ++i) weight[i] += w.data()[i];
    if (b.defined())
      for (std::size_t i = 0; i < bias.size(); ++i) bias[i] += b.data()[i];
  };
  const auto& branches = block.branches();
  for (std::size_t idx = 0; idx < branches.size(); ++idx) {
    const auto& branch = branches[idx];
    if (branch.kind == BranchKind::Identity) {
      auto id = identity_to_conv<T>(C);
      accumulate(id.weight, id.bias);
      continue;
    }
    if (branch.layers.empty()) fail(ErrorKind::Contract, "fuse_block: branch " + std::to_string(idx) + " has no layers");
    try {
      Conv2dParams<T> reduced = branch.layers.front();
      for (std::size_t l = 1; l < branch.layers.size(); ++l) reduced = fuse_sequential(reduced, branch.layers[l]);
      if (reduced.in_channels() != C || reduced.out_channels() != C)
        fail(ErrorKind::Contract, "branch does not map C -> C channels");
      const Tensor<T> w3 = reduced.kh() == 1 ? pad_1x1_to_3x3(reduced.weight) : reduced.weight;
      if (w3.dim(2) != 3) fail(ErrorKind::Contract, "reduced kernel is not 3x3");
      accumulate(w3, reduced.bias);
    } catch (const Error& e) {
      fail(ErrorKind::Contract, "fuse_block: branch " + std::to_string(idx) + " has an unsupported layer pattern (" +
                                    e.what() + ")");
    }
  }
  ReparamBlock<T> deployed = block;
  deployed.set_fused({Tensor<T>({C, C, 3, 3}, std::move(weight)), Tensor<T>({C}, std::move(bias))});
  deployed.set_mode(BlockMode::Deploy);
  return deployed;
}

#define PFSEG_INSTANTIATE(T)                                                                 \
  template class ReparamBlock<T>;                                                            \
  template Tensor<T> pad_1x1_to_3x3<T>(const Tensor<T>&);                                    \
  template FusedConv<T> identity_to_conv<T>(std::int64_t);                                   \
  template Conv2dParams<T> fuse_sequential<T>(const Conv2dParams<T>&, const Conv2dParams<T>&); \
  template ReparamBlock<T> fuse_block<T>(const ReparamBlock<T>&);

PFSEG_INSTANTIATE(float)
PFSEG_INSTANTIATE(double)
#undef PFSEG_INSTANTIATE

}  // namespace pfseg
