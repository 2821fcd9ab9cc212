#pragma once

// Multi-branch linear convolution block and its exact collapse into a single
// 3x3 convolution.
//
// Train mode evaluates   y = x + sum_b branch_b(x)
// where each branch is a stack of stride-1, same-padded 1x1 / 3x3 convolutions
// with no nonlinearity. Deploy mode evaluates one 3x3 convolution whose kernel
// is the sum of the identity (delta) kernel and every branch's reduced kernel.
//
// Only the last layer of a branch carries a bias. A bias ahead of a 3x3 layer
// would be zero-padded at the border in the stacked form but not in the fused
// form, so it cannot be folded exactly.

#include <optional>
#include <string>
#include <vector>

#include "pfseg/conv.hpp"
#include "pfseg/params.hpp"

namespace pfseg {

enum class BlockMode { Train, Deploy };

const char* to_string(BlockMode mode);

enum class BranchKind { Identity, ConvSeq };

template <typename T>
struct BranchSpec {
  BranchKind kind = BranchKind::ConvSeq;
  std::vector<Conv2dParams<T>> layers;
};

/// Kernel sizes of one branch, e.g. {1, 3} for 1x1 then 3x3.
using BranchPattern = std::vector<int>;

/// Parses "1x1-3x3" into {1, 3}. A comma-separated list gives one pattern per
/// branch; a single pattern is repeated for every branch.
std::vector<BranchPattern> parse_branch_patterns(const std::string& text, int branches);
std::string format_branch_pattern(const BranchPattern& pattern);

template <typename T>
struct FusedConv {
  Tensor<T> weight;  // [C,C,3,3]
  Tensor<T> bias;    // [C]
};

template <typename T>
class ReparamBlock {
 public:
  ReparamBlock() = default;

  /// One identity branch plus one conv branch per pattern. Weights ~ N(0, init_std),
  /// biases zero.
  static ReparamBlock make(std::int64_t channels, const std::vector<BranchPattern>& patterns, Rng& rng,
                           double init_std = 0.01);

  std::int64_t channels() const { return channels_; }
  BlockMode mode() const { return mode_; }
  const std::vector<BranchSpec<T>>& branches() const { return branches_; }
  std::vector<BranchSpec<T>>& branches() { return branches_; }
  const std::optional<FusedConv<T>>& fused() const { return fused_; }
  std::optional<FusedConv<T>>& fused() { return fused_; }
  int conv_branch_count() const;

  /// Train-mode forward: sum of all branches.
  Tensor<T> branch_forward(const Tensor<T>& x) const;
  /// Deploy-mode forward: the single fused convolution.
  Tensor<T> fused_forward(const Tensor<T>& x) const;
  Tensor<T> forward(const Tensor<T>& x) const { return mode_ == BlockMode::Train ? branch_forward(x) : fused_forward(x); }

  /// Evaluates one branch alone (train weights), for per-branch inspection.
  Tensor<T> evaluate_branch(std::size_t index, const Tensor<T>& x) const;

  void collect(ParamList<T>& out, const std::string& prefix) const;

  // Assembly hooks for checkpoint loading.
  void set_mode(BlockMode m) { mode_ = m; }
  void set_fused(FusedConv<T> f) { fused_ = std::move(f); }

 private:
  std::int64_t channels_ = 0;
  std::vector<BranchSpec<T>> branches_;
  std::optional<FusedConv<T>> fused_;
  BlockMode mode_ = BlockMode::Train;
};

/// Embeds a 1x1 kernel at the center of a zero 3x3 kernel.
template <typename T>
Tensor<T> pad_1x1_to_3x3(const Tensor<T>& w);

/// Delta kernel realizing the identity map under pad 1, plus zero bias.
template <typename T>
FusedConv<T> identity_to_conv(std::int64_t channels);

/// Single convolution equal to second(first(x)). Supported pairs: 1x1->1x1,
/// 1x1->3x3, 3x3->1x1, all stride 1 and same-padded. The bias
///   b = second.bias + sum_{m,spatial} second.weight[o,m,:,:] * first.bias[m]
/// is exact everywhere except for the 1x1->3x3 border when first.bias != 0.
template <typename T>
Conv2dParams<T> fuse_sequential(const Conv2dParams<T>& first, const Conv2dParams<T>& second);

/// Reduces every branch and sums them into one 3x3 kernel. A deploy block is
/// returned unchanged. Branch weights are kept alongside the fused kernel.
template <typename T>
ReparamBlock<T> fuse_block(const ReparamBlock<T>& block);

}  // namespace pfseg
