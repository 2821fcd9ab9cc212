#pragma once

// Bottleneck adapters placed in parallel with the MLP of a transformer block:
//
//   x' = x + Attn(LN1(x))
//   y  = x' + MLP(LN2(x')) + s * Adapter(LN2(x'))
//
// Every adapter is down-projection -> GELU -> core -> up-projection, where the
// core works on the bottleneck tokens laid out as a [N, d, H, W] map:
//   plain: no core (AdaptFormer)
//   HP:    three modulated deformable convolutions with dilated offset/mask
//          predictors, each with a residual skip, plus a 1x1 + 3x3 shortcut
//          across the stack, then GELU
//   LW:    a re-parameterizable multi-branch block, then GELU
// The up-projection starts at zero, so an adapter contributes nothing at init.

#include <optional>
#include <string>
#include <vector>

#include "pfseg/attention.hpp"
#include "pfseg/conv.hpp"
#include "pfseg/reparam.hpp"

namespace pfseg {

enum class AdapterKind { None, Plain, HP, LW };
enum class HpWiring { Sequential, Parallel };

const char* to_string(AdapterKind kind);
AdapterKind parse_adapter_kind(const std::string& text);
const char* to_string(HpWiring wiring);
HpWiring parse_hp_wiring(const std::string& text);

/// Dilation rate for a single-rate HP variant: s -> 12, m -> 24, l -> 36.
int hp_size_rate(char size);

struct AdapterConfig {
  AdapterKind kind = AdapterKind::None;
  std::int64_t embed_dim = 0;
  std::int64_t bottleneck_dim = 0;  // 0 means embed_dim / 4
  double scale = 0.1;
  std::vector<int> hp_dilation_rates{12, 24, 36};
  HpWiring hp_wiring = HpWiring::Sequential;
  int lw_branches = 3;
  std::string branch_pattern = "1x1-3x3";
  double dr_scale = 1.0;

  std::int64_t bottleneck() const { return bottleneck_dim > 0 ? bottleneck_dim : embed_dim / 4; }
  /// Dilation rates after dr_scale, rounded, floored at 1.
  std::vector<int> effective_dilations() const;
  void validate() const;
};

template <typename T>
struct AdapterState {
  AdapterConfig config;
  Linear<T> down;
  Linear<T> up;
  // HP core
  std::vector<DCNv2Params<T>> dcn;
  Conv2dParams<T> skip1x1;
  Conv2dParams<T> skip3x3;
  // LW core
  ReparamBlock<T> reparam;

  static AdapterState make(const AdapterConfig& config, Rng& rng);

  AdapterKind kind() const { return config.kind; }
  /// x[N,L,D] with L == H*W -> [N,L,D].
  Tensor<T> forward(const Tensor<T>& x, std::int64_t h, std::int64_t w) const;
  void collect(ParamList<T>& out, const std::string& prefix) const;
};

/// Runs the HP adapter. Fails with invalid-geometry if a dilated offset
/// predictor cannot produce a same-sized map.
template <typename T>
Tensor<T> hp_forward(const AdapterState<T>& state, const Tensor<T>& x, std::int64_t h, std::int64_t w);

/// Runs the LW adapter; `mode` must match the state's re-parameterization mode.
template <typename T>
Tensor<T> lw_forward(const AdapterState<T>& state, const Tensor<T>& x, std::int64_t h, std::int64_t w, BlockMode mode);

/// Returns a copy whose LW core is fused for inference. HP adapters are rejected.
template <typename T>
AdapterState<T> fuse_adapter(const AdapterState<T>& state);

/// Pre-norm transformer block of the frozen encoder, optionally carrying an adapter.
template <typename T>
struct TransformerBlock {
  LayerNorm<T> ln1, ln2;
  MultiHeadAttention<T> attn;
  Mlp<T> mlp;
  std::optional<AdapterState<T>> adapter;
  double adapter_scale = 0.0;

  static TransformerBlock make(std::int64_t dim, int heads, std::int64_t mlp_hidden, Rng& rng);
  std::int64_t dim() const { return attn.dim(); }

  /// x[N, H*W, D] -> same shape.
  Tensor<T> forward(const Tensor<T>& x, std::int64_t h, std::int64_t w) const;
  /// Collects the frozen block weights only (adapters are named separately).
  void collect(ParamList<T>& out, const std::string& prefix) const;
};

/// Attaches `adapter` beside the block's MLP with output scale s. The block's
/// own weights are shared, not copied.
template <typename T>
TransformerBlock<T> insert_parallel(const TransformerBlock<T>& block, AdapterState<T> adapter, double s);

}  // namespace pfseg
