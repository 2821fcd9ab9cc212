#pragma once

// Low-rank adaptation of a frozen linear map:
//   y = W x + b + (alpha / r) * B (A x)
// A is [r, D_in], B is [D_out, r]; B starts at zero so the delta is zero.

#include <optional>

#include "pfseg/layers.hpp"

namespace pfseg {

template <typename T>
struct LoRAParams {
  Tensor<T> A;
  Tensor<T> B;
  int rank = 0;
  double alpha = 0.0;

  static LoRAParams make(std::int64_t d_in, std::int64_t d_out, int rank, double alpha, Rng& rng);
  T scaling() const { return static_cast<T>(alpha / rank); }
  std::int64_t param_count() const { return A.numel() + B.numel(); }
};

template <typename T>
Tensor<T> lora_forward(const Tensor<T>& x, const Linear<T>& frozen, const LoRAParams<T>& lora);

/// W' = W + (alpha / r) * B A; the bias is untouched.
template <typename T>
Linear<T> lora_merge(const Linear<T>& frozen, const LoRAParams<T>& lora);

/// Inverse of lora_merge: W = W' - (alpha / r) * B A.
template <typename T>
Linear<T> lora_unmerge(const Linear<T>& merged, const LoRAParams<T>& lora);

/// A frozen linear with an optional LoRA delta.
template <typename T>
struct LoRALinear {
  Linear<T> base;
  std::optional<LoRAParams<T>> lora;

  Tensor<T> forward(const Tensor<T>& x) const { return lora ? lora_forward(x, base, *lora) : base.forward(x); }
  void collect(ParamList<T>& out, const std::string& prefix) const {
    base.collect(out, prefix);
    if (lora) {
      push_param(out, prefix, "lora_A", lora->A);
      push_param(out, prefix, "lora_B", lora->B);
    }
  }
  void merge() {
    if (!lora) return;
    base = lora_merge(base, *lora);
    lora.reset();
  }
};

}  // namespace pfseg
