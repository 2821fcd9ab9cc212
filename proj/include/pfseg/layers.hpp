#pragma once

#include <string>

#include "pfseg/params.hpp"
#include "pfseg/tensor.hpp"

namespace pfseg {

template <typename T>
struct Linear {
  Tensor<T> weight;  // [D_out, D_in]
  Tensor<T> bias;    // [D_out] or undefined

  /// Uniform(-b, b) with b = gain * sqrt(3 / D_in); bias zero.
  static Linear make(std::int64_t d_in, std::int64_t d_out, Rng& rng, double gain = 1.0, bool with_bias = true);
  /// Kaiming-uniform: b = sqrt(6 / D_in).
  static Linear kaiming(std::int64_t d_in, std::int64_t d_out, Rng& rng, bool with_bias = true);
  static Linear zeros(std::int64_t d_in, std::int64_t d_out, bool with_bias = true);

  std::int64_t in_features() const { return weight.dim(1); }
  std::int64_t out_features() const { return weight.dim(0); }
  Tensor<T> forward(const Tensor<T>& x) const { return linear(x, weight, bias); }
  void collect(ParamList<T>& out, const std::string& prefix) const {
    push_param(out, prefix, "weight", weight);
    push_param(out, prefix, "bias", bias);
  }
};

template <typename T>
struct LayerNorm {
  Tensor<T> gamma;
  Tensor<T> beta;

  static LayerNorm make(std::int64_t dim) { return {Tensor<T>::ones({dim}), Tensor<T>::zeros({dim})}; }
  Tensor<T> forward(const Tensor<T>& x) const { return layer_norm_last(x, gamma, beta); }
  void collect(ParamList<T>& out, const std::string& prefix) const {
    push_param(out, prefix, "weight", gamma);
    push_param(out, prefix, "bias", beta);
  }
};

/// [N,L,d] tokens in row-major spatial order -> [N,d,H,W] map.
template <typename T>
Tensor<T> tokens_to_map(const Tensor<T>& x, std::int64_t h, std::int64_t w);

/// [N,d,H,W] -> [N,H*W,d].
template <typename T>
Tensor<T> map_to_tokens(const Tensor<T>& x);

}  // namespace pfseg
