#pragma once

#include "pfseg/lora.hpp"

namespace pfseg {

/// Multi-head scaled dot-product attention with separate q/k/v/out projections.
template <typename T>
struct MultiHeadAttention {
  LoRALinear<T> q, k, v, out;
  int heads = 1;

  static MultiHeadAttention make(std::int64_t dim, int heads, Rng& rng);

  std::int64_t dim() const { return q.base.out_features(); }
  /// queries[N,Lq,D] attend over keys/values[N,Lk,D].
  Tensor<T> forward(const Tensor<T>& queries, const Tensor<T>& keys, const Tensor<T>& values) const;
  Tensor<T> self_attention(const Tensor<T>& x) const { return forward(x, x, x); }
  void collect(ParamList<T>& out_params, const std::string& prefix) const;
};

template <typename T>
struct Mlp {
  LoRALinear<T> fc1, fc2;

  static Mlp make(std::int64_t dim, std::int64_t hidden, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x) const { return fc2.forward(gelu(fc1.forward(x))); }
  void collect(ParamList<T>& out, const std::string& prefix) const {
    fc1.collect(out, join_name(prefix, "fc1"));
    fc2.collect(out, join_name(prefix, "fc2"));
  }
};

}  // namespace pfseg
