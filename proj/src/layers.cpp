#include <cmath>

#include "pfseg/attention.hpp"
#include "pfseg/layers.hpp"
#include "pfseg/lora.hpp"

namespace pfseg {

template <typename T>
Linear<T> Linear<T>::make(std::int64_t d_in, std::int64_t d_out, Rng& rng, double gain, bool with_bias) {
  const double bound = gain * std::sqrt(3.0 / static_cast<double>(d_in));
  Linear l;
  l.weight = Tensor<T>::uniform({d_out, d_in}, rng, -bound, bound);
  if (with_bias) l.bias = Tensor<T>::zeros({d_out});
  return l;
}

template <typename T>
Linear<T> Linear<T>::kaiming(std::int64_t d_in, std::int64_t d_out, Rng& rng, bool with_bias) {
  return make(d_in, d_out, rng, std::sqrt(2.0), with_bias);
}

template <typename T>
Linear<T> Linear<T>::zeros(std::int64_t d_in, std::int64_t d_out, bool with_bias) {
  Linear l;
  l.weight = Tensor<T>::zeros({d_out, d_in});
  if (with_bias) l.bias = Tensor<T>::zeros({d_out});
  return l;
}

template <typename T>
Tensor<T> tokens_to_map(const Tensor<T>& x, std::int64_t h, std::int64_t w) {
  if (x.rank() != 3) fail(ErrorKind::ShapeMismatch, "tokens_to_map expects [N,L,d], got " + shape_str(x.shape()));
  if (x.dim(1) != h * w)
    fail(ErrorKind::ShapeMismatch, "tokens_to_map: L=" + std::to_string(x.dim(1)) + " but H*W=" + std::to_string(h * w));
  return reshape(permute(x, {0, 2, 1}), {x.dim(0), x.dim(2), h, w});
}

template <typename T>
Tensor<T> map_to_tokens(const Tensor<T>& x) {
  if (x.rank() != 4) fail(ErrorKind::ShapeMismatch, "map_to_tokens expects [N,d,H,W], got " + shape_str(x.shape()));
  return permute(reshape(x, {x.dim(0), x.dim(1), x.dim(2) * x.dim(3)}), {0, 2, 1});
}

// ---------------------------------------------------------------------------
// LoRA

template <typename T>
LoRAParams<T> LoRAParams<T>::make(std::int64_t d_in, std::int64_t d_out, int rank, double alpha, Rng& rng) {
  if (rank < 1 || rank > std::min(d_in, d_out))
    fail(ErrorKind::Contract, "LoRA rank " + std::to_string(rank) + " exceeds min(D_in, D_out) = " +
                                  std::to_string(std::min(d_in, d_out)));
  LoRAParams p;
  p.rank = rank;
  p.alpha = alpha;
  const double bound = std::sqrt(3.0 / static_cast<double>(d_in));
  p.A = Tensor<T>::uniform({rank, d_in}, rng, -bound, bound);
  p.B = Tensor<T>::zeros({d_out, rank});
  return p;
}

namespace {

template <typename T>
void check_lora(const Linear<T>& frozen, const LoRAParams<T>& lora) {
  if (lora.rank < 1 || lora.A.dim(0) != lora.rank || lora.B.dim(1) != lora.rank)
    fail(ErrorKind::Contract, "LoRA factors disagree with rank " + std::to_string(lora.rank));
  if (lora.A.dim(1) != frozen.in_features() || lora.B.dim(0) != frozen.out_features())
    fail(ErrorKind::ShapeMismatch, "LoRA factors " + shape_str(lora.B.shape()) + "x" + shape_str(lora.A.shape()) +
                                       " do not match weight " + shape_str(frozen.weight.shape()));
  if (lora.rank > std::min(frozen.in_features(), frozen.out_features()))
    fail(ErrorKind::Contract, "LoRA rank exceeds the frozen weight's dimensions");
}

template <typename T>
Linear<T> apply_delta(const Linear<T>& base, const LoRAParams<T>& lora, double sign) {
  check_lora(base, lora);
  const auto dout = base.out_features(), din = base.in_features();
  const auto r = lora.rank;
  auto A = lora.A.data();
  auto B = lora.B.data();
  const double s = sign * lora.alpha / lora.rank;
  std::vector<T> w(base.weight.data().begin(), base.weight.data().end());
  for (std::int64_t o = 0; o < dout; ++o)
    for (std::int64_t i = 0; i < din; ++i) {
      T delta = 0;
      for (std::int64_t j = 0; j < r; ++j) delta += B[static_cast<std::size_t>(o * r + j)] * A[static_cast<std::size_t>(j * din + i)];
      w[static_cast<std::size_t>(o * din + i)] += static_cast<T>(s) * delta;
    }
  Linear<T> out;
  out.weight = Tensor<T>({dout, din}, std::move(w));
  if (base.bias.defined()) out.bias = base.bias.detach();
  return out;
}

}  // namespace

template <typename T>
Tensor<T> lora_forward(const Tensor<T>& x, const Linear<T>& frozen, const LoRAParams<T>& lora) {
  check_lora(frozen, lora);
  Tensor<T> delta = linear(linear(x, lora.A), lora.B);
  return add(frozen.forward(x), scale(delta, lora.scaling()));
}

template <typename T>
Linear<T> lora_merge(const Linear<T>& frozen, const LoRAParams<T>& lora) {
  return apply_delta(frozen, lora, 1.0);
}

template <typename T>
Linear<T> lora_unmerge(const Linear<T>& merged, const LoRAParams<T>& lora) {
  return apply_delta(merged, lora, -1.0);
}

// ---------------------------------------------------------------------------
// Attention

template <typename T>
MultiHeadAttention<T> MultiHeadAttention<T>::make(std::int64_t dim, int heads, Rng& rng) {
  if (heads < 1 || dim % heads != 0)
    fail(ErrorKind::Config, "attention dim " + std::to_string(dim) + " not divisible by " + std::to_string(heads) + " heads");
  MultiHeadAttention a;
  a.heads = heads;
  a.q.base = Linear<T>::make(dim, dim, rng);
  a.k.base = Linear<T>::make(dim, dim, rng);
  a.v.base = Linear<T>::make(dim, dim, rng);
  a.out.base = Linear<T>::make(dim, dim, rng);
  return a;
}

template <typename T>
Tensor<T> MultiHeadAttention<T>::forward(const Tensor<T>& queries, const Tensor<T>& keys, const Tensor<T>& values) const {
  const auto N = queries.dim(0), Lq = queries.dim(1), Lk = keys.dim(1), D = dim();
  const auto dh = D / heads;
  auto split = [&](const Tensor<T>& t, std::int64_t L) {
    return reshape(permute(reshape(t, {N, L, heads, dh}), {0, 2, 1, 3}), {N * heads, L, dh});
  };
  Tensor<T> qh = split(q.forward(queries), Lq);
  Tensor<T> kh = split(k.forward(keys), Lk);
  Tensor<T> vh = split(v.forward(values), Lk);
  Tensor<T> scores = scale(bmm(qh, kh, true), static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
  Tensor<T> context = bmm(softmax_last(scores), vh);
  Tensor<T> merged = reshape(permute(reshape(context, {N, heads, Lq, dh}), {0, 2, 1, 3}), {N, Lq, D});
  return out.forward(merged);
}

template <typename T>
void MultiHeadAttention<T>::collect(ParamList<T>& out_params, const std::string& prefix) const {
  q.collect(out_params, join_name(prefix, "q"));
  k.collect(out_params, join_name(prefix, "k"));
  v.collect(out_params, join_name(prefix, "v"));
  out.collect(out_params, join_name(prefix, "out"));
}

template <typename T>
Mlp<T> Mlp<T>::make(std::int64_t dim, std::int64_t hidden, Rng& rng) {
  Mlp m;
  m.fc1.base = Linear<T>::make(dim, hidden, rng);
  m.fc2.base = Linear<T>::make(hidden, dim, rng);
  return m;
}

#define PFSEG_INSTANTIATE(T)                                                                  \
  template struct Linear<T>;                                                                  \
  template Tensor<T> tokens_to_map<T>(const Tensor<T>&, std::int64_t, std::int64_t);          \
  template Tensor<T> map_to_tokens<T>(const Tensor<T>&);                                      \
  template struct LoRAParams<T>;                                                              \
  template Tensor<T> lora_forward<T>(const Tensor<T>&, const Linear<T>&, const LoRAParams<T>&); \
  template Linear<T> lora_merge<T>(const Linear<T>&, const LoRAParams<T>&);                   \
  template Linear<T> lora_unmerge<T>(const Linear<T>&, const LoRAParams<T>&);                 \
  template struct MultiHeadAttention<T>;                                                      \
  template struct Mlp<T>;

PFSEG_INSTANTIATE(float)
PFSEG_INSTANTIATE(double)
#undef PFSEG_INSTANTIATE

}  // namespace pfseg
