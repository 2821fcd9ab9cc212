#include "pfseg/adapters.hpp"

#include <algorithm>
#include <cmath>

namespace pfseg {

const char* to_string(AdapterKind kind) {
  switch (kind) {
    case AdapterKind::None: return "none";
    case AdapterKind::Plain: return "plain";
    case AdapterKind::HP: return "hp";
    case AdapterKind::LW: return "lw";
  }
  return "none";
}

AdapterKind parse_adapter_kind(const std::string& text) {
  if (text == "none") return AdapterKind::None;
  if (text == "plain" || text == "adaptformer") return AdapterKind::Plain;
  if (text == "hp") return AdapterKind::HP;
  if (text == "lw") return AdapterKind::LW;
  fail(ErrorKind::Config, "unknown adapter kind '" + text + "' (expected none|plain|hp|lw)");
}

const char* to_string(HpWiring wiring) { return wiring == HpWiring::Sequential ? "sequential" : "parallel"; }

HpWiring parse_hp_wiring(const std::string& text) {
  if (text == "sequential") return HpWiring::Sequential;
  if (text == "parallel") return HpWiring::Parallel;
  fail(ErrorKind::Config, "unknown hp_wiring '" + text + "' (expected sequential|parallel)");
}

int hp_size_rate(char size) {
  switch (size) {
    case 's': return 12;
    case 'm': return 24;
    case 'l': return 36;
    default: fail(ErrorKind::Config, std::string("unknown HP size '") + size + "' (expected s|m|l)");
  }
}

std::vector<int> AdapterConfig::effective_dilations() const {
  std::vector<int> out;
  for (int r : hp_dilation_rates) out.push_back(std::max(1, static_cast<int>(std::lround(r * dr_scale))));
  return out;
}

void AdapterConfig::validate() const {
  if (kind == AdapterKind::None) return;
  if (embed_dim < 1) fail(ErrorKind::Config, "adapter embed_dim must be >= 1");
  if (bottleneck() < 1 || bottleneck() >= embed_dim)
    fail(ErrorKind::Config, "adapter bottleneck " + std::to_string(bottleneck()) + " must satisfy 1 <= d < D = " +
                                std::to_string(embed_dim));
  if (!(scale > 0)) fail(ErrorKind::Config, "adapter scale must be > 0");
  if (kind == AdapterKind::HP) {
    if (hp_dilation_rates.empty()) fail(ErrorKind::Config, "hp_dilation_rates must be nonempty");
    if (!std::is_sorted(hp_dilation_rates.begin(), hp_dilation_rates.end()))
      fail(ErrorKind::Config, "hp_dilation_rates must be ascending");
    for (int r : hp_dilation_rates)
      if (r < 1) fail(ErrorKind::Config, "dilation rates must be >= 1");
    if (!(dr_scale > 0)) fail(ErrorKind::Config, "dr_scale must be > 0");
  }
  if (kind == AdapterKind::LW && lw_branches < 0) fail(ErrorKind::Config, "lw_branches must be >= 0");
}

template <typename T>
AdapterState<T> AdapterState<T>::make(const AdapterConfig& config, Rng& rng) {
  config.validate();
  if (config.kind == AdapterKind::None) fail(ErrorKind::Contract, "cannot build an adapter of kind none");
  AdapterState s;
  s.config = config;
  const auto D = config.embed_dim, d = config.bottleneck();
  s.down = Linear<T>::kaiming(D, d, rng);
  s.up = Linear<T>::zeros(d, D);
  if (config.kind == AdapterKind::HP) {
    const double base_std = std::sqrt(1.0 / static_cast<double>(9 * d));
    for (int rate : config.effective_dilations()) s.dcn.push_back(DCNv2Params<T>::init(d, d, rate, rng, base_std));
    s.skip1x1.weight = Tensor<T>::normal({d, d, 1, 1}, rng, 0.0, std::sqrt(1.0 / static_cast<double>(d)));
    s.skip1x1.bias = Tensor<T>::zeros({d});
    s.skip3x3.weight = Tensor<T>::normal({d, d, 3, 3}, rng, 0.0, base_std);
    s.skip3x3.bias = Tensor<T>::zeros({d});
    s.skip3x3.geom.padding = {1, 1};
  } else if (config.kind == AdapterKind::LW) {
    s.reparam = ReparamBlock<T>::make(d, parse_branch_patterns(config.branch_pattern, config.lw_branches), rng);
  }
  return s;
}

namespace {

template <typename T>
void check_tokens(const AdapterState<T>& s, const Tensor<T>& x, std::int64_t h, std::int64_t w) {
  if (x.rank() != 3 || x.dim(2) != s.config.embed_dim)
    fail(ErrorKind::ShapeMismatch, "adapter expects [N,L," + std::to_string(s.config.embed_dim) + "], got " + shape_str(x.shape()));
  if (x.dim(1) != h * w)
    fail(ErrorKind::ShapeMismatch, "adapter: L=" + std::to_string(x.dim(1)) + " but H*W=" + std::to_string(h * w));
}

}  // namespace

template <typename T>
Tensor<T> hp_forward(const AdapterState<T>& state, const Tensor<T>& x, std::int64_t h, std::int64_t w) {
  if (state.kind() != AdapterKind::HP) fail(ErrorKind::Contract, "hp_forward on a non-HP adapter");
  check_tokens(state, x, h, w);
  Tensor<T> z = tokens_to_map(gelu(state.down.forward(x)), h, w);
  Tensor<T> core;
  try {
    if (state.config.hp_wiring == HpWiring::Sequential) {
      core = z;
      for (const auto& layer : state.dcn) core = add(core, dcn_v2(core, layer));
    } else {
      core = z;
      for (const auto& layer : state.dcn) core = add(core, dcn_v2(z, layer));
    }
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::InvalidGeometry) throw;
    fail(ErrorKind::InvalidGeometry, std::string(e.what()) + " (feature map " + std::to_string(h) + "x" + std::to_string(w) +
                                         "; lower dr_scale so the dilated offset predictors fit)");
  }
  Tensor<T> shortcut = add(conv2d(z, state.skip1x1), conv2d(z, state.skip3x3));
  Tensor<T> mixed = gelu(add(core, shortcut));
  return state.up.forward(map_to_tokens(mixed));
}

template <typename T>
Tensor<T> lw_forward(const AdapterState<T>& state, const Tensor<T>& x, std::int64_t h, std::int64_t w, BlockMode mode) {
  if (state.kind() != AdapterKind::LW) fail(ErrorKind::Contract, "lw_forward on a non-LW adapter");
  if (state.reparam.mode() != mode)
    fail(ErrorKind::Contract, std::string("lw_forward: requested ") + to_string(mode) + " mode but the block is in " +
                                  to_string(state.reparam.mode()) + " mode");
  check_tokens(state, x, h, w);
  Tensor<T> z = tokens_to_map(gelu(state.down.forward(x)), h, w);
  Tensor<T> core = gelu(state.reparam.forward(z));
  return state.up.forward(map_to_tokens(core));
}

template <typename T>
Tensor<T> AdapterState<T>::forward(const Tensor<T>& x, std::int64_t h, std::int64_t w) const {
  switch (config.kind) {
    case AdapterKind::Plain:
      check_tokens(*this, x, h, w);
      return up.forward(gelu(down.forward(x)));
    case AdapterKind::HP: return hp_forward(*this, x, h, w);
    case AdapterKind::LW: return lw_forward(*this, x, h, w, reparam.mode());
    case AdapterKind::None: break;
  }
  fail(ErrorKind::Contract, "forward on an adapter of kind none");
}

template <typename T>
void AdapterState<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  down.collect(out, join_name(prefix, "down"));
  up.collect(out, join_name(prefix, "up"));
  for (std::size_t i = 0; i < dcn.size(); ++i) {
    const std::string p = join_name(prefix, "dcn." + std::to_string(i));
    push_param(out, p, "weight", dcn[i].base.weight);
    push_param(out, p, "bias", dcn[i].base.bias);
    push_param(out, p, "offset_conv.weight", dcn[i].offset_conv.weight);
    push_param(out, p, "offset_conv.bias", dcn[i].offset_conv.bias);
    push_param(out, p, "mask_conv.weight", dcn[i].mask_conv.weight);
    push_param(out, p, "mask_conv.bias", dcn[i].mask_conv.bias);
  }
  if (config.kind == AdapterKind::HP) {
    push_param(out, prefix, "skip1x1.weight", skip1x1.weight);
    push_param(out, prefix, "skip1x1.bias", skip1x1.bias);
    push_param(out, prefix, "skip3x3.weight", skip3x3.weight);
    push_param(out, prefix, "skip3x3.bias", skip3x3.bias);
  }
  if (config.kind == AdapterKind::LW) reparam.collect(out, join_name(prefix, "core"));
}

template <typename T>
AdapterState<T> fuse_adapter(const AdapterState<T>& state) {
  if (state.kind() == AdapterKind::HP) fail(ErrorKind::Contract, "HP adapter is not fusable");
  AdapterState<T> out = state;
  if (state.kind() == AdapterKind::LW) out.reparam = fuse_block(state.reparam);
  return out;
}

template <typename T>
TransformerBlock<T> TransformerBlock<T>::make(std::int64_t dim, int heads, std::int64_t mlp_hidden, Rng& rng) {
  TransformerBlock b;
  b.ln1 = LayerNorm<T>::make(dim);
  b.ln2 = LayerNorm<T>::make(dim);
  b.attn = MultiHeadAttention<T>::make(dim, heads, rng);
  b.mlp = Mlp<T>::make(dim, mlp_hidden, rng);
  return b;
}

template <typename T>
Tensor<T> TransformerBlock<T>::forward(const Tensor<T>& x, std::int64_t h, std::int64_t w) const {
  Tensor<T> y = add(x, attn.self_attention(ln1.forward(x)));
  Tensor<T> normed = ln2.forward(y);
  Tensor<T> out = add(y, mlp.forward(normed));
  if (adapter) out = add(out, scale(adapter->forward(normed, h, w), static_cast<T>(adapter_scale)));
  return out;
}

template <typename T>
void TransformerBlock<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  ln1.collect(out, join_name(prefix, "ln1"));
  attn.collect(out, join_name(prefix, "attn"));
  ln2.collect(out, join_name(prefix, "ln2"));
  mlp.collect(out, join_name(prefix, "mlp"));
}

template <typename T>
TransformerBlock<T> insert_parallel(const TransformerBlock<T>& block, AdapterState<T> adapter, double s) {
  if (adapter.config.embed_dim != block.dim())
    fail(ErrorKind::ShapeMismatch, "adapter embed_dim " + std::to_string(adapter.config.embed_dim) + " vs block dim " +
                                       std::to_string(block.dim()));
  TransformerBlock<T> out = block;
  out.adapter = std::move(adapter);
  out.adapter_scale = s;
  return out;
}

#define PFSEG_INSTANTIATE(T)                                                                                   \
  template struct AdapterState<T>;                                                                             \
  template Tensor<T> hp_forward<T>(const AdapterState<T>&, const Tensor<T>&, std::int64_t, std::int64_t);      \
  template Tensor<T> lw_forward<T>(const AdapterState<T>&, const Tensor<T>&, std::int64_t, std::int64_t, BlockMode); \
  template AdapterState<T> fuse_adapter<T>(const AdapterState<T>&);                                            \
  template struct TransformerBlock<T>;                                                                         \
  template TransformerBlock<T> insert_parallel<T>(const TransformerBlock<T>&, AdapterState<T>, double);

PFSEG_INSTANTIATE(float)
PFSEG_INSTANTIATE(double)
#undef PFSEG_INSTANTIATE

}  // namespace pfseg
