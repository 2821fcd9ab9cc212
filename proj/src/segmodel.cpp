#include "pfseg/segmodel.hpp"

#include <cmath>

namespace pfseg {

void EncoderConfig::validate() const {
  if (patch_size < 1) fail(ErrorKind::Config, "patch_size must be >= 1");
  if (in_channels < 1) fail(ErrorKind::Config, "in_channels must be >= 1");
  if (mlp_ratio < 1) fail(ErrorKind::Config, "mlp_ratio must be >= 1");
  if (stages.empty()) fail(ErrorKind::Config, "encoder needs at least one stage");
  if (stages.front().downsample) fail(ErrorKind::Config, "the first encoder stage cannot downsample");
  for (std::size_t s = 0; s < stages.size(); ++s) {
    const auto& st = stages[s];
    if (st.depth < 1 || st.dim < 1 || st.heads < 1 || st.dim % st.heads != 0)
      fail(ErrorKind::Config, "encoder stage " + std::to_string(s) + ": need depth >= 1 and dim divisible by heads");
    if (s > 0 && st.dim < stages[s - 1].dim) fail(ErrorKind::Config, "encoder stage dims must be nondecreasing");
  }
}

std::vector<std::pair<std::int64_t, std::int64_t>> EncoderConfig::stage_grids(std::int64_t h, std::int64_t w) const {
  std::vector<std::pair<std::int64_t, std::int64_t>> out;
  h /= patch_size;
  w /= patch_size;
  for (const auto& st : stages) {
    if (st.downsample) {
      h /= 2;
      w /= 2;
    }
    out.emplace_back(h, w);
  }
  return out;
}

void ModelConfig::validate() const {
  if (num_classes < 2) fail(ErrorKind::Config, "num_classes must be >= 2");
  encoder.validate();
  if (decoder.dim < 1 || decoder.heads < 1 || decoder.dim % decoder.heads != 0)
    fail(ErrorKind::Config, "decoder dim must be divisible by decoder heads");
  if (decoder.depth < 0 || decoder.mlp_hidden < 1 || decoder.mask_dim < 1)
    fail(ErrorKind::Config, "decoder depth/mlp_hidden/mask_dim out of range");
  if (decoder.lora) {
    if (decoder.lora_rank < 1) fail(ErrorKind::Config, "lora rank must be >= 1");
    if (!(decoder.lora_alpha > 0)) fail(ErrorKind::Config, "lora alpha must be > 0");
    for (const auto& t : decoder.lora_targets)
      if (t != "q" && t != "k" && t != "v" && t != "out" && t != "mlp")
        fail(ErrorKind::Config, "unknown lora target '" + t + "' (expected q|k|v|out|mlp)");
  }
  if (abs_pe_grid < 1) fail(ErrorKind::Config, "abs_pe_grid must be >= 1");
  for (const auto& st : encoder.stages) adapter_for(st.dim).validate();
}

ModelConfig ModelConfig::vanilla() {
  ModelConfig c;
  c.adapter.kind = AdapterKind::None;
  c.posenc = PosEncKind::None;
  c.decoder.lora = false;
  c.tokens_learnable = false;
  c.head_trainable = false;
  return c;
}

AdapterConfig ModelConfig::adapter_for(std::int64_t embed_dim) const {
  AdapterConfig a = adapter;
  a.embed_dim = embed_dim;
  return a;
}

template <typename T>
Tensor<T> ClassHypernetHead<T>::kernels(const Tensor<T>& tokens) const {
  const auto C = fc1_weight.dim(0);
  if (tokens.rank() != 3 || tokens.dim(1) != C || tokens.dim(2) != fc1_weight.dim(2))
    fail(ErrorKind::ShapeMismatch, "hypernet head expects [N," + std::to_string(C) + "," + std::to_string(fc1_weight.dim(2)) +
                                       "], got " + shape_str(tokens.shape()));
  const auto N = tokens.dim(0);
  // per-class weights: move the class axis to the batch axis of bmm
  Tensor<T> h = permute(bmm(permute(tokens, {1, 0, 2}), fc1_weight, true), {1, 0, 2});
  h = gelu(add(h, broadcast_batch(fc1_bias, N)));
  Tensor<T> k = permute(bmm(permute(h, {1, 0, 2}), fc2_weight, true), {1, 0, 2});
  return add(k, broadcast_batch(fc2_bias, N));
}

template <typename T>
Tensor<T> ClassHypernetHead<T>::logits(const Tensor<T>& kernels, const Tensor<T>& features) const {
  if (features.rank() != 4 || features.dim(1) != kernels.dim(2) || features.dim(0) != kernels.dim(0))
    fail(ErrorKind::ShapeMismatch, "mask features " + shape_str(features.shape()) + " vs kernels " + shape_str(kernels.shape()));
  const auto N = features.dim(0), Dm = features.dim(1), H = features.dim(2), W = features.dim(3);
  Tensor<T> flat = bmm(kernels, reshape(features, {N, Dm, H * W}));
  return channel_bias(reshape(flat, {N, kernels.dim(1), H, W}), class_bias);
}

namespace {

template <typename T>
Conv2dParams<T> conv_params(std::int64_t c_in, std::int64_t c_out, std::int64_t k, Rng& rng, int stride, int pad) {
  Conv2dParams<T> p;
  const double bound = std::sqrt(3.0 / static_cast<double>(c_in * k * k));
  p.weight = Tensor<T>::uniform({c_out, c_in, k, k}, rng, -bound, bound);
  p.bias = Tensor<T>::zeros({c_out});
  p.geom.stride = {stride, stride};
  p.geom.padding = {pad, pad};
  return p;
}

void push_conv(auto& out, const std::string& prefix, const auto& conv) {
  push_param(out, prefix, "weight", conv.weight);
  push_param(out, prefix, "bias", conv.bias);
}

template <typename T, typename F>
void for_each_lora_linear(std::vector<TwoWayLayer<T>>& layers, MultiHeadAttention<T>& final_attn, F&& f) {
  auto attn = [&](MultiHeadAttention<T>& a) {
    f(a.q, "q");
    f(a.k, "k");
    f(a.v, "v");
    f(a.out, "out");
  };
  for (auto& layer : layers) {
    attn(layer.self_attn);
    attn(layer.token_to_image);
    f(layer.mlp.fc1, "mlp");
    f(layer.mlp.fc2, "mlp");
    attn(layer.image_to_token);
  }
  attn(final_attn);
}

}  // namespace

template <typename T>
SegModel<T> SegModel<T>::make(const ModelConfig& config) {
  config.validate();
  SegModel m;
  m.config_ = config;
  // One stream per component so the frozen weights do not depend on which
  // add-ons are enabled.
  Rng root(config.seed);
  Rng backbone_rng(root.split()), abs_rng(root.split()), decoder_rng(root.split()), token_rng(root.split()),
      head_rng(root.split()), adapter_rng(root.split()), lora_rng(root.split()), projector_rng(root.split());

  const auto& enc = config.encoder;
  const auto P = enc.patch_size;
  m.patch_embed_ = conv_params<T>(enc.in_channels, enc.stages.front().dim, P, backbone_rng, P, 0);
  std::int64_t prev = enc.stages.front().dim;
  for (std::size_t s = 0; s < enc.stages.size(); ++s) {
    const auto& st = enc.stages[s];
    EncoderStage<T> stage;
    if (st.downsample) stage.downsample = conv_params<T>(prev, st.dim, 2, backbone_rng, 2, 0);
    for (int b = 0; b < st.depth; ++b) {
      auto block = TransformerBlock<T>::make(st.dim, st.heads, st.dim * enc.mlp_ratio, backbone_rng);
      Rng own(adapter_rng.split());
      if (config.adapter.kind != AdapterKind::None) {
        AdapterConfig ac = config.adapter_for(st.dim);
        block = insert_parallel(block, AdapterState<T>::make(ac, own), ac.scale);
      }
      stage.blocks.push_back(std::move(block));
    }
    m.stages_.push_back(std::move(stage));
    prev = st.dim;
  }
  if (config.posenc == PosEncKind::AbsInterp) {
    const auto G = config.abs_pe_grid;
    m.abs_pe_.table = Tensor<T>::normal({enc.stages.front().dim, G, G}, abs_rng, 0.0, config.abs_pe_std);
  }
  if (config.posenc == PosEncKind::Peg) {
    const std::size_t count = config.peg_placement == PegPlacement::FirstStage ? 1 : enc.stages.size();
    for (std::size_t s = 0; s < count; ++s) m.pegs_.push_back(PEGParams<T>::zeros(enc.stages[s].dim));
  }

  const auto& dec = config.decoder;
  const auto Dt = dec.dim;
  m.image_proj_ = Linear<T>::make(enc.stages.back().dim, Dt, decoder_rng);
  for (int i = 0; i < dec.depth; ++i) {
    TwoWayLayer<T> layer;
    layer.self_attn = MultiHeadAttention<T>::make(Dt, dec.heads, decoder_rng);
    layer.token_to_image = MultiHeadAttention<T>::make(Dt, dec.heads, decoder_rng);
    layer.mlp = Mlp<T>::make(Dt, dec.mlp_hidden, decoder_rng);
    layer.image_to_token = MultiHeadAttention<T>::make(Dt, dec.heads, decoder_rng);
    layer.norm1 = LayerNorm<T>::make(Dt);
    layer.norm2 = LayerNorm<T>::make(Dt);
    layer.norm3 = LayerNorm<T>::make(Dt);
    layer.norm4 = LayerNorm<T>::make(Dt);
    m.layers_.push_back(std::move(layer));
  }
  m.final_attn_ = MultiHeadAttention<T>::make(Dt, dec.heads, decoder_rng);
  m.final_norm_ = LayerNorm<T>::make(Dt);
  if (dec.lora) {
    for_each_lora_linear<T>(m.layers_, m.final_attn_, [&](LoRALinear<T>& lin, const char* kind) {
      Rng own(lora_rng.split());
      for (const auto& target : dec.lora_targets)
        if (target == kind) {
          lin.lora = LoRAParams<T>::make(lin.base.in_features(), lin.base.out_features(), dec.lora_rank, dec.lora_alpha, own);
          break;
        }
    });
  }

  const auto D0 = enc.stages.front().dim, Dm = dec.mask_dim;
  m.proj_conv1_ = conv_params<T>(D0, Dm, 1, projector_rng, 1, 0);
  m.proj_conv2_ = conv_params<T>(Dm, Dm, 3, projector_rng, 1, 1);

  const auto C = config.num_classes;
  m.tokens_ = Tensor<T>::normal({C, Dt}, token_rng, 0.0, 1.0);
  const double b1 = std::sqrt(3.0 / static_cast<double>(Dt));
  m.head_.fc1_weight = Tensor<T>::uniform({C, Dt, Dt}, head_rng, -b1, b1);
  m.head_.fc1_bias = Tensor<T>::zeros({C, Dt});
  m.head_.fc2_weight = Tensor<T>::uniform({C, Dm, Dt}, head_rng, -b1, b1);
  m.head_.fc2_bias = Tensor<T>::zeros({C, Dm});
  m.head_.class_bias = Tensor<T>::zeros({C});
  return m;
}

template <typename T>
Features<T> SegModel<T>::encoder_forward(const Tensor<T>& image) const {
  const auto& enc = config_.encoder;
  if (image.rank() != 4 || image.dim(1) != enc.in_channels)
    fail(ErrorKind::ShapeMismatch, "image must be [N," + std::to_string(enc.in_channels) + ",H,W], got " + shape_str(image.shape()));
  const auto H = image.dim(2), W = image.dim(3);
  if (H % enc.patch_size != 0 || W % enc.patch_size != 0)
    fail(ErrorKind::InvalidGeometry, "image size " + std::to_string(H) + "x" + std::to_string(W) + " is not divisible by patch size " +
                                      std::to_string(enc.patch_size));
  for (const auto& [gh, gw] : enc.stage_grids(H, W))
    if (gh < 1 || gw < 1)
      fail(ErrorKind::InvalidGeometry, "image size " + std::to_string(H) + "x" + std::to_string(W) + " is too small for the encoder");

  const auto N = image.dim(0);
  Tensor<T> map = conv2d(image, patch_embed_);
  std::int64_t h = map.dim(2), w = map.dim(3);
  Tensor<T> x = map_to_tokens(map);
  if (config_.posenc == PosEncKind::AbsInterp) {
    Tensor<T> pe = interpolate_abs_pe(abs_pe_, h, w);
    pe = reshape(map_to_tokens(reshape(pe, {1, pe.dim(0), h, w})), {h * w, pe.dim(0)});
    x = add(x, broadcast_batch(pe, N));
  }
  Features<T> out;
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    const auto& stage = stages_[s];
    if (stage.downsample) {
      Tensor<T> down = conv2d(tokens_to_map(x, h, w), *stage.downsample);
      h = down.dim(2);
      w = down.dim(3);
      x = map_to_tokens(down);
    }
    for (std::size_t b = 0; b < stage.blocks.size(); ++b) {
      x = stage.blocks[b].forward(x, h, w);
      if (b == 0 && s < pegs_.size()) x = peg_forward(x, h, w, pegs_[s]);
    }
    out.maps.push_back(tokens_to_map(x, h, w));
  }
  return out;
}

template <typename T>
Tensor<T> SegModel<T>::mask_features(const Tensor<T>& stage0) const {
  Tensor<T> f = gelu(conv2d(stage0, proj_conv1_));
  return conv2d(upsample_nearest(f, 2), proj_conv2_);
}

template <typename T>
Tensor<T> SegModel<T>::decoder_forward(const Features<T>& features) const {
  if (features.maps.size() != stages_.size()) fail(ErrorKind::Contract, "decoder needs one feature map per encoder stage");
  const auto N = features.maps.front().dim(0);
  Tensor<T> img = image_proj_.forward(map_to_tokens(features.maps.back()));
  Tensor<T> t = broadcast_batch(tokens_, N);
  for (const auto& layer : layers_) {
    t = layer.norm1.forward(add(t, layer.self_attn.self_attention(t)));
    t = layer.norm2.forward(add(t, layer.token_to_image.forward(t, img, img)));
    t = layer.norm3.forward(add(t, layer.mlp.forward(t)));
    img = layer.norm4.forward(add(img, layer.image_to_token.forward(img, t, t)));
  }
  t = final_norm_.forward(add(t, final_attn_.forward(t, img, img)));
  return head_.logits(head_.kernels(t), mask_features(features.maps.front()));
}

template <typename T>
Tensor<T> SegModel<T>::forward(const Tensor<T>& image) const {
  Tensor<T> low = decoder_forward(encoder_forward(image));
  return resize_bilinear(low, image.dim(2), image.dim(3));
}

template <typename T>
ParamList<T> SegModel<T>::parameters() const {
  ParamList<T> out;
  push_conv(out, "encoder.patch_embed", patch_embed_);
  if (abs_pe_.table.defined()) push_param(out, "encoder", "abs_pe", abs_pe_.table);
  int block_index = 0;
  std::vector<std::pair<int, const AdapterState<T>*>> adapters;
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    const std::string sp = "encoder.stages." + std::to_string(s);
    if (stages_[s].downsample) push_conv(out, sp + ".downsample", *stages_[s].downsample);
    for (std::size_t b = 0; b < stages_[s].blocks.size(); ++b) {
      const auto& block = stages_[s].blocks[b];
      block.collect(out, sp + ".blocks." + std::to_string(b));
      if (block.adapter) adapters.emplace_back(block_index, &*block.adapter);
      ++block_index;
    }
  }
  for (const auto& [idx, a] : adapters) a->collect(out, "adapter." + std::to_string(idx));
  for (std::size_t s = 0; s < pegs_.size(); ++s) pegs_[s].collect(out, "peg." + std::to_string(s));
  image_proj_.collect(out, "decoder.image_proj");
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const std::string lp = "decoder.layers." + std::to_string(i);
    const auto& l = layers_[i];
    l.self_attn.collect(out, lp + ".self_attn");
    l.norm1.collect(out, lp + ".norm1");
    l.token_to_image.collect(out, lp + ".token_to_image");
    l.norm2.collect(out, lp + ".norm2");
    l.mlp.collect(out, lp + ".mlp");
    l.norm3.collect(out, lp + ".norm3");
    l.image_to_token.collect(out, lp + ".image_to_token");
    l.norm4.collect(out, lp + ".norm4");
  }
  final_attn_.collect(out, "decoder.final_attn");
  final_norm_.collect(out, "decoder.final_norm");
  push_conv(out, "decoder.projector.conv1", proj_conv1_);
  push_conv(out, "decoder.projector.conv2", proj_conv2_);
  push_param(out, "", "tokens", tokens_);
  push_param(out, "head.hypernet", "fc1.weight", head_.fc1_weight);
  push_param(out, "head.hypernet", "fc1.bias", head_.fc1_bias);
  push_param(out, "head.hypernet", "fc2.weight", head_.fc2_weight);
  push_param(out, "head.hypernet", "fc2.bias", head_.fc2_bias);
  push_param(out, "head", "class_bias", head_.class_bias);
  return out;
}

template <typename T>
std::vector<const AdapterState<T>*> SegModel<T>::adapters() const {
  std::vector<const AdapterState<T>*> out;
  for (const auto& stage : stages_)
    for (const auto& block : stage.blocks)
      if (block.adapter) out.push_back(&*block.adapter);
  return out;
}

template <typename T>
SegModel<T> SegModel<T>::fused() const {
  SegModel out = *this;
  for (auto& stage : out.stages_)
    for (auto& block : stage.blocks)
      if (block.adapter && block.adapter->kind() == AdapterKind::LW) block.adapter = fuse_adapter(*block.adapter);
  return out;
}

template <typename T>
SegModel<T> SegModel<T>::lora_merged() const {
  SegModel out = *this;
  for_each_lora_linear<T>(out.layers_, out.final_attn_, [](LoRALinear<T>& lin, const char*) { lin.merge(); });
  return out;
}

template <typename T>
bool SegModel<T>::is_deployed() const {
  for (const auto* a : adapters())
    if (a->kind() == AdapterKind::LW && a->reparam.mode() != BlockMode::Deploy) return false;
  bool has_lora = false;
  auto& self = const_cast<SegModel&>(*this);
  for_each_lora_linear<T>(self.layers_, self.final_attn_, [&](LoRALinear<T>& lin, const char*) { has_lora |= lin.lora.has_value(); });
  return !has_lora;
}

namespace {

bool starts_with(const std::string& s, const char* prefix) { return s.rfind(prefix, 0) == 0; }

}  // namespace

ParamRole classify_parameter(const std::string& name, const ModelConfig& config) {
  if (name.ends_with(".lora_A") || name.ends_with(".lora_B")) return ParamRole::Learnable;
  if (starts_with(name, "adapter.") || starts_with(name, "peg.")) return ParamRole::Learnable;
  if (starts_with(name, "head.")) return config.head_trainable ? ParamRole::Learnable : ParamRole::Frozen;
  if (name == "tokens") return config.tokens_learnable ? ParamRole::Learnable : ParamRole::Frozen;
  if (starts_with(name, "encoder.") || starts_with(name, "decoder.")) return ParamRole::Frozen;
  fail(ErrorKind::Contract, "parameter '" + name + "' is neither frozen nor learnable");
}

template <typename T>
Partition freeze_partition(SegModel<T>& model) {
  Partition p;
  for (auto& [name, tensor] : model.parameters()) {
    const bool learn = classify_parameter(name, model.config()) == ParamRole::Learnable;
    auto t = tensor;
    t.set_requires_grad(learn);
    (learn ? p.learnable : p.frozen).push_back(name);
  }
  return p;
}

#define PFSEG_INSTANTIATE(T)          \
  template struct ClassHypernetHead<T>; \
  template class SegModel<T>;         \
  template Partition freeze_partition<T>(SegModel<T>&);

PFSEG_INSTANTIATE(float)
PFSEG_INSTANTIATE(double)
#undef PFSEG_INSTANTIATE

}  // namespace pfseg
