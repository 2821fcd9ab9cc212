#pragma once

// Toy prompt-free segmentation model.
//
//   image -> frozen hierarchical encoder (+ adapters, + PEG or absolute PE)
//         -> frozen two-way transformer decoder with LoRA on q/v/MLP linears,
//            driven by C constant class tokens (no prompt input exists)
//         -> per-class hypernetwork turns token c into a kernel k_c
//         -> logit_c(p) = <k_c, F(p)> + b_c, F = frozen upsampling projector
//            over the highest-resolution encoder stage
//
// Parameter names are stable checkpoint keys; freeze_partition classifies each
// one as frozen or learnable by its name.

#include <map>
#include <string>
#include <vector>

#include "pfseg/adapters.hpp"
#include "pfseg/posenc.hpp"

namespace pfseg {

struct StageConfig {
  int depth = 2;
  std::int64_t dim = 32;
  bool downsample = false;
  int heads = 2;
};

struct EncoderConfig {
  int patch_size = 4;
  int in_channels = 3;
  int mlp_ratio = 4;
  std::vector<StageConfig> stages{{2, 32, false, 2}, {2, 64, true, 4}};

  void validate() const;
  /// Token grid of every stage for an H x W image.
  std::vector<std::pair<std::int64_t, std::int64_t>> stage_grids(std::int64_t h, std::int64_t w) const;
};

struct DecoderConfig {
  std::int64_t dim = 32;
  int depth = 2;
  int heads = 2;
  std::int64_t mlp_hidden = 64;
  std::int64_t mask_dim = 16;
  bool lora = true;
  int lora_rank = 4;
  double lora_alpha = 8.0;
  std::vector<std::string> lora_targets{"q", "v", "mlp"};
};

struct ModelConfig {
  int num_classes = 3;
  std::uint64_t seed = 0;
  EncoderConfig encoder;
  DecoderConfig decoder;
  // embed_dim is filled per stage; dilation rates are scaled down for toy maps
  AdapterConfig adapter = [] {
    AdapterConfig a;
    a.dr_scale = 0.25;
    return a;
  }();
  PosEncKind posenc = PosEncKind::Peg;
  PegPlacement peg_placement = PegPlacement::FirstStage;
  int abs_pe_grid = 32;  // table resolution (tokens per side) of the absolute PE
  double abs_pe_std = 0.5;
  bool tokens_learnable = true;
  bool head_trainable = true;

  void validate() const;
  /// Frozen model without any trainable additions.
  static ModelConfig vanilla();
  /// Adapter config for a stage of the given width.
  AdapterConfig adapter_for(std::int64_t embed_dim) const;
};

enum class ParamRole { Frozen, Learnable };

template <typename T>
struct EncoderStage {
  std::optional<Conv2dParams<T>> downsample;  // 2x2 stride-2 patch merge
  std::vector<TransformerBlock<T>> blocks;
};

template <typename T>
struct TwoWayLayer {
  MultiHeadAttention<T> self_attn;
  MultiHeadAttention<T> token_to_image;
  Mlp<T> mlp;
  MultiHeadAttention<T> image_to_token;
  LayerNorm<T> norm1, norm2, norm3, norm4;
};

template <typename T>
struct ClassHypernetHead {
  Tensor<T> fc1_weight;  // [C, D_tok, D_tok]
  Tensor<T> fc1_bias;    // [C, D_tok]
  Tensor<T> fc2_weight;  // [C, D_mask, D_tok]
  Tensor<T> fc2_bias;    // [C, D_mask]
  Tensor<T> class_bias;  // [C]

  /// tokens[N,C,D_tok] -> kernels[N,C,D_mask]
  Tensor<T> kernels(const Tensor<T>& tokens) const;
  /// kernels[N,C,Dm] . features[N,Dm,Hm,Wm] + class_bias -> [N,C,Hm,Wm]
  Tensor<T> logits(const Tensor<T>& kernels, const Tensor<T>& mask_features) const;
};

template <typename T>
struct Features {
  std::vector<Tensor<T>> maps;  // per stage, [N, D_s, h_s, w_s]
};

template <typename T>
class SegModel {
 public:
  static SegModel make(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }

  Features<T> encoder_forward(const Tensor<T>& image) const;
  /// Mask logits at half input resolution, [N, C, H/2, W/2].
  Tensor<T> decoder_forward(const Features<T>& features) const;
  /// Mask logits upsampled to the input resolution, [N, C, H, W].
  Tensor<T> forward(const Tensor<T>& image) const;
  Tensor<T> mask_features(const Tensor<T>& stage0) const;

  /// All parameters with their checkpoint names, in a stable order.
  ParamList<T> parameters() const;
  /// Copy with LW adapters fused. Shares every other tensor.
  SegModel fused() const;
  /// Copy with LoRA deltas merged into the decoder linears.
  SegModel lora_merged() const;
  bool is_deployed() const;

  // Component access for tests and analysis.
  std::vector<EncoderStage<T>>& stages() { return stages_; }
  const std::vector<EncoderStage<T>>& stages() const { return stages_; }
  std::vector<PEGParams<T>>& pegs() { return pegs_; }
  std::vector<TwoWayLayer<T>>& decoder_layers() { return layers_; }
  const std::vector<TwoWayLayer<T>>& decoder_layers() const { return layers_; }
  ClassHypernetHead<T>& head() { return head_; }
  const ClassHypernetHead<T>& head() const { return head_; }
  const Tensor<T>& class_tokens() const { return tokens_; }
  std::vector<const AdapterState<T>*> adapters() const;

 private:
  ModelConfig config_;
  Conv2dParams<T> patch_embed_;
  AbsPE<T> abs_pe_;
  std::vector<EncoderStage<T>> stages_;
  std::vector<PEGParams<T>> pegs_;
  Linear<T> image_proj_;
  std::vector<TwoWayLayer<T>> layers_;
  MultiHeadAttention<T> final_attn_;
  LayerNorm<T> final_norm_;
  Conv2dParams<T> proj_conv1_;
  Conv2dParams<T> proj_conv2_;
  Tensor<T> tokens_;
  ClassHypernetHead<T> head_;
};

struct Partition {
  std::vector<std::string> frozen;
  std::vector<std::string> learnable;
};

/// Role of a parameter by name; throws a contract error for unknown names.
ParamRole classify_parameter(const std::string& name, const ModelConfig& config);

/// Classifies every parameter, sets requires_grad accordingly and returns the
/// two name sets (which partition all parameters).
template <typename T>
Partition freeze_partition(SegModel<T>& model);

}  // namespace pfseg
