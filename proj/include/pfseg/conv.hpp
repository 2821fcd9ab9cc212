#pragma once

#include <optional>
#include <string>

#include "pfseg/tensor.hpp"

namespace pfseg {

struct Pair {
  int y = 1;
  int x = 1;
  bool operator==(const Pair&) const = default;
};

struct ConvGeometry {
  Pair stride{1, 1};
  Pair padding{0, 0};
  Pair dilation{1, 1};
};

/// floor((in + 2 pad - dil (k - 1) - 1) / stride) + 1, or 0 when the window does not fit.
std::int64_t conv_out_size(std::int64_t in, std::int64_t kernel, int stride, int pad, int dilation);

/// Padding that keeps spatial size at stride 1 (kernel must be odd).
Pair same_padding(std::int64_t kh, std::int64_t kw, Pair dilation = {1, 1});

template <typename T>
struct Conv2dParams {
  Tensor<T> weight;  // [C_out, C_in, kH, kW]
  Tensor<T> bias;    // [C_out] or undefined
  ConvGeometry geom;

  std::int64_t out_channels() const { return weight.dim(0); }
  std::int64_t in_channels() const { return weight.dim(1); }
  std::int64_t kh() const { return weight.dim(2); }
  std::int64_t kw() const { return weight.dim(3); }
};

/// Cross-correlation with zero padding. x[N,C_in,H,W] -> [N,C_out,H',W'].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, const ConvGeometry& geom);

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Conv2dParams<T>& p) {
  return conv2d(x, p.weight, p.bias, p.geom);
}

/// Per-channel convolution, stride 1. weight[C,1,kH,kW]. Without an explicit
/// padding the kernel is same-padded, which requires odd kernel sizes.
template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias = {},
                           std::optional<Pair> padding = std::nullopt);

/// Bilinear read of x[C,H,W] at a real coordinate. Neighbors outside the map
/// read as zero; points with py <= -1, py >= H, px <= -1 or px >= W give 0.
/// py and px are single-element tensors and receive gradients.
template <typename T>
Tensor<T> bilinear_sample(const Tensor<T>& x, const Tensor<T>& py, const Tensor<T>& px);

/// Modulated deformable convolution:
///   y(p0) = b + sum_k w_k * m_k(p0) * x(p0 * stride - pad + k * dil + offset_k(p0))
/// offset[N, 2K, H', W'] holds (dy, dx) pairs per kernel tap, tap-major;
/// mask[N, K, H', W'] holds the modulation values (already in [0,1]).
template <typename T>
Tensor<T> deform_conv2d(const Tensor<T>& x, const Tensor<T>& offset, const Tensor<T>& mask, const Tensor<T>& weight,
                        const Tensor<T>& bias, const ConvGeometry& geom);

template <typename T>
struct DCNv2Params {
  Conv2dParams<T> base;         // 3x3, stride 1, pad 1
  Conv2dParams<T> offset_conv;  // C_in -> 2K, dilated by dilation_rate
  Conv2dParams<T> mask_conv;    // C_in -> K, dilated by dilation_rate
  int dilation_rate = 1;

  /// Zero offset/mask weights, zero offset bias, mask bias at +6 so the initial
  /// modulation is sigmoid(6) ~ 0.9975.
  static DCNv2Params init(std::int64_t c_in, std::int64_t c_out, int dilation_rate, Rng& rng, double base_std);
};

/// Test hooks that bypass the learned offset / modulation predictions.
struct DcnOverride {
  bool zero_offsets = false;
  std::optional<double> modulation;  // replaces sigmoid(mask logits) everywhere
};

template <typename T>
Tensor<T> dcn_v2(const Tensor<T>& x, const DCNv2Params<T>& p, const DcnOverride& hooks = {});

/// Bilinear resize of x[N,C,H,W] using half-pixel centers (align_corners off,
/// no antialiasing). Same-size resize is an exact copy.
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& x, std::int64_t out_h, std::int64_t out_w);

template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& x, int factor);

}  // namespace pfseg
