#pragma once

// Positional signals for the encoder.
//
// PEG: tokens + depthwise3x3(tokens as a map). Being a convolution it works at
// any H x W and is translation-covariant away from the zero-padded border.
// AbsPE: a fixed table learned at one resolution and bilinearly resized to the
// token grid at run time; this is the baseline PEG replaces.

#include <string>

#include "pfseg/conv.hpp"
#include "pfseg/layers.hpp"

namespace pfseg {

enum class PosEncKind { None, Peg, AbsInterp };
enum class PegPlacement { FirstStage, EveryStage };

const char* to_string(PosEncKind kind);
PosEncKind parse_posenc_kind(const std::string& text);
const char* to_string(PegPlacement placement);
PegPlacement parse_peg_placement(const std::string& text);

template <typename T>
struct PEGParams {
  Tensor<T> weight;  // [D,1,3,3]
  Tensor<T> bias;    // [D]

  static PEGParams zeros(std::int64_t dim) { return {Tensor<T>::zeros({dim, 1, 3, 3}), Tensor<T>::zeros({dim})}; }
  std::int64_t dim() const { return weight.dim(0); }
  void collect(ParamList<T>& out, const std::string& prefix) const {
    push_param(out, prefix, "weight", weight);
    push_param(out, prefix, "bias", bias);
  }
};

template <typename T>
Tensor<T> peg_forward(const Tensor<T>& tokens, std::int64_t h, std::int64_t w, const PEGParams<T>& p);

template <typename T>
struct AbsPE {
  Tensor<T> table;  // [D, H0, W0]
};

/// Bilinear (half-pixel, no antialias) resize of the table to [D, H, W].
template <typename T>
Tensor<T> interpolate_abs_pe(const AbsPE<T>& pe, std::int64_t h, std::int64_t w);

}  // namespace pfseg
