#include "pfseg/posenc.hpp"

namespace pfseg {

const char* to_string(PosEncKind kind) {
  switch (kind) {
    case PosEncKind::None: return "none";
    case PosEncKind::Peg: return "peg";
    case PosEncKind::AbsInterp: return "abs-interp";
  }
  return "none";
}

PosEncKind parse_posenc_kind(const std::string& text) {
  if (text == "none") return PosEncKind::None;
  if (text == "peg") return PosEncKind::Peg;
  if (text == "abs-interp" || text == "abs") return PosEncKind::AbsInterp;
  fail(ErrorKind::Config, "unknown posenc '" + text + "' (expected peg|abs-interp|none)");
}

const char* to_string(PegPlacement placement) {
  return placement == PegPlacement::FirstStage ? "first-stage" : "every-stage";
}

PegPlacement parse_peg_placement(const std::string& text) {
  if (text == "first-stage") return PegPlacement::FirstStage;
  if (text == "every-stage") return PegPlacement::EveryStage;
  fail(ErrorKind::Config, "unknown peg placement '" + text + "' (expected first-stage|every-stage)");
}

template <typename T>
Tensor<T> peg_forward(const Tensor<T>& tokens, std::int64_t h, std::int64_t w, const PEGParams<T>& p) {
  if (tokens.rank() != 3 || tokens.dim(2) != p.dim())
    fail(ErrorKind::ShapeMismatch, "peg_forward expects [N,L," + std::to_string(p.dim()) + "], got " + shape_str(tokens.shape()));
  Tensor<T> map = tokens_to_map(tokens, h, w);
  return add(tokens, map_to_tokens(depthwise_conv2d(map, p.weight, p.bias)));
}

template <typename T>
Tensor<T> interpolate_abs_pe(const AbsPE<T>& pe, std::int64_t h, std::int64_t w) {
  const auto& t = pe.table;
  if (t.rank() != 3) fail(ErrorKind::ShapeMismatch, "absolute PE table must be [D,H0,W0]");
  Tensor<T> resized = resize_bilinear(reshape(t, {1, t.dim(0), t.dim(1), t.dim(2)}), h, w);
  return reshape(resized, {t.dim(0), h, w});
}

#define PFSEG_INSTANTIATE(T)                                                                         \
  template Tensor<T> peg_forward<T>(const Tensor<T>&, std::int64_t, std::int64_t, const PEGParams<T>&); \
  template Tensor<T> interpolate_abs_pe<T>(const AbsPE<T>&, std::int64_t, std::int64_t);

PFSEG_INSTANTIATE(float)
PFSEG_INSTANTIATE(double)
#undef PFSEG_INSTANTIATE

}  // namespace pfseg
