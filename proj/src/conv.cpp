#include "pfseg/conv.hpp"

#include <Eigen/Core>
#include <cmath>

#include "pfseg/detail/op_builder.hpp"

namespace pfseg {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapC = Eigen::Map<const RowMat<T>>;
template <typename T>
using MapM = Eigen::Map<RowMat<T>>;

struct ConvDims {
  std::int64_t n, c_in, h, w, c_out, kh, kw, ho, wo;
  std::int64_t k() const { return kh * kw; }
  std::int64_t rows() const { return c_in * kh * kw; }
  std::int64_t pixels() const { return ho * wo; }
};

template <typename T>
ConvDims check_conv(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, const ConvGeometry& g,
                    const char* op) {
  if (x.rank() != 4) fail(ErrorKind::ShapeMismatch, std::string(op) + ": input must be [N,C,H,W], got " + shape_str(x.shape()));
  if (weight.rank() != 4) fail(ErrorKind::ShapeMismatch, std::string(op) + ": weight must be [C_out,C_in,kH,kW]");
  if (x.dim(1) != weight.dim(1))
    fail(ErrorKind::ShapeMismatch, std::string(op) + ": input channels " + std::to_string(x.dim(1)) +
                                       " vs weight " + shape_str(weight.shape()));
  if (bias.defined() && bias.numel() != weight.dim(0)) fail(ErrorKind::ShapeMismatch, std::string(op) + ": bias size");
  if (g.stride.y < 1 || g.stride.x < 1 || g.dilation.y < 1 || g.dilation.x < 1 || g.padding.y < 0 || g.padding.x < 0)
    fail(ErrorKind::InvalidGeometry, std::string(op) + ": stride/dilation must be >= 1 and padding >= 0");
  ConvDims d{x.dim(0), x.dim(1), x.dim(2), x.dim(3), weight.dim(0), weight.dim(2), weight.dim(3), 0, 0};
  d.ho = conv_out_size(d.h, d.kh, g.stride.y, g.padding.y, g.dilation.y);
  d.wo = conv_out_size(d.w, d.kw, g.stride.x, g.padding.x, g.dilation.x);
  if (d.ho < 1 || d.wo < 1)
    fail(ErrorKind::InvalidGeometry, std::string(op) + ": output would be " + std::to_string(d.ho) + "x" +
                                         std::to_string(d.wo) + " for input " + shape_str(x.shape()));
  return d;
}

template <typename T>
void im2col(const T* img, const ConvDims& d, const ConvGeometry& g, T* cols) {
  for (std::int64_t c = 0; c < d.c_in; ++c)
    for (std::int64_t i = 0; i < d.kh; ++i)
      for (std::int64_t j = 0; j < d.kw; ++j) {
        T* row = cols + ((c * d.kh + i) * d.kw + j) * d.pixels();
        const T* plane = img + c * d.h * d.w;
        for (std::int64_t oy = 0; oy < d.ho; ++oy) {
          const std::int64_t iy = oy * g.stride.y - g.padding.y + i * g.dilation.y;
          T* out = row + oy * d.wo;
          if (iy < 0 || iy >= d.h) {
            std::fill(out, out + d.wo, T(0));
            continue;
          }
          for (std::int64_t ox = 0; ox < d.wo; ++ox) {
            const std::int64_t ix = ox * g.stride.x - g.padding.x + j * g.dilation.x;
            out[ox] = (ix >= 0 && ix < d.w) ? plane[iy * d.w + ix] : T(0);
          }
        }
      }
}

template <typename T>
void col2im_add(const T* cols, const ConvDims& d, const ConvGeometry& g, T* img) {
  for (std::int64_t c = 0; c < d.c_in; ++c)
    for (std::int64_t i = 0; i < d.kh; ++i)
      for (std::int64_t j = 0; j < d.kw; ++j) {
        const T* row = cols + ((c * d.kh + i) * d.kw + j) * d.pixels();
        T* plane = img + c * d.h * d.w;
        for (std::int64_t oy = 0; oy < d.ho; ++oy) {
          const std::int64_t iy = oy * g.stride.y - g.padding.y + i * g.dilation.y;
          if (iy < 0 || iy >= d.h) continue;
          for (std::int64_t ox = 0; ox < d.wo; ++ox) {
            const std::int64_t ix = ox * g.stride.x - g.padding.x + j * g.dilation.x;
            if (ix >= 0 && ix < d.w) plane[iy * d.w + ix] += row[oy * d.wo + ox];
          }
        }
      }
}

// Four-neighbor bilinear read with zero padding.
template <typename T>
T bilinear_value(const T* img, std::int64_t h, std::int64_t w, T py, T px) {
  if (py <= T(-1) || py >= T(h) || px <= T(-1) || px >= T(w)) return T(0);
  const T fy = std::floor(py), fx = std::floor(px);
  const auto y0 = static_cast<std::int64_t>(fy), x0 = static_cast<std::int64_t>(fx);
  const T ly = py - fy, lx = px - fx, hy = T(1) - ly, hx = T(1) - lx;
  auto at = [&](std::int64_t y, std::int64_t x) { return (y >= 0 && y < h && x >= 0 && x < w) ? img[y * w + x] : T(0); };
  return hy * hx * at(y0, x0) + hy * lx * at(y0, x0 + 1) + ly * hx * at(y0 + 1, x0) + ly * lx * at(y0 + 1, x0 + 1);
}

// Backward of bilinear_value: scatters g into dimg (if non-null) and returns
// d value / d(py, px). At integer coordinates this is the one-sided difference
// toward the (y0+1, x0+1) neighbors implied by floor().
template <typename T>
std::pair<T, T> bilinear_backward(const T* img, std::int64_t h, std::int64_t w, T py, T px, T g, T* dimg) {
  if (py <= T(-1) || py >= T(h) || px <= T(-1) || px >= T(w)) return {T(0), T(0)};
  const T fy = std::floor(py), fx = std::floor(px);
  const auto y0 = static_cast<std::int64_t>(fy), x0 = static_cast<std::int64_t>(fx);
  const T ly = py - fy, lx = px - fx, hy = T(1) - ly, hx = T(1) - lx;
  auto inside = [&](std::int64_t y, std::int64_t x) { return y >= 0 && y < h && x >= 0 && x < w; };
  const T v00 = inside(y0, x0) ? img[y0 * w + x0] : T(0);
  const T v01 = inside(y0, x0 + 1) ? img[y0 * w + x0 + 1] : T(0);
  const T v10 = inside(y0 + 1, x0) ? img[(y0 + 1) * w + x0] : T(0);
  const T v11 = inside(y0 + 1, x0 + 1) ? img[(y0 + 1) * w + x0 + 1] : T(0);
  if (dimg) {
    if (inside(y0, x0)) dimg[y0 * w + x0] += g * hy * hx;
    if (inside(y0, x0 + 1)) dimg[y0 * w + x0 + 1] += g * hy * lx;
    if (inside(y0 + 1, x0)) dimg[(y0 + 1) * w + x0] += g * ly * hx;
    if (inside(y0 + 1, x0 + 1)) dimg[(y0 + 1) * w + x0 + 1] += g * ly * lx;
  }
  const T dpy = hx * (v10 - v00) + lx * (v11 - v01);
  const T dpx = hy * (v01 - v00) + ly * (v11 - v10);
  return {g * dpy, g * dpx};
}

}  // namespace

std::int64_t conv_out_size(std::int64_t in, std::int64_t kernel, int stride, int pad, int dilation) {
  const std::int64_t span = in + 2 * pad - static_cast<std::int64_t>(dilation) * (kernel - 1) - 1;
  if (span < 0) return 0;
  return span / stride + 1;
}

Pair same_padding(std::int64_t kh, std::int64_t kw, Pair dilation) {
  if (kh % 2 == 0 || kw % 2 == 0)
    fail(ErrorKind::InvalidGeometry, "same padding needs odd kernel sizes, got " + std::to_string(kh) + "x" + std::to_string(kw));
  return {static_cast<int>(dilation.y * (kh - 1) / 2), static_cast<int>(dilation.x * (kw - 1) / 2)};
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, const ConvGeometry& geom) {
  const ConvDims d = check_conv(x, weight, bias, geom, "conv2d");
  const auto rows = d.rows(), P = d.pixels();
  std::vector<T> cols(static_cast<std::size_t>(d.n * rows * P));
  std::vector<T> out(static_cast<std::size_t>(d.n * d.c_out * P));
  MapC<T> W(weight.data().data(), d.c_out, rows);
  for (std::int64_t n = 0; n < d.n; ++n) {
    T* col = cols.data() + n * rows * P;
    im2col(x.data().data() + n * d.c_in * d.h * d.w, d, geom, col);
    MapM<T> Y(out.data() + n * d.c_out * P, d.c_out, P);
    Y.noalias() = W * MapC<T>(col, rows, P);
    if (bias.defined()) {
      Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> b(bias.data().data(), d.c_out);
      Y.colwise() += b;
    }
  }
  return detail::make_result<T>({d.n, d.c_out, d.ho, d.wo}, std::move(out), "conv2d", {&x, &weight, &bias},
                                [d, geom, cols = std::move(cols)](detail::Node<T>& self) {
    const auto rows = d.rows(), P = d.pixels();
    const bool need_x = detail::wants_grad(self, 0), need_w = detail::wants_grad(self, 1),
               need_b = detail::wants_grad(self, 2);
    auto gx = detail::input_grad(self, 0);
    auto gw = detail::input_grad(self, 1);
    auto gb = detail::input_grad(self, 2);
    MapC<T> W(self.inputs[1]->data.data(), d.c_out, rows);
    std::vector<T> dcol(need_x ? static_cast<std::size_t>(rows * P) : 0);
    for (std::int64_t n = 0; n < d.n; ++n) {
      MapC<T> dY(self.grad.data() + n * d.c_out * P, d.c_out, P);
      if (need_w) MapM<T>(gw.data(), d.c_out, rows).noalias() += dY * MapC<T>(cols.data() + n * rows * P, rows, P).transpose();
      if (need_b) Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(gb.data(), d.c_out) += dY.rowwise().sum();
      if (need_x) {
        MapM<T>(dcol.data(), rows, P).noalias() = W.transpose() * dY;
        col2im_add(dcol.data(), d, geom, gx.data() + n * d.c_in * d.h * d.w);
      }
    }
  });
}

template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, std::optional<Pair> padding) {
  if (x.rank() != 4) fail(ErrorKind::ShapeMismatch, "depthwise_conv2d: input must be [N,C,H,W]");
  if (weight.rank() != 4 || weight.dim(0) != x.dim(1) || weight.dim(1) != 1)
    fail(ErrorKind::ShapeMismatch, "depthwise_conv2d: weight must be [C,1,kH,kW] with C = " + std::to_string(x.dim(1)) +
                                       ", got " + shape_str(weight.shape()));
  if (bias.defined() && bias.numel() != x.dim(1)) fail(ErrorKind::ShapeMismatch, "depthwise_conv2d: bias size");
  const Pair pad = padding ? *padding : same_padding(weight.dim(2), weight.dim(3));
  const auto N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), KH = weight.dim(2), KW = weight.dim(3);
  const auto Ho = conv_out_size(H, KH, 1, pad.y, 1), Wo = conv_out_size(W, KW, 1, pad.x, 1);
  if (Ho < 1 || Wo < 1) fail(ErrorKind::InvalidGeometry, "depthwise_conv2d: empty output");
  auto X = x.data();
  auto K = weight.data();
  std::vector<T> out(static_cast<std::size_t>(N * C * Ho * Wo), T(0));
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t c = 0; c < C; ++c) {
      const T* in = X.data() + (n * C + c) * H * W;
      const T* k = K.data() + c * KH * KW;
      T* o = out.data() + (n * C + c) * Ho * Wo;
      const T b = bias.defined() ? bias.data()[static_cast<std::size_t>(c)] : T(0);
      for (std::int64_t oy = 0; oy < Ho; ++oy)
        for (std::int64_t ox = 0; ox < Wo; ++ox) {
          T acc = b;
          for (std::int64_t i = 0; i < KH; ++i) {
            const auto iy = oy - pad.y + i;
            if (iy < 0 || iy >= H) continue;
            for (std::int64_t j = 0; j < KW; ++j) {
              const auto ix = ox - pad.x + j;
              if (ix >= 0 && ix < W) acc += k[i * KW + j] * in[iy * W + ix];
            }
          }
          o[oy * Wo + ox] = acc;
        }
    }
  return detail::make_result<T>({N, C, Ho, Wo}, std::move(out), "depthwise_conv2d", {&x, &weight, &bias},
                                [=](detail::Node<T>& self) {
    auto gx = detail::input_grad(self, 0);
    auto gw = detail::input_grad(self, 1);
    auto gb = detail::input_grad(self, 2);
    const auto& Xd = self.inputs[0]->data;
    const auto& Kd = self.inputs[1]->data;
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t c = 0; c < C; ++c) {
        const T* g = self.grad.data() + (n * C + c) * Ho * Wo;
        const T* in = Xd.data() + (n * C + c) * H * W;
        const T* k = Kd.data() + c * KH * KW;
        for (std::int64_t oy = 0; oy < Ho; ++oy)
          for (std::int64_t ox = 0; ox < Wo; ++ox) {
            const T go = g[oy * Wo + ox];
            if (!gb.empty()) gb[static_cast<std::size_t>(c)] += go;
            for (std::int64_t i = 0; i < KH; ++i) {
              const auto iy = oy - pad.y + i;
              if (iy < 0 || iy >= H) continue;
              for (std::int64_t j = 0; j < KW; ++j) {
                const auto ix = ox - pad.x + j;
                if (ix < 0 || ix >= W) continue;
                if (!gw.empty()) gw[static_cast<std::size_t>(c * KH * KW + i * KW + j)] += go * in[iy * W + ix];
                if (!gx.empty()) gx[static_cast<std::size_t>((n * C + c) * H * W + iy * W + ix)] += go * k[i * KW + j];
              }
            }
          }
      }
  });
}

template <typename T>
Tensor<T> bilinear_sample(const Tensor<T>& x, const Tensor<T>& py, const Tensor<T>& px) {
  if (x.rank() != 3) fail(ErrorKind::ShapeMismatch, "bilinear_sample: x must be [C,H,W]");
  if (py.numel() != 1 || px.numel() != 1) fail(ErrorKind::ShapeMismatch, "bilinear_sample: coordinates must be scalars");
  const auto C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const T y = py.item(), xx = px.item();
  std::vector<T> out(static_cast<std::size_t>(C));
  for (std::int64_t c = 0; c < C; ++c) out[static_cast<std::size_t>(c)] = bilinear_value(x.data().data() + c * H * W, H, W, y, xx);
  return detail::make_result<T>({C}, std::move(out), "bilinear_sample", {&x, &py, &px},
                                [C, H, W, y, xx](detail::Node<T>& self) {
    auto gx = detail::input_grad(self, 0);
    auto gy = detail::input_grad(self, 1);
    auto gxx = detail::input_grad(self, 2);
    for (std::int64_t c = 0; c < C; ++c) {
      auto [dy, dx] = bilinear_backward(self.inputs[0]->data.data() + c * H * W, H, W, y, xx,
                                        self.grad[static_cast<std::size_t>(c)], gx.empty() ? nullptr : gx.data() + c * H * W);
      if (!gy.empty()) gy[0] += dy;
      if (!gxx.empty()) gxx[0] += dx;
    }
  });
}

template <typename T>
Tensor<T> deform_conv2d(const Tensor<T>& x, const Tensor<T>& offset, const Tensor<T>& mask, const Tensor<T>& weight,
                        const Tensor<T>& bias, const ConvGeometry& geom) {
  const ConvDims d = check_conv(x, weight, bias, geom, "deform_conv2d");
  const auto K = d.k(), P = d.pixels(), rows = d.rows();
  if (offset.shape() != Shape{d.n, 2 * K, d.ho, d.wo})
    fail(ErrorKind::ShapeMismatch, "deform_conv2d: offset must be " + shape_str({d.n, 2 * K, d.ho, d.wo}) + ", got " +
                                       shape_str(offset.shape()));
  if (mask.shape() != Shape{d.n, K, d.ho, d.wo})
    fail(ErrorKind::ShapeMismatch, "deform_conv2d: mask must be " + shape_str({d.n, K, d.ho, d.wo}) + ", got " +
                                       shape_str(mask.shape()));
  // samples[n][(c*K + k) * P + p] holds the unmodulated bilinear read.
  std::vector<T> samples(static_cast<std::size_t>(d.n * rows * P));
  std::vector<T> cols(static_cast<std::size_t>(rows * P));
  std::vector<T> out(static_cast<std::size_t>(d.n * d.c_out * P));
  MapC<T> Wm(weight.data().data(), d.c_out, rows);
  const T* Xd = x.data().data();
  const T* Od = offset.data().data();
  const T* Md = mask.data().data();
  for (std::int64_t n = 0; n < d.n; ++n) {
    T* smp = samples.data() + n * rows * P;
    for (std::int64_t c = 0; c < d.c_in; ++c) {
      const T* plane = Xd + (n * d.c_in + c) * d.h * d.w;
      for (std::int64_t k = 0; k < K; ++k) {
        const std::int64_t ki = k / d.kw, kj = k % d.kw;
        const T* dy = Od + ((n * 2 * K) + 2 * k) * P;
        const T* dx = Od + ((n * 2 * K) + 2 * k + 1) * P;
        const T* m = Md + (n * K + k) * P;
        T* srow = smp + (c * K + k) * P;
        T* crow = cols.data() + (c * K + k) * P;
        for (std::int64_t oy = 0; oy < d.ho; ++oy)
          for (std::int64_t ox = 0; ox < d.wo; ++ox) {
            const auto p = oy * d.wo + ox;
            const T py = T(oy * geom.stride.y - geom.padding.y + ki * geom.dilation.y) + dy[p];
            const T px = T(ox * geom.stride.x - geom.padding.x + kj * geom.dilation.x) + dx[p];
            srow[p] = bilinear_value(plane, d.h, d.w, py, px);
            crow[p] = srow[p] * m[p];
          }
      }
    }
    MapM<T> Y(out.data() + n * d.c_out * P, d.c_out, P);
    Y.noalias() = Wm * MapC<T>(cols.data(), rows, P);
    if (bias.defined()) {
      Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> b(bias.data().data(), d.c_out);
      Y.colwise() += b;
    }
  }
  return detail::make_result<T>({d.n, d.c_out, d.ho, d.wo}, std::move(out), "deform_conv2d",
                                {&x, &offset, &mask, &weight, &bias},
                                [d, geom, samples = std::move(samples)](detail::Node<T>& self) {
    const auto K = d.k(), P = d.pixels(), rows = d.rows();
    auto gx = detail::input_grad(self, 0);
    auto goff = detail::input_grad(self, 1);
    auto gmask = detail::input_grad(self, 2);
    auto gw = detail::input_grad(self, 3);
    auto gb = detail::input_grad(self, 4);
    const T* Xd = self.inputs[0]->data.data();
    const T* Od = self.inputs[1]->data.data();
    const T* Md = self.inputs[2]->data.data();
    MapC<T> Wm(self.inputs[3]->data.data(), d.c_out, rows);
    const bool need_cols_grad = !gx.empty() || !goff.empty() || !gmask.empty();
    std::vector<T> cols(static_cast<std::size_t>(rows * P));
    std::vector<T> dcols(static_cast<std::size_t>(rows * P));
    for (std::int64_t n = 0; n < d.n; ++n) {
      MapC<T> dY(self.grad.data() + n * d.c_out * P, d.c_out, P);
      const T* smp = samples.data() + n * rows * P;
      if (!gb.empty()) Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(gb.data(), d.c_out) += dY.rowwise().sum();
      if (!gw.empty()) {
        for (std::int64_t r = 0; r < rows; ++r) {
          const T* m = Md + (n * K + r % K) * P;
          for (std::int64_t p = 0; p < P; ++p) cols[static_cast<std::size_t>(r * P + p)] = smp[r * P + p] * m[p];
        }
        MapM<T>(gw.data(), d.c_out, rows).noalias() += dY * MapC<T>(cols.data(), rows, P).transpose();
      }
      if (!need_cols_grad) continue;
      MapM<T>(dcols.data(), rows, P).noalias() = Wm.transpose() * dY;
      for (std::int64_t c = 0; c < d.c_in; ++c) {
        const T* plane = Xd + (n * d.c_in + c) * d.h * d.w;
        T* gplane = gx.empty() ? nullptr : gx.data() + (n * d.c_in + c) * d.h * d.w;
        for (std::int64_t k = 0; k < K; ++k) {
          const std::int64_t ki = k / d.kw, kj = k % d.kw;
          const T* dyo = Od + ((n * 2 * K) + 2 * k) * P;
          const T* dxo = Od + ((n * 2 * K) + 2 * k + 1) * P;
          const T* m = Md + (n * K + k) * P;
          const T* dc = dcols.data() + (c * K + k) * P;
          const T* srow = smp + (c * K + k) * P;
          for (std::int64_t oy = 0; oy < d.ho; ++oy)
            for (std::int64_t ox = 0; ox < d.wo; ++ox) {
              const auto p = oy * d.wo + ox;
              if (!gmask.empty()) gmask[static_cast<std::size_t>((n * K + k) * P + p)] += dc[p] * srow[p];
              if (!gplane && goff.empty()) continue;
              const T py = T(oy * geom.stride.y - geom.padding.y + ki * geom.dilation.y) + dyo[p];
              const T px = T(ox * geom.stride.x - geom.padding.x + kj * geom.dilation.x) + dxo[p];
              auto [gpy, gpx] = bilinear_backward(plane, d.h, d.w, py, px, dc[p] * m[p], gplane);
              if (!goff.empty()) {
                goff[static_cast<std::size_t>(((n * 2 * K) + 2 * k) * P + p)] += gpy;
                goff[static_cast<std::size_t>(((n * 2 * K) + 2 * k + 1) * P + p)] += gpx;
              }
            }
        }
      }
    }
  });
}

template <typename T>
DCNv2Params<T> DCNv2Params<T>::init(std::int64_t c_in, std::int64_t c_out, int dilation_rate, Rng& rng, double base_std) {
  if (dilation_rate < 1) fail(ErrorKind::InvalidGeometry, "DCNv2 dilation rate must be >= 1");
  DCNv2Params p;
  p.dilation_rate = dilation_rate;
  p.base.weight = Tensor<T>::normal({c_out, c_in, 3, 3}, rng, 0.0, base_std);
  p.base.bias = Tensor<T>::zeros({c_out});
  p.base.geom = ConvGeometry{{1, 1}, {1, 1}, {1, 1}};
  const ConvGeometry dilated{{1, 1}, {dilation_rate, dilation_rate}, {dilation_rate, dilation_rate}};
  p.offset_conv.weight = Tensor<T>::zeros({18, c_in, 3, 3});
  p.offset_conv.bias = Tensor<T>::zeros({18});
  p.offset_conv.geom = dilated;
  p.mask_conv.weight = Tensor<T>::zeros({9, c_in, 3, 3});
  p.mask_conv.bias = Tensor<T>::full({9}, T(6));
  p.mask_conv.geom = dilated;
  return p;
}

template <typename T>
Tensor<T> dcn_v2(const Tensor<T>& x, const DCNv2Params<T>& p, const DcnOverride& hooks) {
  const auto K = p.base.kh() * p.base.kw();
  if (p.offset_conv.out_channels() != 2 * K || p.mask_conv.out_channels() != K)
    fail(ErrorKind::ShapeMismatch, "dcn_v2: offset conv needs 2K channels and mask conv K channels");
  Tensor<T> offset = conv2d(x, p.offset_conv);
  Tensor<T> logits = conv2d(x, p.mask_conv);
  if (offset.dim(2) != x.dim(2) || offset.dim(3) != x.dim(3))
    fail(ErrorKind::InvalidGeometry, "dcn_v2: offset/mask convolutions must preserve spatial size");
  if (hooks.zero_offsets) offset = Tensor<T>::zeros(offset.shape());
  Tensor<T> modulation = hooks.modulation ? Tensor<T>::full(logits.shape(), static_cast<T>(*hooks.modulation)) : sigmoid(logits);
  return deform_conv2d(x, offset, modulation, p.base.weight, p.base.bias, p.base.geom);
}

template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& x, std::int64_t out_h, std::int64_t out_w) {
  if (x.rank() != 4) fail(ErrorKind::ShapeMismatch, "resize_bilinear: input must be [N,C,H,W]");
  if (out_h < 1 || out_w < 1) fail(ErrorKind::InvalidGeometry, "resize_bilinear: target size must be >= 1");
  const auto N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  struct Tap {
    std::int64_t i0, i1;
    T l;
  };
  auto taps = [](std::int64_t in, std::int64_t out) {
    std::vector<Tap> t(static_cast<std::size_t>(out));
    const double s = static_cast<double>(in) / static_cast<double>(out);
    for (std::int64_t o = 0; o < out; ++o) {
      double src = (static_cast<double>(o) + 0.5) * s - 0.5;
      if (src < 0) src = 0;
      auto i0 = static_cast<std::int64_t>(std::floor(src));
      if (i0 > in - 1) i0 = in - 1;
      const std::int64_t i1 = std::min(i0 + 1, in - 1);
      t[static_cast<std::size_t>(o)] = {i0, i1, static_cast<T>(src - static_cast<double>(i0))};
    }
    return t;
  };
  auto ty = taps(H, out_h), tx = taps(W, out_w);
  std::vector<T> out(static_cast<std::size_t>(N * C * out_h * out_w));
  auto X = x.data();
  for (std::int64_t nc = 0; nc < N * C; ++nc) {
    const T* in = X.data() + nc * H * W;
    T* o = out.data() + nc * out_h * out_w;
    for (std::int64_t oy = 0; oy < out_h; ++oy) {
      const Tap& a = ty[static_cast<std::size_t>(oy)];
      for (std::int64_t ox = 0; ox < out_w; ++ox) {
        const Tap& b = tx[static_cast<std::size_t>(ox)];
        const T top = in[a.i0 * W + b.i0] * (T(1) - b.l) + in[a.i0 * W + b.i1] * b.l;
        const T bot = in[a.i1 * W + b.i0] * (T(1) - b.l) + in[a.i1 * W + b.i1] * b.l;
        o[oy * out_w + ox] = top * (T(1) - a.l) + bot * a.l;
      }
    }
  }
  return detail::make_result<T>({N, C, out_h, out_w}, std::move(out), "resize_bilinear", {&x},
                                [=, ty = std::move(ty), tx = std::move(tx)](detail::Node<T>& self) {
    auto gx = detail::input_grad(self, 0);
    for (std::int64_t nc = 0; nc < N * C; ++nc) {
      T* gi = gx.data() + nc * H * W;
      const T* g = self.grad.data() + nc * out_h * out_w;
      for (std::int64_t oy = 0; oy < out_h; ++oy) {
        const Tap& a = ty[static_cast<std::size_t>(oy)];
        for (std::int64_t ox = 0; ox < out_w; ++ox) {
          const Tap& b = tx[static_cast<std::size_t>(ox)];
          const T v = g[oy * out_w + ox];
          gi[a.i0 * W + b.i0] += v * (T(1) - a.l) * (T(1) - b.l);
          gi[a.i0 * W + b.i1] += v * (T(1) - a.l) * b.l;
          gi[a.i1 * W + b.i0] += v * a.l * (T(1) - b.l);
          gi[a.i1 * W + b.i1] += v * a.l * b.l;
        }
      }
    }
  });
}

template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& x, int factor) {
  if (x.rank() != 4) fail(ErrorKind::ShapeMismatch, "upsample_nearest: input must be [N,C,H,W]");
  if (factor < 1) fail(ErrorKind::InvalidGeometry, "upsample_nearest: factor must be >= 1");
  const auto N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto Ho = H * factor, Wo = W * factor;
  std::vector<T> out(static_cast<std::size_t>(N * C * Ho * Wo));
  auto X = x.data();
  for (std::int64_t nc = 0; nc < N * C; ++nc)
    for (std::int64_t y = 0; y < Ho; ++y)
      for (std::int64_t xx = 0; xx < Wo; ++xx)
        out[static_cast<std::size_t>((nc * Ho + y) * Wo + xx)] = X[static_cast<std::size_t>((nc * H + y / factor) * W + xx / factor)];
  return detail::make_result<T>({N, C, Ho, Wo}, std::move(out), "upsample_nearest", {&x}, [=](detail::Node<T>& self) {
    auto gx = detail::input_grad(self, 0);
    for (std::int64_t nc = 0; nc < N * C; ++nc)
      for (std::int64_t y = 0; y < Ho; ++y)
        for (std::int64_t xx = 0; xx < Wo; ++xx)
          gx[static_cast<std::size_t>((nc * H + y / factor) * W + xx / factor)] +=
              self.grad[static_cast<std::size_t>((nc * Ho + y) * Wo + xx)];
  });
}

#define PFSEG_INSTANTIATE(T)                                                                                      \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const ConvGeometry&);        \
  template Tensor<T> depthwise_conv2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::optional<Pair>); \
  template Tensor<T> bilinear_sample<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                    \
  template Tensor<T> deform_conv2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,     \
                                      const Tensor<T>&, const ConvGeometry&);                                     \
  template struct DCNv2Params<T>;                                                                                 \
  template Tensor<T> dcn_v2<T>(const Tensor<T>&, const DCNv2Params<T>&, const DcnOverride&);                      \
  template Tensor<T> resize_bilinear<T>(const Tensor<T>&, std::int64_t, std::int64_t);                            \
  template Tensor<T> upsample_nearest<T>(const Tensor<T>&, int);

PFSEG_INSTANTIATE(float)
PFSEG_INSTANTIATE(double)
#undef PFSEG_INSTANTIATE

}  // namespace pfseg
