#pragma once

// Naive reference implementations used as test oracles. These are written
// directly from the defining formulas with plain loops and share no code with
// the library.

#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <vector>

namespace oracle {

using Vec = std::vector<double>;

struct Map4 {
  std::int64_t n = 0, c = 0, h = 0, w = 0;
  Vec v;
  Map4() = default;
  Map4(std::int64_t n_, std::int64_t c_, std::int64_t h_, std::int64_t w_) : n(n_), c(c_), h(h_), w(w_), v(n_ * c_ * h_ * w_, 0.0) {}
  double& at(std::int64_t i, std::int64_t ch, std::int64_t y, std::int64_t x) { return v[((i * c + ch) * h + y) * w + x]; }
  double get(std::int64_t i, std::int64_t ch, std::int64_t y, std::int64_t x) const {
    if (y < 0 || y >= h || x < 0 || x >= w) return 0.0;
    return v[((i * c + ch) * h + y) * w + x];
  }
};

template <typename Span>
Map4 map_of(const Span& data, std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) {
  Map4 m(n, c, h, w);
  for (std::size_t i = 0; i < m.v.size(); ++i) m.v[i] = static_cast<double>(data[i]);
  return m;
}

// weight[co][ci/groups][kh][kw] flattened.
inline Map4 conv2d(const Map4& x, const Vec& weight, const Vec& bias, std::int64_t co, std::int64_t kh, std::int64_t kw, int sy,
                   int sx, int py, int px, int dy, int dx, std::int64_t groups = 1) {
  const std::int64_t cig = x.c / groups, cog = co / groups;
  const std::int64_t ho = (x.h + 2 * py - dy * (kh - 1) - 1) / sy + 1;
  const std::int64_t wo = (x.w + 2 * px - dx * (kw - 1) - 1) / sx + 1;
  Map4 y(x.n, co, ho, wo);
  for (std::int64_t i = 0; i < x.n; ++i)
    for (std::int64_t o = 0; o < co; ++o) {
      const std::int64_t g = o / cog;
      for (std::int64_t yy = 0; yy < ho; ++yy)
        for (std::int64_t xx = 0; xx < wo; ++xx) {
          double s = bias.empty() ? 0.0 : bias[o];
          for (std::int64_t c = 0; c < cig; ++c)
            for (std::int64_t a = 0; a < kh; ++a)
              for (std::int64_t b = 0; b < kw; ++b)
                s += weight[((o * cig + c) * kh + a) * kw + b] * x.get(i, g * cig + c, yy * sy - py + a * dy, xx * sx - px + b * dx);
          y.at(i, o, yy, xx) = s;
        }
    }
  return y;
}

// Bilinear read with zero outside the map.
inline double bilinear(const Map4& x, std::int64_t i, std::int64_t c, double py, double px) {
  const double y0 = std::floor(py), x0 = std::floor(px);
  const double fy = py - y0, fx = px - x0;
  const auto iy = static_cast<std::int64_t>(y0), ix = static_cast<std::int64_t>(x0);
  return (1 - fy) * (1 - fx) * x.get(i, c, iy, ix) + (1 - fy) * fx * x.get(i, c, iy, ix + 1) + fy * (1 - fx) * x.get(i, c, iy + 1, ix) +
         fy * fx * x.get(i, c, iy + 1, ix + 1);
}

// Modulated deformable conv, 3x3 style kernels, offsets (dy,dx) tap-major.
inline Map4 deform_conv(const Map4& x, const Map4& offset, const Map4& mask, const Vec& weight, const Vec& bias, std::int64_t co,
                        std::int64_t k, int stride, int pad, int dil) {
  const std::int64_t ho = offset.h, wo = offset.w;
  Map4 y(x.n, co, ho, wo);
  for (std::int64_t i = 0; i < x.n; ++i)
    for (std::int64_t o = 0; o < co; ++o)
      for (std::int64_t yy = 0; yy < ho; ++yy)
        for (std::int64_t xx = 0; xx < wo; ++xx) {
          double s = bias.empty() ? 0.0 : bias[o];
          for (std::int64_t a = 0; a < k; ++a)
            for (std::int64_t b = 0; b < k; ++b) {
              const std::int64_t t = a * k + b;
              const double py = yy * stride - pad + a * dil + offset.get(i, 2 * t, yy, xx);
              const double px = xx * stride - pad + b * dil + offset.get(i, 2 * t + 1, yy, xx);
              const double m = mask.get(i, t, yy, xx);
              for (std::int64_t c = 0; c < x.c; ++c) s += weight[((o * x.c + c) * k + a) * k + b] * m * bilinear(x, i, c, py, px);
            }
          y.at(i, o, yy, xx) = s;
        }
  return y;
}

// Row-major A[m,k] * B[k,n].
inline Vec matmul(const Vec& a, const Vec& b, std::int64_t m, std::int64_t k, std::int64_t n) {
  Vec c(m * n, 0.0);
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j)
      for (std::int64_t t = 0; t < k; ++t) c[i * n + j] += a[i * k + t] * b[t * n + j];
  return c;
}

// Set-based IoU per class, averaged over classes present in either mask.
inline double miou_brute(const std::vector<std::int32_t>& pred, const std::vector<std::int32_t>& gt, int classes) {
  double total = 0;
  int counted = 0;
  for (int c = 0; c < classes; ++c) {
    std::set<std::size_t> p, g;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      if (pred[i] == c) p.insert(i);
      if (gt[i] == c) g.insert(i);
    }
    std::set<std::size_t> uni = p;
    uni.insert(g.begin(), g.end());
    if (uni.empty()) continue;
    std::size_t inter = 0;
    for (auto i : p) inter += g.count(i);
    total += static_cast<double>(inter) / static_cast<double>(uni.size());
    ++counted;
  }
  return counted ? total / counted : 0.0;
}

// tanh approximation
inline double gelu(double x) { return 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x))); }

inline double max_abs(const Vec& a, const Vec& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

template <typename Span>
Vec to_vec(const Span& s) {
  return Vec(s.begin(), s.end());
}

}  // namespace oracle
