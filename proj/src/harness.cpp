#include "pfseg/harness.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <thread>

namespace pfseg {

namespace {

constexpr double kPi = std::numbers::pi;

std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

bool inside(const BlobInfo& s, double y, double x) {
  const double dy = y - s.cy, dx = x - s.cx;
  const double c = std::cos(s.theta), sn = std::sin(s.theta);
  const double u = dx * c + dy * sn;
  const double v = -dx * sn + dy * c;
  if (s.shape == BlobShape::Ribbon) {
    if (std::abs(u) > s.a) return false;
    const double center = 0.35 * s.a * std::sin(kPi * u / s.a + s.phase);
    return std::abs(v - center) <= s.b;
  }
  const double nu = u / s.a, nv = v / s.b;
  const double r = std::sqrt(nu * nu + nv * nv);
  if (s.shape == BlobShape::Ellipse || s.wobble == 0.0) return r <= 1.0;
  const double phi = std::atan2(nv, nu);
  return r <= 1.0 + s.wobble * std::sin(s.lobes * phi + s.phase);
}

// Texture of class c at pixel (y, x); classes differ in level, stripe
// orientation/period and tint.
struct ClassStyle {
  double level;
  double angle;
  double period;
  double amplitude;
  double tint[3];
};

ClassStyle class_style(int c, int num_classes) {
  ClassStyle s{};
  if (c == 0) {
    s.level = 0.45;
    s.angle = 0;
    s.period = 0;
    s.amplitude = 0;
    s.tint[0] = s.tint[1] = s.tint[2] = 0;
    return s;
  }
  const int k = c - 1;
  s.level = 0.45 + ((k % 2 == 0) ? 1.0 : -1.0) * 0.06 * (1 + k / 2);
  s.angle = kPi * k / std::max(1, num_classes - 1) + kPi / 8;
  s.period = 4.0 + 2.0 * (k % 3);
  s.amplitude = 0.16;
  for (int ch = 0; ch < 3; ++ch) s.tint[ch] = 0.03 * std::cos(2.0 * kPi * (k + ch) / 3.0);
  return s;
}

}  // namespace

std::vector<std::uint8_t> rasterize(const BlobInfo& blob, std::int64_t h, std::int64_t w) {
  std::vector<std::uint8_t> out(static_cast<std::size_t>(h * w), 0);
  for (std::int64_t i = 0; i < h; ++i)
    for (std::int64_t j = 0; j < w; ++j)
      out[static_cast<std::size_t>(i * w + j)] = inside(blob, i + 0.5, j + 0.5) ? 1 : 0;
  return out;
}

SyntheticSample gen_sample(std::uint64_t seed, std::int64_t h, std::int64_t w, int num_classes, const GenOptions& opts) {
  if (num_classes < 2) fail(ErrorKind::Contract, "gen_sample needs C >= 2");
  if (h < 16 || w < 16) fail(ErrorKind::Contract, "gen_sample needs H, W >= 16");
  Rng rng(seed);
  SyntheticSample s;
  s.height = h;
  s.width = w;
  s.mask.assign(static_cast<std::size_t>(h * w), 0);
  const double side = static_cast<double>(std::min(h, w));

  for (int c = 1; c < num_classes; ++c) {
    bool placed = false;
    for (int attempt = 0; attempt < opts.max_attempts && !placed; ++attempt) {
      BlobInfo b;
      b.label = c;
      const double pick = rng.uniform01();
      b.shape = (opts.allow_ribbons && pick < 0.2) ? BlobShape::Ribbon : (pick < 0.35 ? BlobShape::Ellipse : BlobShape::Blob);
      b.theta = rng.uniform(0, kPi);
      b.phase = rng.uniform(0, 2 * kPi);
      if (b.shape == BlobShape::Ribbon) {
        b.a = rng.uniform(0.25, 0.4) * side;
        b.b = rng.uniform(0.05, 0.09) * side;
      } else {
        b.a = rng.uniform(0.12, 0.26) * side;
        b.b = b.a * rng.uniform(0.6, 1.0);
      }
      if (b.shape == BlobShape::Blob) {
        b.wobble = opts.wobble * rng.uniform(0.5, 1.0);
        b.lobes = 3 + static_cast<int>(rng.below(4));
      }
      const double reach = (b.shape == BlobShape::Ribbon ? std::hypot(b.a, 0.35 * b.a + b.b) : b.a * (1.0 + b.wobble)) + 1.0;
      if (2 * reach >= static_cast<double>(h) || 2 * reach >= static_cast<double>(w)) continue;
      b.cy = rng.uniform(reach, static_cast<double>(h) - reach);
      b.cx = rng.uniform(reach, static_cast<double>(w) - reach);
      const auto cover = rasterize(b, h, w);
      std::int64_t area = 0;
      for (auto v : cover) area += v;
      if (area < 16) continue;
      for (std::size_t p = 0; p < cover.size(); ++p)
        if (cover[p]) s.mask[p] = c;
      s.blobs.push_back(b);
      placed = true;
    }
    if (!placed)
      fail(ErrorKind::InvalidGeometry, "gen_sample: could not place shape for class " + std::to_string(c) + " in " +
                                           std::to_string(h) + "x" + std::to_string(w) + " after " +
                                           std::to_string(opts.max_attempts) + " attempts");
  }

  // smooth background field plus per-pixel noise
  const double fy = rng.uniform(0.5, 1.5) * 2 * kPi / static_cast<double>(h);
  const double fx = rng.uniform(0.5, 1.5) * 2 * kPi / static_cast<double>(w);
  const double p0 = rng.uniform(0, 2 * kPi), p1 = rng.uniform(0, 2 * kPi);
  std::vector<ClassStyle> styles;
  std::vector<double> stripe_phase;
  for (int c = 0; c < num_classes; ++c) {
    styles.push_back(class_style(c, num_classes));
    stripe_phase.push_back(rng.uniform(0, 2 * kPi));
  }
  s.image.assign(static_cast<std::size_t>(3 * h * w), 0.0f);
  for (std::int64_t i = 0; i < h; ++i)
    for (std::int64_t j = 0; j < w; ++j) {
      const auto p = static_cast<std::size_t>(i * w + j);
      const int c = s.mask[p];
      const auto& st = styles[static_cast<std::size_t>(c)];
      double v = st.level + 0.06 * std::sin(fy * i + p0) * std::cos(fx * j + p1);
      if (c > 0) {
        const double t = (j * std::cos(st.angle) + i * std::sin(st.angle)) * 2 * kPi / st.period;
        v += st.amplitude * std::sin(t + stripe_phase[static_cast<std::size_t>(c)]);
      }
      for (int ch = 0; ch < 3; ++ch) {
        const double x = v + st.tint[ch] + opts.noise * rng.normal();
        s.image[static_cast<std::size_t>(ch * h * w) + p] = static_cast<float>(std::clamp(x, 0.0, 1.0));
      }
    }
  return s;
}

std::uint64_t sample_seed(std::uint64_t base, int split, int index) {
  return mix64(mix64(base ^ (0x5851f42d4c957f2dULL * static_cast<std::uint64_t>(split + 1))) + static_cast<std::uint64_t>(index));
}

namespace {

unsigned worker_count(std::size_t jobs) {
  const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  return static_cast<unsigned>(std::min<std::size_t>(hw, std::max<std::size_t>(1, jobs)));
}

// Runs fn(i) for i in [0, n) on a small pool; each index is handled once.
template <typename F>
void parallel_for(std::size_t n, F&& fn) {
  const unsigned workers = worker_count(n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i, 0u);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (unsigned t = 0; t < workers; ++t)
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < n; i += workers) fn(i, t);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace

Dataset gen_dataset(const DatasetSpec& spec, int split, int count) {
  Dataset d;
  d.samples.resize(static_cast<std::size_t>(std::max(0, count)));
  parallel_for(d.samples.size(), [&](std::size_t i, unsigned) {
    d.samples[i] = gen_sample(sample_seed(spec.seed, split, static_cast<int>(i)), spec.height, spec.width, spec.num_classes, spec.gen);
  });
  return d;
}

// ---------------------------------------------------------------------------
// Augmentation

namespace {

SyntheticSample rotate90(const SyntheticSample& s, int k) {
  k = ((k % 4) + 4) % 4;
  if (k == 0) return s;
  SyntheticSample out;
  const auto H = s.height, W = s.width;
  out.height = (k % 2) ? W : H;
  out.width = (k % 2) ? H : W;
  out.image.resize(s.image.size());
  out.mask.resize(s.mask.size());
  for (std::int64_t i = 0; i < out.height; ++i)
    for (std::int64_t j = 0; j < out.width; ++j) {
      std::int64_t si = 0, sj = 0;
      if (k == 1) {  // counter-clockwise
        si = j;
        sj = W - 1 - i;
      } else if (k == 2) {
        si = H - 1 - i;
        sj = W - 1 - j;
      } else {
        si = H - 1 - j;
        sj = i;
      }
      const auto dst = static_cast<std::size_t>(i * out.width + j), src = static_cast<std::size_t>(si * W + sj);
      out.mask[dst] = s.mask[src];
      for (int ch = 0; ch < 3; ++ch)
        out.image[static_cast<std::size_t>(ch) * out.height * out.width + dst] = s.image[static_cast<std::size_t>(ch * H * W) + src];
    }
  return out;
}

double reflect(double x, double n) {
  // mirror about the outer pixel centers 0 and n-1
  if (n <= 1) return 0;
  const double period = 2 * (n - 1);
  x = std::fmod(x, period);
  if (x < 0) x += period;
  return x > n - 1 ? period - x : x;
}

SyntheticSample rotate_small(const SyntheticSample& s, double radians) {
  const auto H = s.height, W = s.width;
  SyntheticSample out;
  out.height = H;
  out.width = W;
  out.image.resize(s.image.size());
  out.mask.resize(s.mask.size());
  const double cy = (H - 1) / 2.0, cx = (W - 1) / 2.0;
  const double c = std::cos(radians), sn = std::sin(radians);
  for (std::int64_t i = 0; i < H; ++i)
    for (std::int64_t j = 0; j < W; ++j) {
      const double dy = i - cy, dx = j - cx;
      const double sy = reflect(cy + c * dy - sn * dx, static_cast<double>(H));
      const double sx = reflect(cx + sn * dy + c * dx, static_cast<double>(W));
      const auto dst = static_cast<std::size_t>(i * W + j);
      const auto ny = std::clamp<std::int64_t>(std::llround(sy), 0, H - 1), nx = std::clamp<std::int64_t>(std::llround(sx), 0, W - 1);
      out.mask[dst] = s.mask[static_cast<std::size_t>(ny * W + nx)];
      const auto y0 = std::min<std::int64_t>(static_cast<std::int64_t>(std::floor(sy)), H - 1);
      const auto x0 = std::min<std::int64_t>(static_cast<std::int64_t>(std::floor(sx)), W - 1);
      const auto y1 = std::min<std::int64_t>(y0 + 1, H - 1), x1 = std::min<std::int64_t>(x0 + 1, W - 1);
      const double ty = sy - y0, tx = sx - x0;
      for (int ch = 0; ch < 3; ++ch) {
        const float* img = s.image.data() + static_cast<std::size_t>(ch * H * W);
        const double v = (1 - ty) * ((1 - tx) * img[y0 * W + x0] + tx * img[y0 * W + x1]) +
                         ty * ((1 - tx) * img[y1 * W + x0] + tx * img[y1 * W + x1]);
        out.image[static_cast<std::size_t>(ch * H * W) + dst] = static_cast<float>(v);
      }
    }
  return out;
}

SyntheticSample hflip(const SyntheticSample& s) {
  SyntheticSample out = s;
  const auto H = s.height, W = s.width;
  for (std::int64_t i = 0; i < H; ++i)
    for (std::int64_t j = 0; j < W; ++j) {
      const auto dst = static_cast<std::size_t>(i * W + j), src = static_cast<std::size_t>(i * W + (W - 1 - j));
      out.mask[dst] = s.mask[src];
      for (int ch = 0; ch < 3; ++ch) out.image[static_cast<std::size_t>(ch * H * W) + dst] = s.image[static_cast<std::size_t>(ch * H * W) + src];
    }
  return out;
}

SyntheticSample crop(const SyntheticSample& s, std::int64_t size, Rng& rng) {
  const auto H = s.height, W = s.width;
  const auto PH = std::max(H, size), PW = std::max(W, size);  // pad first when smaller than the crop
  const auto oy = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(PH - size + 1)));
  const auto ox = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(PW - size + 1)));
  SyntheticSample out;
  out.height = out.width = size;
  out.image.assign(static_cast<std::size_t>(3 * size * size), 0.0f);
  out.mask.assign(static_cast<std::size_t>(size * size), 0);
  for (std::int64_t i = 0; i < size; ++i)
    for (std::int64_t j = 0; j < size; ++j) {
      const auto si = i + oy, sj = j + ox;
      if (si >= H || sj >= W) continue;
      const auto dst = static_cast<std::size_t>(i * size + j), src = static_cast<std::size_t>(si * W + sj);
      out.mask[dst] = s.mask[src];
      for (int ch = 0; ch < 3; ++ch)
        out.image[static_cast<std::size_t>(ch * size * size) + dst] = s.image[static_cast<std::size_t>(ch * H * W) + src];
    }
  return out;
}

}  // namespace

SyntheticSample augment(const SyntheticSample& sample, Rng& rng, const AugmentConfig& cfg) {
  // draw every random number up front so the stream does not depend on which steps are enabled
  const int k = static_cast<int>(rng.below(4));
  const double angle = rng.uniform(-1.0, 1.0) * cfg.rotation_deg * kPi / 180.0;
  const bool flip = rng.uniform01() < cfg.hflip_prob;
  SyntheticSample s = cfg.rot90 ? rotate90(sample, k) : sample;
  if (cfg.rotation_deg > 0) s = rotate_small(s, angle);
  if (flip) s = hflip(s);
  if (cfg.crop > 0) s = crop(s, cfg.crop, rng);
  s.blobs.clear();
  return s;
}

// ---------------------------------------------------------------------------
// Metrics

void IoUAccumulator::add(std::span<const std::int32_t> pred, std::span<const std::int32_t> gt) {
  if (pred.size() != gt.size())
    fail(ErrorKind::ShapeMismatch, "miou: prediction has " + std::to_string(pred.size()) + " pixels, ground truth " +
                                       std::to_string(gt.size()));
  const auto C = static_cast<std::int32_t>(intersection.size());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const auto p = pred[i], g = gt[i];
    if (p < 0 || p >= C || g < 0 || g >= C)
      fail(ErrorKind::Contract, "miou: label out of range [0," + std::to_string(C) + ") at pixel " + std::to_string(i));
    if (p == g) {
      ++intersection[static_cast<std::size_t>(p)];
      ++union_[static_cast<std::size_t>(p)];
    } else {
      ++union_[static_cast<std::size_t>(p)];
      ++union_[static_cast<std::size_t>(g)];
    }
  }
}

void IoUAccumulator::merge(const IoUAccumulator& other) {
  for (std::size_t c = 0; c < intersection.size(); ++c) {
    intersection[c] += other.intersection[c];
    union_[c] += other.union_[c];
  }
}

std::vector<double> IoUAccumulator::per_class() const {
  std::vector<double> out;
  for (std::size_t c = 0; c < intersection.size(); ++c)
    out.push_back(union_[c] == 0 ? std::nan("") : static_cast<double>(intersection[c]) / static_cast<double>(union_[c]));
  return out;
}

double IoUAccumulator::miou() const {
  double total = 0;
  int counted = 0;
  for (double v : per_class())
    if (!std::isnan(v)) {
      total += v;
      ++counted;
    }
  return counted == 0 ? 0.0 : total / counted;
}

double miou(std::span<const std::int32_t> pred, std::span<const std::int32_t> gt, int num_classes) {
  if (num_classes < 1) fail(ErrorKind::Contract, "miou needs C >= 1");
  IoUAccumulator acc(num_classes);
  acc.add(pred, gt);
  return acc.miou();
}

double cosine_lr(double lr0, std::int64_t step, std::int64_t total_steps) {
  if (total_steps <= 0) return lr0;
  const double t = static_cast<double>(std::clamp<std::int64_t>(step, 0, total_steps));
  return lr0 * 0.5 * (1.0 + std::cos(kPi * t / static_cast<double>(total_steps)));
}

// ---------------------------------------------------------------------------
// Optimizer and training

template <typename T>
Adam<T>::Adam(ParamList<T> params, double beta1, double beta2, double eps)
    : params_(std::move(params)), b1_(beta1), b2_(beta2), eps_(eps) {
  for (const auto& p : params_) {
    m_.emplace_back(static_cast<std::size_t>(p.tensor.numel()), 0.0);
    v_.emplace_back(static_cast<std::size_t>(p.tensor.numel()), 0.0);
  }
}

template <typename T>
double Adam<T>::grad_norm() const {
  double total = 0;
  for (const auto& p : params_)
    if (p.tensor.has_grad())
      for (T g : p.tensor.grad()) total += static_cast<double>(g) * g;
  return std::sqrt(total);
}

template <typename T>
void Adam<T>::step(double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& tensor = params_[k].tensor;
    if (!tensor.has_grad()) continue;
    const auto g = tensor.grad();
    auto data = tensor.mutable_data();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double gi = g[i];
      m[i] = b1_ * m[i] + (1 - b1_) * gi;
      v[i] = b2_ * v[i] + (1 - b2_) * gi * gi;
      data[i] = static_cast<T>(data[i] - lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_));
    }
    tensor.zero_grad();
  }
}

template <typename T>
Tensor<T> image_batch(const std::vector<const SyntheticSample*>& batch) {
  if (batch.empty()) fail(ErrorKind::Contract, "empty batch");
  const auto H = batch.front()->height, W = batch.front()->width;
  std::vector<T> data;
  data.reserve(batch.size() * 3 * H * W);
  for (const auto* s : batch) {
    if (s->height != H || s->width != W) fail(ErrorKind::ShapeMismatch, "batch samples differ in size");
    for (float v : s->image) data.push_back(static_cast<T>(v));
  }
  return Tensor<T>({static_cast<std::int64_t>(batch.size()), 3, H, W}, std::move(data));
}

template <typename T>
TrainResult train(SegModel<T>& model, const Dataset& train_set, const Dataset* val_set, const TrainConfig& cfg,
                  const std::function<void(const EpochRecord&)>& on_epoch) {
  if (cfg.batch_size < 1) fail(ErrorKind::Config, "batch_size must be >= 1");
  if (cfg.epochs < 0) fail(ErrorKind::Config, "epochs must be >= 0");
  if (!(cfg.lr0 > 0)) fail(ErrorKind::Config, "lr0 must be > 0");
  TrainResult result;
  if (cfg.epochs == 0) return result;
  if (train_set.samples.empty()) fail(ErrorKind::Config, "training set is empty");

  ParamList<T> learnable;
  for (auto& p : model.parameters())
    if (p.tensor.requires_grad()) learnable.push_back(p);
  Adam<T> adam(learnable, cfg.beta1, cfg.beta2, cfg.adam_eps);

  const auto n = train_set.samples.size();
  const auto B = static_cast<std::size_t>(cfg.batch_size);
  const auto per_epoch = static_cast<std::int64_t>((n + B - 1) / B);
  const std::int64_t total = per_epoch * cfg.epochs;
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(n);
  std::int64_t step = 0;
  double last_norm = 0;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    double loss_sum = 0;
    double lr = cfg.lr0;
    for (std::size_t start = 0; start < n; start += B) {
      std::vector<SyntheticSample> augmented;
      std::vector<const SyntheticSample*> ptrs;
      std::vector<std::int32_t> labels;
      for (std::size_t k = start; k < std::min(n, start + B); ++k) {
        augmented.push_back(augment(train_set.samples[order[k]], rng, cfg.augment));
      }
      for (const auto& s : augmented) {
        ptrs.push_back(&s);
        labels.insert(labels.end(), s.mask.begin(), s.mask.end());
      }
      lr = cosine_lr(cfg.lr0, step, total);
      Tensor<T> loss = cross_entropy(model.forward(image_batch<T>(ptrs)), labels);
      const double value = loss.item();
      if (!std::isfinite(value)) {
        std::ostringstream msg;
        msg << "non-finite loss at step " << step << " (epoch " << epoch << ", lr " << lr << ", last grad-norm " << last_norm << ")";
        fail(ErrorKind::Numeric, msg.str());
      }
      backward(loss);
      last_norm = adam.grad_norm();
      if (!std::isfinite(last_norm)) {
        std::ostringstream msg;
        msg << "non-finite gradient at step " << step << " (epoch " << epoch << ", lr " << lr << ", grad-norm " << last_norm << ")";
        fail(ErrorKind::Numeric, msg.str());
      }
      adam.step(lr);
      loss_sum += value;
      ++step;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.loss = loss_sum / static_cast<double>(per_epoch);
    rec.lr = lr;
    const bool eval_now = val_set && !val_set->samples.empty() &&
                          (epoch == cfg.epochs || (cfg.eval_every > 0 && epoch % cfg.eval_every == 0));
    if (eval_now) rec.val_miou = evaluate(model, *val_set).miou();
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  result.steps = step;
  return result;
}

template <typename T>
std::vector<std::int32_t> predict(const SegModel<T>& model, const SyntheticSample& sample) {
  NoGradGuard guard;
  Tensor<T> logits = model.forward(image_batch<T>({&sample}));
  const auto C = logits.dim(1), P = logits.dim(2) * logits.dim(3);
  auto L = logits.data();
  std::vector<std::int32_t> out(static_cast<std::size_t>(P));
  for (std::int64_t p = 0; p < P; ++p) {
    std::int64_t best = 0;
    for (std::int64_t c = 1; c < C; ++c)
      if (L[static_cast<std::size_t>(c * P + p)] > L[static_cast<std::size_t>(best * P + p)]) best = c;
    out[static_cast<std::size_t>(p)] = static_cast<std::int32_t>(best);
  }
  return out;
}

template <typename T>
IoUAccumulator evaluate(const SegModel<T>& model, const Dataset& data) {
  const int C = model.config().num_classes;
  const unsigned workers = worker_count(data.samples.size());
  std::vector<IoUAccumulator> partial(workers, IoUAccumulator(C));
  parallel_for(data.samples.size(), [&](std::size_t i, unsigned t) {
    const auto& s = data.samples[i];
    partial[t].add(predict(model, s), s.mask);
  });
  IoUAccumulator total(C);
  for (const auto& p : partial) total.merge(p);
  return total;
}

#define PFSEG_INSTANTIATE(T)                                                                                        \
  template class Adam<T>;                                                                                           \
  template Tensor<T> image_batch<T>(const std::vector<const SyntheticSample*>&);                                    \
  template TrainResult train<T>(SegModel<T>&, const Dataset&, const Dataset*, const TrainConfig&,                   \
                                const std::function<void(const EpochRecord&)>&);                                    \
  template std::vector<std::int32_t> predict<T>(const SegModel<T>&, const SyntheticSample&);                        \
  template IoUAccumulator evaluate<T>(const SegModel<T>&, const Dataset&);

PFSEG_INSTANTIATE(float)
PFSEG_INSTANTIATE(double)
#undef PFSEG_INSTANTIATE

}  // namespace pfseg
