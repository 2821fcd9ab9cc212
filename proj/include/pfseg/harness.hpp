#pragma once

// Synthetic data, training loop and mIoU evaluation.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "pfseg/segmodel.hpp"

namespace pfseg {

enum class BlobShape { Blob, Ellipse, Ribbon };

struct BlobInfo {
  int label = 0;
  BlobShape shape = BlobShape::Blob;
  double cy = 0, cx = 0;  // center, pixels
  double a = 0, b = 0;    // semi-axes (ribbon: half length, half width)
  double theta = 0;       // orientation, radians
  double wobble = 0;      // relative radius perturbation amplitude
  int lobes = 0;          // perturbation frequency
  double phase = 0;
};

struct SyntheticSample {
  std::int64_t height = 0, width = 0;
  std::vector<float> image;        // [3,H,W] in [0,1]
  std::vector<std::int32_t> mask;  // [H,W], labels in [0,C)
  std::vector<BlobInfo> blobs;     // in painting order
};

struct GenOptions {
  double wobble = 0.18;       // max relative radius perturbation
  bool allow_ribbons = true;
  double noise = 0.08;        // background / texture noise level
  int max_attempts = 64;
};

/// Renders C-1 textured shapes over a noisy background (class 0). Class c is
/// coded by both intensity and texture; later shapes occlude earlier ones.
SyntheticSample gen_sample(std::uint64_t seed, std::int64_t h, std::int64_t w, int num_classes, const GenOptions& opts = {});

/// Pixels inside a shape (no occlusion), row-major [H,W].
std::vector<std::uint8_t> rasterize(const BlobInfo& blob, std::int64_t h, std::int64_t w);

struct DatasetSpec {
  int num_classes = 3;
  std::int64_t height = 64, width = 64;
  int train_count = 200;
  int val_count = 50;
  std::uint64_t seed = 0;
  GenOptions gen;
};

struct Dataset {
  std::vector<SyntheticSample> samples;
};

/// Seed of sample i of a split; splits never share seeds.
std::uint64_t sample_seed(std::uint64_t base, int split, int index);
/// Generates `count` samples in parallel; split 0 = train, 1 = val.
Dataset gen_dataset(const DatasetSpec& spec, int split, int count);

struct AugmentConfig {
  std::int64_t crop = 48;  // 0 disables cropping
  double hflip_prob = 0.5;
  bool rot90 = true;
  double rotation_deg = 15.0;  // uniform small-angle range, 0 disables
};

/// One random transform applied identically to image and mask: rot90^k,
/// small-angle rotation (bilinear image, nearest mask, reflected border),
/// horizontal flip, random crop (zero/label-0 padding if smaller than crop).
SyntheticSample augment(const SyntheticSample& sample, Rng& rng, const AugmentConfig& cfg);

/// mIoU of one prediction; classes absent from both masks are skipped.
double miou(std::span<const std::int32_t> pred, std::span<const std::int32_t> gt, int num_classes);

/// Per-class intersection/union counts accumulated over many masks.
struct IoUAccumulator {
  std::vector<std::int64_t> intersection, union_;

  explicit IoUAccumulator(int num_classes = 0) : intersection(num_classes, 0), union_(num_classes, 0) {}
  void add(std::span<const std::int32_t> pred, std::span<const std::int32_t> gt);
  void merge(const IoUAccumulator& other);
  double miou() const;
  std::vector<double> per_class() const;  // NaN for skipped classes
};

double cosine_lr(double lr0, std::int64_t step, std::int64_t total_steps);

struct TrainConfig {
  int epochs = 30;
  int batch_size = 2;
  double lr0 = 0.005;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  AugmentConfig augment;
  std::uint64_t seed = 0;
  int eval_every = 0;  // 0: validate only after the last epoch
};

template <typename T>
class Adam {
 public:
  Adam(ParamList<T> params, double beta1, double beta2, double eps);
  void step(double lr);
  std::int64_t steps() const { return t_; }
  /// L2 norm of the current gradients of all managed parameters.
  double grad_norm() const;

 private:
  ParamList<T> params_;
  std::vector<std::vector<double>> m_, v_;
  double b1_, b2_, eps_;
  std::int64_t t_ = 0;
};

struct EpochRecord {
  int epoch = 0;
  double loss = 0;
  double lr = 0;
  double val_miou = -1;  // negative when not evaluated
};

struct TrainResult {
  std::vector<EpochRecord> history;
  std::int64_t steps = 0;
};

template <typename T>
Tensor<T> image_batch(const std::vector<const SyntheticSample*>& batch);

/// Trains the learnable partition (requires_grad leaves) of the model.
template <typename T>
TrainResult train(SegModel<T>& model, const Dataset& train_set, const Dataset* val_set, const TrainConfig& cfg,
                  const std::function<void(const EpochRecord&)>& on_epoch = {});

/// Argmax labels for one image, [H,W].
template <typename T>
std::vector<std::int32_t> predict(const SegModel<T>& model, const SyntheticSample& sample);

/// Dataset-level mIoU (counts pooled over all samples), parallel over samples.
template <typename T>
IoUAccumulator evaluate(const SegModel<T>& model, const Dataset& data);

}  // namespace pfseg
