#pragma once

// Property suites behind the `verify` command. Each suite builds random
// instances from a seed and compares a fast path against a reference path.

#include <string>
#include <vector>

#include "pfseg/segmodel.hpp"

namespace pfseg {

struct VerifyOptions {
  bool float64 = false;        // run value suites in double with tighter tolerances
  bool perturb_fused = false;  // sensitivity check: corrupt every fused kernel
  std::uint64_t seed = 0;
  int fusion_blocks = 200;
  int dcn_instances = 50;
  int lora_probes = 50;
  int grad_points = 10;
  int transparency_images = 10;
};

struct SuiteResult {
  std::string name;
  bool passed = false;
  double max_error = 0;
  double tolerance = 0;
  std::string detail;
};

SuiteResult verify_fusion(const VerifyOptions& opts);
SuiteResult verify_dcn_degenerate(const VerifyOptions& opts);
SuiteResult verify_lora_merge(const VerifyOptions& opts);
SuiteResult verify_grad(const VerifyOptions& opts);
SuiteResult verify_peg_shapes(const VerifyOptions& opts);
SuiteResult verify_transparency(const VerifyOptions& opts);

std::vector<SuiteResult> run_verify(const VerifyOptions& opts);
std::string format_results(const std::vector<SuiteResult>& results);

/// Fills every tensor with N(0, std) draws (in list order).
template <typename T>
void randomize(const ParamList<T>& params, Rng& rng, double stddev);

/// Largest |a - b| over two equally shaped tensors.
template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b);

}  // namespace pfseg
