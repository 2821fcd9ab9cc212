#pragma once

// MACs and parameter accounting computed from the architecture alone.
//
// Conventions (1 MAC = one multiply + one add):
//   conv       C_out * C_in / groups * kH * kW * H' * W'
//   linear     D_in * D_out * tokens
//   attention  q/k/v/out projections as linears, plus Lq*Lk*D for the scores
//              and Lq*Lk*D for the weighted sum of values
//   DCNv2      offset conv + mask conv + main conv + 4 MACs per sampled point
//              per input channel (K = 9 points per output pixel)
//   LoRA       r * (D_in + D_out) * tokens per adapted linear (train mode)
// Norms, activations, softmax, residual adds and the final bilinear resize of
// the logits are not counted.

#include <optional>
#include <string>
#include <vector>

#include "pfseg/segmodel.hpp"

namespace pfseg {

struct MacsEntry {
  std::string name;
  std::string kind;  // conv | linear | attention | dcn | lora | param
  std::int64_t macs = 0;
  std::int64_t params = 0;
  bool learnable = false;
};

struct MacsReport {
  std::vector<MacsEntry> entries;
  std::int64_t total_macs = 0;
  std::int64_t total_params = 0;
  BlockMode mode = BlockMode::Train;
  std::int64_t height = 0, width = 0;

  const MacsEntry* find(const std::string& name) const;
  /// Sum over entries whose name starts with `prefix`.
  std::int64_t macs_of(const std::string& prefix) const;
};

/// Deploy mode counts LW cores as their single fused 3x3 convolution and
/// LoRA deltas as merged into the frozen linears.
MacsReport count_macs(const ModelConfig& spec, std::int64_t h, std::int64_t w, BlockMode mode);

struct ParamCensus {
  std::int64_t total = 0;
  std::int64_t learnable = 0;
  std::int64_t frozen = 0;
};

ParamCensus param_census(const ModelConfig& spec, BlockMode mode = BlockMode::Train);

struct TradeoffRow {
  std::string name;
  std::int64_t macs = 0;
  std::int64_t params = 0;
  std::optional<double> miou;
};

struct TradeoffTable {
  struct Row {
    TradeoffRow row;
    bool pareto = false;
  };
  std::vector<Row> rows;  // sorted by MACs
  std::vector<std::string> warnings;

  std::string format() const;
  std::string to_json() const;
};

/// Rows without an mIoU are dropped with a warning. A row is Pareto-optimal
/// when no other row has MACs <= and mIoU >= with at least one strict.
TradeoffTable tradeoff_table(const std::vector<TradeoffRow>& rows);

}  // namespace pfseg
