#include "pfseg/analysis.hpp"

#include <json.hpp>

#include <algorithm>
#include <iomanip>
#include <sstream>

namespace pfseg {

const MacsEntry* MacsReport::find(const std::string& name) const {
  for (const auto& e : entries)
    if (e.name == name) return &e;
  return nullptr;
}

std::int64_t MacsReport::macs_of(const std::string& prefix) const {
  std::int64_t total = 0;
  for (const auto& e : entries)
    if (e.name.rfind(prefix, 0) == 0) total += e.macs;
  return total;
}

namespace {

using i64 = std::int64_t;

class Counter {
 public:
  Counter(const ModelConfig& spec, BlockMode mode) : spec_(spec), mode_(mode) {}

  void add(const std::string& name, const char* kind, i64 macs, i64 params) {
    const bool learn = params > 0 && classify_parameter(name + ".weight", spec_) == ParamRole::Learnable;
    entries.push_back({name, kind, macs, params, learn});
  }
  void add_param(const std::string& name, i64 params) {
    entries.push_back({name, "param", 0, params, classify_parameter(name, spec_) == ParamRole::Learnable});
  }

  void conv(const std::string& name, i64 c_in, i64 c_out, i64 k, i64 h_out, i64 w_out, i64 groups = 1, bool bias = true) {
    if (h_out < 1 || w_out < 1)
      fail(ErrorKind::InvalidGeometry, name + ": output map " + std::to_string(h_out) + "x" + std::to_string(w_out) + " is empty");
    add(name, "conv", c_out * (c_in / groups) * k * k * h_out * w_out, c_out * (c_in / groups) * k * k + (bias ? c_out : 0));
  }

  void linear(const std::string& name, i64 d_in, i64 d_out, i64 tokens, bool bias = true, bool lora_target = false) {
    add(name, "linear", d_in * d_out * tokens, d_in * d_out + (bias ? d_out : 0));
    const auto& dec = spec_.decoder;
    if (lora_target && dec.lora && mode_ == BlockMode::Train)
      entries.push_back({name + ".lora", "lora", static_cast<i64>(dec.lora_rank) * (d_in + d_out) * tokens,
                         static_cast<i64>(dec.lora_rank) * (d_in + d_out), true});
  }

  bool is_target(const std::string& which) const {
    if (!spec_.decoder.lora) return false;
    const auto& t = spec_.decoder.lora_targets;
    return std::find(t.begin(), t.end(), which) != t.end();
  }

  // q from lq tokens; k, v from lk tokens.
  void attention(const std::string& name, i64 dim, i64 lq, i64 lk, bool decoder) {
    linear(name + ".q", dim, dim, lq, true, decoder && is_target("q"));
    linear(name + ".k", dim, dim, lk, true, decoder && is_target("k"));
    linear(name + ".v", dim, dim, lk, true, decoder && is_target("v"));
    add(name + ".scores", "attention", lq * lk * dim, 0);
    add(name + ".context", "attention", lq * lk * dim, 0);
    linear(name + ".out", dim, dim, lq, true, decoder && is_target("out"));
  }

  void norm(const std::string& name, i64 dim) { add(name, "param", 0, 2 * dim); }

  std::vector<MacsEntry> entries;

 private:
  const ModelConfig& spec_;
  BlockMode mode_;
};

void count_adapter(Counter& c, const std::string& prefix, const AdapterConfig& a, i64 h, i64 w, BlockMode mode) {
  const i64 D = a.embed_dim, d = a.bottleneck(), L = h * w;
  c.linear(prefix + ".down", D, d, L);
  if (a.kind == AdapterKind::HP) {
    const auto rates = a.effective_dilations();
    for (std::size_t i = 0; i < rates.size(); ++i) {
      const std::string p = prefix + ".dcn." + std::to_string(i);
      c.conv(p + ".offset_conv", d, 18, 3, h, w);
      c.conv(p + ".mask_conv", d, 9, 3, h, w);
      c.add(p, "dcn", d * d * 9 * L + 4 * 9 * d * L, d * d * 9 + d);
    }
    c.conv(prefix + ".skip1x1", d, d, 1, h, w);
    c.conv(prefix + ".skip3x3", d, d, 3, h, w);
  } else if (a.kind == AdapterKind::LW) {
    if (mode == BlockMode::Deploy) {
      c.conv(prefix + ".core.fused", d, d, 3, h, w);
    } else {
      const auto patterns = parse_branch_patterns(a.branch_pattern, a.lw_branches);
      for (std::size_t b = 0; b < patterns.size(); ++b)
        for (std::size_t l = 0; l < patterns[b].size(); ++l)
          c.conv(prefix + ".core.branch." + std::to_string(b + 1) + "." + std::to_string(l), d, d, patterns[b][l], h, w, 1,
                 l + 1 == patterns[b].size());
    }
  }
  c.linear(prefix + ".up", d, D, L);
}

}  // namespace

MacsReport count_macs(const ModelConfig& spec, i64 h, i64 w, BlockMode mode) {
  spec.validate();
  const auto& enc = spec.encoder;
  if (h < 1 || w < 1 || h % enc.patch_size != 0 || w % enc.patch_size != 0)
    fail(ErrorKind::InvalidGeometry, "encoder.patch_embed: input " + std::to_string(h) + "x" + std::to_string(w) +
                                         " is not divisible by patch size " + std::to_string(enc.patch_size));
  Counter c(spec, mode);
  i64 gh = h / enc.patch_size, gw = w / enc.patch_size;
  const i64 D0 = enc.stages.front().dim;
  c.conv("encoder.patch_embed", enc.in_channels, D0, enc.patch_size, gh, gw);
  if (spec.posenc == PosEncKind::AbsInterp) c.add_param("encoder.abs_pe", D0 * spec.abs_pe_grid * spec.abs_pe_grid);
  const i64 h0 = gh, w0 = gw;
  int block_index = 0;
  std::vector<MacsEntry> adapters, pegs;
  for (std::size_t s = 0; s < enc.stages.size(); ++s) {
    const auto& st = enc.stages[s];
    const std::string sp = "encoder.stages." + std::to_string(s);
    if (st.downsample) {
      const i64 prev = enc.stages[s - 1].dim;
      gh /= 2;
      gw /= 2;
      c.conv(sp + ".downsample", prev, st.dim, 2, gh, gw);
    }
    const i64 L = gh * gw, D = st.dim;
    for (int b = 0; b < st.depth; ++b) {
      const std::string bp = sp + ".blocks." + std::to_string(b);
      c.norm(bp + ".ln1", D);
      c.attention(bp + ".attn", D, L, L, false);
      c.norm(bp + ".ln2", D);
      c.linear(bp + ".mlp.fc1", D, D * enc.mlp_ratio, L);
      c.linear(bp + ".mlp.fc2", D * enc.mlp_ratio, D, L);
      if (spec.adapter.kind != AdapterKind::None) {
        Counter a(spec, mode);
        count_adapter(a, "adapter." + std::to_string(block_index), spec.adapter_for(D), gh, gw, mode);
        adapters.insert(adapters.end(), a.entries.begin(), a.entries.end());
      }
      const bool peg_here = spec.posenc == PosEncKind::Peg && b == 0 &&
                            (s == 0 || spec.peg_placement == PegPlacement::EveryStage);
      if (peg_here) {
        Counter p(spec, mode);
        p.conv("peg." + std::to_string(s), D, D, 3, gh, gw, D);
        pegs.insert(pegs.end(), p.entries.begin(), p.entries.end());
      }
      ++block_index;
    }
  }
  c.entries.insert(c.entries.end(), adapters.begin(), adapters.end());
  c.entries.insert(c.entries.end(), pegs.begin(), pegs.end());

  const auto& dec = spec.decoder;
  const i64 Dt = dec.dim, Lk = gh * gw, C = spec.num_classes, Dm = dec.mask_dim;
  c.linear("decoder.image_proj", enc.stages.back().dim, Dt, Lk);
  for (int i = 0; i < dec.depth; ++i) {
    const std::string lp = "decoder.layers." + std::to_string(i);
    c.attention(lp + ".self_attn", Dt, C, C, true);
    c.norm(lp + ".norm1", Dt);
    c.attention(lp + ".token_to_image", Dt, C, Lk, true);
    c.norm(lp + ".norm2", Dt);
    c.linear(lp + ".mlp.fc1", Dt, dec.mlp_hidden, C, true, c.is_target("mlp"));
    c.linear(lp + ".mlp.fc2", dec.mlp_hidden, Dt, C, true, c.is_target("mlp"));
    c.norm(lp + ".norm3", Dt);
    c.attention(lp + ".image_to_token", Dt, Lk, C, true);
    c.norm(lp + ".norm4", Dt);
  }
  c.attention("decoder.final_attn", Dt, C, Lk, true);
  c.norm("decoder.final_norm", Dt);
  c.conv("decoder.projector.conv1", D0, Dm, 1, h0, w0);
  c.conv("decoder.projector.conv2", Dm, Dm, 3, 2 * h0, 2 * w0);
  c.add_param("tokens", C * Dt);
  c.add("head.hypernet.fc1", "linear", C * Dt * Dt, C * (Dt * Dt + Dt));
  c.add("head.hypernet.fc2", "linear", C * Dt * Dm, C * (Dm * Dt + Dm));
  c.add("head.logits", "linear", C * Dm * (2 * h0) * (2 * w0), 0);
  c.add_param("head.class_bias", C);

  MacsReport r;
  r.entries = std::move(c.entries);
  r.mode = mode;
  r.height = h;
  r.width = w;
  for (const auto& e : r.entries) {
    r.total_macs += e.macs;
    r.total_params += e.params;
  }
  return r;
}

ParamCensus param_census(const ModelConfig& spec, BlockMode mode) {
  // geometry does not affect parameter counts; use any valid input size
  const auto& enc = spec.encoder;
  i64 side = enc.patch_size;
  for (const auto& st : enc.stages)
    if (st.downsample) side *= 2;
  const MacsReport r = count_macs(spec, side, side, mode);
  ParamCensus out;
  for (const auto& e : r.entries) {
    out.total += e.params;
    (e.learnable ? out.learnable : out.frozen) += e.params;
  }
  return out;
}

TradeoffTable tradeoff_table(const std::vector<TradeoffRow>& rows) {
  TradeoffTable t;
  for (const auto& r : rows) {
    if (!r.miou) {
      t.warnings.push_back("row '" + r.name + "' has no mIoU and was omitted");
      continue;
    }
    t.rows.push_back({r, false});
  }
  std::stable_sort(t.rows.begin(), t.rows.end(), [](const auto& a, const auto& b) { return a.row.macs < b.row.macs; });
  for (auto& a : t.rows) {
    bool dominated = false;
    for (const auto& b : t.rows) {
      if (&a == &b) continue;
      const bool no_worse = b.row.macs <= a.row.macs && *b.row.miou >= *a.row.miou;
      const bool better = b.row.macs < a.row.macs || *b.row.miou > *a.row.miou;
      if (no_worse && better) {
        dominated = true;
        break;
      }
    }
    a.pareto = !dominated;
  }
  return t;
}

std::string TradeoffTable::format() const {
  std::ostringstream os;
  os << std::left << std::setw(20) << "config" << std::right << std::setw(14) << "MACs" << std::setw(12) << "params"
     << std::setw(10) << "mIoU" << "  pareto\n";
  for (const auto& r : rows)
    os << std::left << std::setw(20) << r.row.name << std::right << std::setw(14) << r.row.macs << std::setw(12) << r.row.params
       << std::setw(10) << std::fixed << std::setprecision(4) << *r.row.miou << (r.pareto ? "  *" : "") << "\n";
  for (const auto& w : warnings) os << "warning: " << w << "\n";
  return os.str();
}

std::string TradeoffTable::to_json() const {
  nlohmann::json j;
  j["rows"] = nlohmann::json::array();
  for (const auto& r : rows)
    j["rows"].push_back({{"name", r.row.name}, {"macs", r.row.macs}, {"params", r.row.params}, {"miou", *r.row.miou}, {"pareto", r.pareto}});
  j["warnings"] = warnings;
  return j.dump(2);
}

}  // namespace pfseg
