// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits non-zero if any fails. Tolerances are pinned here.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "oracles.hpp"
#include "pfseg/analysis.hpp"
#include "pfseg/harness.hpp"
#include "pfseg/verify.hpp"

using namespace pfseg;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string measured;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ---------------------------------------------------------------------------
// Training runs shared by several criteria.

struct TrainedRun {
  SegModel<float> model;
  std::map<std::string, std::vector<float>> initial;
  Partition partition;
  double val_miou = 0;
  double seconds = 0;
};

constexpr std::uint64_t kSeeds[] = {1, 2, 3};

DatasetSpec data_spec(std::uint64_t seed) {
  DatasetSpec d;  // C=3, 64x64, 200 train, 50 val
  d.seed = seed;
  return d;
}

TrainedRun train_run(AdapterKind kind, PosEncKind posenc, std::uint64_t seed) {
  const auto t0 = Clock::now();
  ModelConfig mc;
  mc.seed = seed;
  mc.adapter.kind = kind;
  mc.posenc = posenc;
  TrainConfig tc;  // 30 epochs
  tc.seed = seed;
  const auto spec = data_spec(seed);
  const auto train_set = gen_dataset(spec, 0, spec.train_count);
  const auto val_set = gen_dataset(spec, 1, spec.val_count);
  TrainedRun r{SegModel<float>::make(mc), {}, {}, 0, 0};
  r.partition = freeze_partition(r.model);
  for (const auto& p : r.model.parameters()) r.initial[p.name].assign(p.tensor.data().begin(), p.tensor.data().end());
  const auto res = train(r.model, train_set, &val_set, tc);
  r.val_miou = res.history.back().val_miou;
  r.seconds = seconds_since(t0);
  std::printf("  trained %s/%s seed %llu: val mIoU %.4f (%.0f s)\n", to_string(kind), to_string(posenc),
              static_cast<unsigned long long>(seed), r.val_miou, r.seconds);
  std::fflush(stdout);
  return r;
}

double eval_at(const SegModel<float>& m, std::uint64_t seed, std::int64_t h, std::int64_t w) {
  auto spec = data_spec(seed);
  spec.height = h;
  spec.width = w;
  return evaluate(m, gen_dataset(spec, 1, spec.val_count)).miou();
}

// ---------------------------------------------------------------------------

Outcome reparam_exactness() {
  const auto t0 = Clock::now();
  VerifyOptions o;
  o.fusion_blocks = 200;
  const auto f32 = verify_fusion(o);
  o.float64 = true;
  const auto f64 = verify_fusion(o);
  const double secs = seconds_since(t0);
  return {f32.max_error <= 1e-5 && f64.max_error <= 1e-10 && secs < 60,
          fmt("float32 %.2e (<=1e-5), float64 %.2e (<=1e-10), %.1f s (<60 s)", f32.max_error, f64.max_error, secs)};
}

Outcome dcn_degenerate() {
  VerifyOptions o;
  o.dcn_instances = 50;
  const auto r = verify_dcn_degenerate(o);
  return {r.max_error <= 1e-6, fmt("max |dcn - conv| %.2e over 50 instances (<=1e-6)", r.max_error)};
}

Outcome gradients() {
  VerifyOptions o;
  o.float64 = true;
  o.grad_points = 10;
  const auto r = verify_grad(o);
  return {r.max_error <= 1e-4, fmt("worst rel err %.2e (<=1e-4), %s", r.max_error, r.detail.c_str())};
}

Outcome transparency() {
  VerifyOptions o;
  o.transparency_images = 10;
  const auto r = verify_transparency(o);
  return {r.passed && r.max_error == 0.0, fmt("max |adapted - frozen| %.1e on 10 images x {plain, hp, lw} (bitwise)", r.max_error)};
}

Outcome frozen_and_updated(const TrainedRun& run) {
  std::size_t frozen_changed = 0;
  std::map<std::string, bool> group_moved;
  auto group_of = [](const std::string& n) -> std::string {
    if (n.ends_with(".lora_A") || n.ends_with(".lora_B")) return "lora";
    return n.substr(0, n.find('.'));
  };
  const std::set<std::string> learn(run.partition.learnable.begin(), run.partition.learnable.end());
  for (const auto& p : run.model.parameters()) {
    const auto& before = run.initial.at(p.name);
    const bool same = std::equal(before.begin(), before.end(), p.tensor.data().begin());
    if (learn.count(p.name)) {
      group_moved.try_emplace(group_of(p.name), false);
      if (!same) group_moved[group_of(p.name)] = true;
    } else if (!same) {
      ++frozen_changed;
    }
  }
  std::string groups;
  bool all_moved = true;
  for (const auto& [g, moved] : group_moved) {
    groups += (groups.empty() ? "" : ", ") + g + (moved ? "" : "(unchanged)");
    all_moved = all_moved && moved;
  }
  return {frozen_changed == 0 && all_moved && group_moved.size() == 5,
          fmt("%zu/%zu frozen tensors changed; updated groups: %s", frozen_changed, run.partition.frozen.size(), groups.c_str())};
}

Outcome resolutions(const TrainedRun& peg_run, const TrainedRun& abs_run, std::uint64_t seed) {
  const std::pair<int, int> sizes[] = {{64, 64}, {96, 64}, {128, 128}};
  std::string text;
  bool ok = true;
  for (auto [h, w] : sizes) {
    const double p = eval_at(peg_run.model, seed, h, w), a = eval_at(abs_run.model, seed, h, w);
    const bool mismatched = !(h == 64 && w == 64);
    if (mismatched) ok = ok && p - a >= 0.02;
    text += fmt("%s%dx%d peg %.4f abs %.4f", text.empty() ? "" : "; ", h, w, p, a);
  }
  return {ok, text + " (peg - abs >= 2 points at mismatched sizes)"};
}

Outcome easy_suite(const std::vector<TrainedRun>& base, const std::vector<TrainedRun>& hp, const std::vector<TrainedRun>& lw) {
  auto mean = [](const std::vector<TrainedRun>& rs) {
    double s = 0;
    for (const auto& r : rs) s += r.val_miou;
    return 100.0 * s / static_cast<double>(rs.size());
  };
  double secs = 0;
  for (const auto* rs : {&base, &hp, &lw})
    for (const auto& r : *rs) secs += r.seconds;
  const double b = mean(base), h = mean(hp), l = mean(lw);
  const bool ok = h >= b + 10 && l >= b + 10 && h >= l - 1 && secs < 20 * 60;
  return {ok, fmt("mean over %zu seeds: baseline %.1f, hp %.1f, lw %.1f (adapters >= baseline+10, hp >= lw-1); %.0f s (<1200 s)",
                  base.size(), b, h, l, secs)};
}

Outcome macs_ordering() {
  auto total = [](AdapterKind k, BlockMode m) {
    ModelConfig c = ModelConfig::vanilla();
    c.adapter.kind = k;
    return count_macs(c, 64, 64, m).total_macs;
  };
  const auto base = total(AdapterKind::None, BlockMode::Deploy), plain = total(AdapterKind::Plain, BlockMode::Deploy);
  const auto lw_d = total(AdapterKind::LW, BlockMode::Deploy), lw_t = total(AdapterKind::LW, BlockMode::Train);
  const auto hp = total(AdapterKind::HP, BlockMode::Deploy);
  bool lora_ok = true;
  int targets = 0;
  const ModelConfig c;
  const auto report = count_macs(c, 64, 64, BlockMode::Train);
  for (const auto& e : report.entries) {
    if (e.kind != "lora") continue;
    ++targets;
    const auto* lin = report.find(e.name.substr(0, e.name.size() - 5));
    // base linear params = Din*Dout + Dout
    const bool fc1 = e.name.find("mlp.fc1") != std::string::npos, fc2 = e.name.find("mlp.fc2") != std::string::npos;
    const std::int64_t din = fc2 ? c.decoder.mlp_hidden : c.decoder.dim, dout = fc1 ? c.decoder.mlp_hidden : c.decoder.dim;
    lora_ok = lora_ok && lin && lin->params == din * dout + dout && e.params == c.decoder.lora_rank * (din + dout);
  }
  const bool ok = base < plain && plain < lw_d && lw_d < hp && lw_d < lw_t && lora_ok && targets > 0;
  return {ok, fmt("base %lld < plain %lld < lw(deploy) %lld < hp %lld; lw(train) %lld; LoRA r(Din+Dout) on %d targets: %s",
                  static_cast<long long>(base), static_cast<long long>(plain), static_cast<long long>(lw_d), static_cast<long long>(hp),
                  static_cast<long long>(lw_t), targets, lora_ok ? "ok" : "mismatch")};
}

Outcome miou_exact() {
  Rng rng(2024);
  int mismatches = 0;
  for (int t = 0; t < 1000; ++t) {
    const int C = 2 + static_cast<int>(rng.below(5));
    std::vector<std::int32_t> p(64), g(64);
    for (int i = 0; i < 64; ++i) {
      p[i] = static_cast<std::int32_t>(rng.below(C));
      g[i] = static_cast<std::int32_t>(rng.below(C));
    }
    mismatches += miou(p, g, C) != oracle::miou_brute(p, g, C);
  }
  const double hand = miou(std::vector<std::int32_t>{0, 0, 0, 1}, std::vector<std::int32_t>{0, 0, 1, 1}, 2);
  return {mismatches == 0 && std::abs(hand - 7.0 / 12.0) <= 1e-12, fmt("%d/1000 mismatches vs brute force; hand case %.15f (7/12 = %.15f, tol 1e-12)", mismatches, hand, 7.0 / 12.0)};
}

Outcome lora_merge() {
  VerifyOptions o;
  o.lora_probes = 50;
  const auto f32 = verify_lora_merge(o);
  o.float64 = true;
  const auto f64 = verify_lora_merge(o);
  return {f32.max_error <= 1e-6 && f64.max_error <= 1e-12,
          fmt("merged vs unmerged %.2e over 50 probes (<=1e-6); float64 incl. unmerge %.2e (<=1e-12)", f32.max_error, f64.max_error)};
}

}  // namespace

int main() {
  int failures = 0;
  int index = 0;
  auto report = [&](const char* name, const Outcome& o) {
    ++index;
    std::printf("[%2d/10] %-24s %s  %s\n", index, name, o.pass ? "PASS" : "FAIL", o.measured.c_str());
    std::fflush(stdout);
    failures += !o.pass;
  };

  report("reparam-exactness", reparam_exactness());
  report("dcn-degenerate", dcn_degenerate());
  report("gradients", gradients());
  report("transparency-at-init", transparency());

  std::vector<TrainedRun> base, hp, lw;
  for (auto s : kSeeds) {
    base.push_back(train_run(AdapterKind::None, PosEncKind::AbsInterp, s));
    hp.push_back(train_run(AdapterKind::HP, PosEncKind::Peg, s));
    lw.push_back(train_run(AdapterKind::LW, PosEncKind::Peg, s));
  }
  const auto lw_abs = train_run(AdapterKind::LW, PosEncKind::AbsInterp, kSeeds[0]);

  report("frozen-untouched", frozen_and_updated(hp.front()));
  report("resolution-transfer", resolutions(lw.front(), lw_abs, kSeeds[0]));
  report("easy-suite", easy_suite(base, hp, lw));
  report("macs-ordering", macs_ordering());
  report("miou-exact", miou_exact());
  report("lora-merge", lora_merge());

  std::printf("%d/10 criteria passed\n", 10 - failures);
  return failures == 0 ? 0 : 1;
}
