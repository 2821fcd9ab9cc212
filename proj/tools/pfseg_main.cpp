// pfseg command-line entry point.
//
// Exit codes: 0 success, 1 user error (bad flags, config, geometry, missing or
// corrupted files), 2 verification failure, 3 numeric failure.

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "pfseg/analysis.hpp"
#include "pfseg/checkpoint.hpp"
#include "pfseg/verify.hpp"

namespace fs = std::filesystem;
using namespace pfseg;

namespace {

constexpr int kOk = 0, kUserError = 1, kVerifyFailed = 2, kNumericError = 3;
constexpr const char* kOutEnv = "PFSEG_OUT_DIR";

// Flags shared by every command that assembles a run config.
struct ConfigFlags {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string adapter, hp_size, hp_wiring, posenc;
  int epochs = -1;
  std::int64_t seed = -1;
  bool paper_protocol = false;

  void add_to(CLI::App* app, bool training) {
    app->add_option("--config", config_path, "JSON run config (model/data/train sections)");
    app->add_option("--set", overrides, "Override a config key, e.g. model.adapter.scale=0.2 (repeatable)");
    app->add_option("--adapter", adapter, "none|plain|hp|lw");
    app->add_option("--hp-size", hp_size, "Single-rate HP variant: s (12), m (24), l (36)");
    app->add_option("--hp-wiring", hp_wiring, "sequential|parallel");
    app->add_option("--posenc", posenc, "peg|abs-interp|none");
    app->add_option("--seed", seed, "Seed for model, data and training");
    if (training) {
      app->add_option("--epochs", epochs, "Training epochs");
      app->add_flag("--paper-protocol", paper_protocol, "Use the 200-epoch schedule");
    }
  }

  RunConfig resolve() const {
    RunConfig rc;
    if (!config_path.empty()) {
      if (!fs::exists(config_path)) fail(ErrorKind::Io, "config file '" + config_path + "' does not exist");
      rc = RunConfig::from_json(read_json_file(config_path));
    }
    if (!adapter.empty()) rc.model.adapter.kind = parse_adapter_kind(adapter);
    if (!hp_size.empty()) {
      if (hp_size.size() != 1) fail(ErrorKind::Config, "--hp-size expects s, m or l");
      rc.model.adapter.hp_dilation_rates = {hp_size_rate(hp_size[0])};
    }
    if (!hp_wiring.empty()) rc.model.adapter.hp_wiring = parse_hp_wiring(hp_wiring);
    if (!posenc.empty()) rc.model.posenc = parse_posenc_kind(posenc);
    if (paper_protocol) rc.train.epochs = 200;
    if (epochs >= 0) rc.train.epochs = epochs;
    if (seed >= 0) {
      rc.model.seed = rc.data.seed = rc.train.seed = static_cast<std::uint64_t>(seed);
    }
    if (!overrides.empty()) {
      Json doc = rc.to_json();
      for (const auto& o : overrides) apply_override(doc, o);
      rc = RunConfig::from_json(doc);
    }
    rc.validate();
    return rc;
  }
};

std::pair<std::int64_t, std::int64_t> parse_hw(const std::string& text) {
  const auto x = text.find('x');
  try {
    if (x != std::string::npos) return {std::stoll(text.substr(0, x)), std::stoll(text.substr(x + 1))};
  } catch (const std::exception&) {
  }
  fail(ErrorKind::Config, "--hw expects HxW, got '" + text + "'");
}

fs::path output_dir(const std::string& flag, const std::string& fallback_name) {
  if (!flag.empty()) return flag;
  const char* env = std::getenv(kOutEnv);
  return fs::path(env && *env ? env : "runs") / fallback_name;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::Io, "cannot write '" + path.string() + "'");
  out << text;
}

void write_manifest(const fs::path& dir, const std::string& command, const Json& config, std::uint64_t seed, const Json& extra = {}) {
  Json m{{"command", command}, {"library_version", PFSEG_VERSION}, {"seed", seed}, {"config", config}};
  if (!extra.is_null()) m["details"] = extra;
  write_text(dir / "manifest.json", m.dump(2) + "\n");
}

std::string deploy_label(const ModelConfig& c) { return to_string(c.adapter.kind); }

// MACs of the model as it would be deployed: LW fused, LoRA merged.
Json efficiency(const ModelConfig& c, std::int64_t h, std::int64_t w) {
  const auto train = count_macs(c, h, w, BlockMode::Train);
  const auto deploy = count_macs(c, h, w, BlockMode::Deploy);
  const auto census = param_census(c);
  return {{"height", h},
          {"width", w},
          {"macs_train", train.total_macs},
          {"macs_deploy", deploy.total_macs},
          {"params_total", census.total},
          {"params_learnable", census.learnable},
          {"params_frozen", census.frozen},
          {"params_deploy", deploy.total_params}};
}

RunConfig run_config_of(const Checkpoint& ckpt) {
  RunConfig rc;
  if (ckpt.metadata.count("run_config")) rc = RunConfig::from_json(parse_json(ckpt.metadata.at("run_config"), "checkpoint run config"));
  if (ckpt.metadata.count("config")) rc.model = model_config_from_json(parse_json(ckpt.metadata.at("config"), "checkpoint config"));
  rc.data.num_classes = rc.model.num_classes;
  return rc;
}

bool has_kind(const SegModel<float>& m, AdapterKind k) {
  for (const auto* a : m.adapters())
    if (a->kind() == k) return true;
  return false;
}

double probe_divergence(const SegModel<float>& a, const SegModel<float>& b, int probes, std::int64_t h, std::int64_t w, std::uint64_t seed) {
  NoGradGuard guard;
  Rng rng(seed);
  double worst = 0;
  for (int i = 0; i < probes; ++i) {
    auto x = Tensor<float>::uniform({1, 3, h, w}, rng, 0.0, 1.0);
    worst = std::max(worst, max_abs_diff(a.forward(x), b.forward(x)));
  }
  return worst;
}

// ---------------------------------------------------------------------------

int cmd_train(const ConfigFlags& flags, const std::string& out_flag, bool quiet) {
  const RunConfig rc = flags.resolve();
  const auto dir = output_dir(out_flag, "train-" + deploy_label(rc.model) + "-s" + std::to_string(rc.model.seed));
  const auto t0 = std::chrono::steady_clock::now();
  const Dataset train_set = gen_dataset(rc.data, 0, rc.data.train_count);
  const Dataset val_set = gen_dataset(rc.data, 1, rc.data.val_count);
  auto model = SegModel<float>::make(rc.model);
  const Partition part = freeze_partition(model);

  fs::create_directories(dir);
  std::ofstream metrics(dir / "metrics.jsonl");
  if (!metrics) fail(ErrorKind::Io, "cannot write metrics in '" + dir.string() + "'");
  const auto result = train(model, train_set, &val_set, rc.train, [&](const EpochRecord& r) {
    Json line{{"epoch", r.epoch}, {"loss", r.loss}, {"lr", r.lr}, {"val_miou", r.val_miou >= 0 ? Json(r.val_miou) : Json(nullptr)}};
    metrics << line.dump() << "\n";
    metrics.flush();
    if (!quiet) std::cerr << "epoch " << r.epoch << " loss " << r.loss << (r.val_miou >= 0 ? " val_mIoU " + std::to_string(r.val_miou) : "") << "\n";
  });

  Checkpoint ckpt = to_checkpoint(model);
  ckpt.metadata["run_config"] = rc.to_json().dump();
  save_checkpoint((dir / "checkpoint.pfs").string(), ckpt);

  Json summary{{"name", deploy_label(rc.model)},
               {"epochs", rc.train.epochs},
               {"steps", result.steps},
               {"learnable_tensors", part.learnable.size()},
               {"frozen_tensors", part.frozen.size()},
               {"efficiency", efficiency(rc.model, rc.data.height, rc.data.width)}};
  if (!result.history.empty()) {
    summary["final_loss"] = result.history.back().loss;
    summary["val_miou"] = result.history.back().val_miou >= 0 ? Json(result.history.back().val_miou) : Json(nullptr);
  }
  write_text(dir / "summary.json", summary.dump(2) + "\n");
  write_manifest(dir, "train", rc.to_json(), rc.model.seed);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cout << "trained " << deploy_label(rc.model) << " for " << rc.train.epochs << " epochs";
  if (summary.contains("val_miou") && !summary["val_miou"].is_null()) std::cout << ", val mIoU " << summary["val_miou"].get<double>();
  std::cout << " -> " << dir.string() << "\n";
  if (!quiet) std::cerr << "elapsed " << secs << " s\n";
  return kOk;
}

int cmd_evaluate(const std::string& ckpt_path, const std::string& mode, const std::string& hw, int count, const std::string& out_flag) {
  if (mode != "train" && mode != "deploy") fail(ErrorKind::Config, "--mode must be train or deploy");
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  RunConfig rc = run_config_of(ckpt);
  auto model = model_from_checkpoint<float>(ckpt);
  if (mode == "deploy") model = model.fused().lora_merged();
  if (!hw.empty()) std::tie(rc.data.height, rc.data.width) = parse_hw(hw);
  const auto P = rc.model.encoder.patch_size;
  if (rc.data.height % P != 0 || rc.data.width % P != 0)
    fail(ErrorKind::InvalidGeometry, "evaluation resolution " + std::to_string(rc.data.height) + "x" + std::to_string(rc.data.width) +
                                         " is not divisible by patch size " + std::to_string(P));
  const Dataset data = gen_dataset(rc.data, 1, count > 0 ? count : rc.data.val_count);
  const auto acc = evaluate(model, data);
  Json per_class = Json::array();
  for (double v : acc.per_class()) per_class.push_back(std::isnan(v) ? Json(nullptr) : Json(v));
  Json report{{"checkpoint", ckpt_path}, {"mode", mode},       {"height", rc.data.height}, {"width", rc.data.width},
              {"samples", data.samples.size()}, {"miou", acc.miou()}, {"per_class_iou", per_class}};
  std::cout << report.dump(2) << "\n";
  if (!out_flag.empty()) {
    fs::create_directories(out_flag);
    write_text(fs::path(out_flag) / "eval.json", report.dump(2) + "\n");
    write_manifest(out_flag, "evaluate", rc.to_json(), rc.model.seed, {{"checkpoint", ckpt_path}, {"mode", mode}});
  }
  return kOk;
}

int cmd_fuse(const std::string& ckpt_path, std::string out_path, int probes, std::uint64_t seed) {
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const RunConfig rc = run_config_of(ckpt);
  if (out_path.empty()) out_path = (fs::path(ckpt_path).parent_path() / "deploy.pfs").string();
  auto model = model_from_checkpoint<float>(ckpt);
  if (has_kind(model, AdapterKind::HP)) fail(ErrorKind::Contract, "HP adapter is not fusable");
  if (ckpt.metadata.count("mode") && ckpt.metadata.at("mode") == "deploy") {
    std::cout << "notice: checkpoint is already in deploy mode; nothing to fuse\n";
    if (fs::absolute(out_path) != fs::absolute(ckpt_path)) save_checkpoint(out_path, ckpt);
    return kOk;
  }
  if (!has_kind(model, AdapterKind::LW)) {
    std::cout << "notice: checkpoint has no LW adapter; nothing to fuse\n";
    if (fs::absolute(out_path) != fs::absolute(ckpt_path)) save_checkpoint(out_path, ckpt);
    return kOk;
  }
  const auto fused = model.fused();
  const double div = probe_divergence(model, fused, probes, rc.data.height, rc.data.width, seed);
  const double tol = 1e-5;
  Checkpoint out = to_checkpoint(fused);
  for (const auto& key : {"run_config"})
    if (ckpt.metadata.count(key)) out.metadata[key] = ckpt.metadata.at(key);
  Json report{{"input", ckpt_path}, {"output", out_path}, {"probes", probes}, {"max_abs_divergence", div}, {"tolerance", tol}};
  std::cout << report.dump(2) << "\n";
  if (!(div <= tol)) {
    std::cerr << "fusion divergence " << div << " exceeds " << tol << "; deploy checkpoint not written\n";
    return kVerifyFailed;
  }
  save_checkpoint(out_path, out);
  write_text(fs::path(out_path).replace_extension(".fuse.json"), report.dump(2) + "\n");
  return kOk;
}

int cmd_merge_lora(const std::string& ckpt_path, std::string out_path, int probes, std::uint64_t seed) {
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const RunConfig rc = run_config_of(ckpt);
  if (out_path.empty()) out_path = (fs::path(ckpt_path).parent_path() / "merged.pfs").string();
  auto model = model_from_checkpoint<float>(ckpt);
  if (model.is_deployed() || !rc.model.decoder.lora || (ckpt.metadata.count("lora") && ckpt.metadata.at("lora") == "merged")) {
    std::cout << "notice: no separate LoRA factors to merge\n";
    if (fs::absolute(out_path) != fs::absolute(ckpt_path)) save_checkpoint(out_path, ckpt);
    return kOk;
  }
  const auto merged = model.lora_merged();
  const double div = probe_divergence(model, merged, probes, rc.data.height, rc.data.width, seed);
  const double tol = 1e-5;
  Checkpoint out = to_checkpoint(merged);
  if (ckpt.metadata.count("run_config")) out.metadata["run_config"] = ckpt.metadata.at("run_config");
  Json report{{"input", ckpt_path}, {"output", out_path}, {"probes", probes}, {"max_abs_divergence", div}, {"tolerance", tol}};
  std::cout << report.dump(2) << "\n";
  if (!(div <= tol)) return kVerifyFailed;
  save_checkpoint(out_path, out);
  return kOk;
}

int cmd_macs(const ConfigFlags& flags, const std::string& hw, const std::string& mode, bool as_json) {
  if (mode != "train" && mode != "deploy") fail(ErrorKind::Config, "--mode must be train or deploy");
  const RunConfig rc = flags.resolve();
  auto [h, w] = hw.empty() ? std::pair{rc.data.height, rc.data.width} : parse_hw(hw);
  const auto report = count_macs(rc.model, h, w, mode == "train" ? BlockMode::Train : BlockMode::Deploy);
  const auto census = param_census(rc.model, report.mode);
  if (as_json) {
    Json entries = Json::array();
    for (const auto& e : report.entries)
      entries.push_back({{"name", e.name}, {"kind", e.kind}, {"macs", e.macs}, {"params", e.params}, {"learnable", e.learnable}});
    Json j{{"mode", mode}, {"height", h}, {"width", w}, {"total_macs", report.total_macs}, {"total_params", report.total_params},
           {"learnable_params", census.learnable}, {"frozen_params", census.frozen}, {"entries", entries}};
    std::cout << j.dump(2) << "\n";
    return kOk;
  }
  std::printf("%-52s %-9s %14s %10s\n", "layer", "kind", "MACs", "params");
  for (const auto& e : report.entries)
    std::printf("%-52s %-9s %14lld %10lld%s\n", e.name.c_str(), e.kind.c_str(), static_cast<long long>(e.macs),
                static_cast<long long>(e.params), e.learnable ? "  L" : "");
  std::printf("total (%s, %lldx%lld): %lld MACs, %lld params (%lld learnable, %lld frozen)\n", mode.c_str(), static_cast<long long>(h),
              static_cast<long long>(w), static_cast<long long>(report.total_macs), static_cast<long long>(report.total_params),
              static_cast<long long>(census.learnable), static_cast<long long>(census.frozen));
  return kOk;
}

int cmd_compare(const std::vector<std::string>& runs, const std::string& out_flag) {
  std::vector<TradeoffRow> rows;
  for (const auto& r : runs) {
    const fs::path summary_path = fs::is_directory(r) ? fs::path(r) / "summary.json" : fs::path(r);
    const Json s = read_json_file(summary_path.string());
    TradeoffRow row;
    row.name = s.value("name", fs::path(r).filename().string());
    if (fs::is_directory(r)) row.name = fs::path(r).filename().string();
    const Json& eff = s.at("efficiency");
    const bool lw = s.value("name", "") == "lw";
    row.macs = lw ? eff.at("macs_deploy").get<std::int64_t>() : eff.at("macs_train").get<std::int64_t>();
    row.params = (lw ? eff.at("params_deploy") : eff.at("params_total")).get<std::int64_t>();
    if (s.contains("val_miou") && s.at("val_miou").is_number()) row.miou = s.at("val_miou").get<double>();
    rows.push_back(row);
  }
  if (rows.size() < 2) fail(ErrorKind::Config, "compare needs at least two runs");
  const auto table = tradeoff_table(rows);
  std::cout << table.format();
  if (!out_flag.empty()) {
    fs::create_directories(out_flag);
    write_text(fs::path(out_flag) / "compare.json", table.to_json() + "\n");
  }
  return kOk;
}

int cmd_verify(bool float64, bool perturb, std::uint64_t seed, bool as_json) {
  VerifyOptions o;
  o.float64 = float64;
  o.perturb_fused = perturb;
  o.seed = seed;
  const auto results = run_verify(o);
  bool ok = true;
  for (const auto& r : results) ok = ok && r.passed;
  if (as_json) {
    Json j = Json::array();
    for (const auto& r : results)
      j.push_back({{"suite", r.name}, {"passed", r.passed}, {"max_error", r.max_error}, {"tolerance", r.tolerance}, {"detail", r.detail}});
    std::cout << j.dump(2) << "\n";
  } else {
    std::cout << format_results(results);
  }
  return ok ? kOk : kVerifyFailed;
}

void write_ppm(const fs::path& path, const SyntheticSample& s) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::Io, "cannot write '" + path.string() + "'");
  out << "P6\n" << s.width << " " << s.height << "\n255\n";
  const auto plane = s.height * s.width;
  for (std::int64_t p = 0; p < plane; ++p)
    for (int ch = 0; ch < 3; ++ch) out.put(static_cast<char>(std::lround(255.0 * s.image[static_cast<std::size_t>(ch * plane + p)])));
}

void write_pgm(const fs::path& path, const SyntheticSample& s, int num_classes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::Io, "cannot write '" + path.string() + "'");
  out << "P5\n" << s.width << " " << s.height << "\n255\n";
  for (auto v : s.mask) out.put(static_cast<char>(v * (255 / std::max(1, num_classes - 1))));
}

int cmd_gen_data(const ConfigFlags& flags, const std::string& out_flag, const std::string& split) {
  if (split != "train" && split != "val" && split != "both") fail(ErrorKind::Config, "--split must be train, val or both");
  const RunConfig rc = flags.resolve();
  const auto dir = output_dir(out_flag, "data-s" + std::to_string(rc.data.seed));
  fs::create_directories(dir);
  for (int s = 0; s < 2; ++s) {
    const std::string name = s == 0 ? "train" : "val";
    if (split != "both" && split != name) continue;
    const Dataset d = gen_dataset(rc.data, s, s == 0 ? rc.data.train_count : rc.data.val_count);
    fs::create_directories(dir / name);
    for (std::size_t i = 0; i < d.samples.size(); ++i) {
      char stem[32];
      std::snprintf(stem, sizeof stem, "%04zu", i);
      write_ppm(dir / name / (std::string(stem) + ".ppm"), d.samples[i]);
      write_pgm(dir / name / (std::string(stem) + "_mask.pgm"), d.samples[i], rc.data.num_classes);
    }
  }
  write_text(dir / "data.json", to_json(rc.data).dump(2) + "\n");
  write_manifest(dir, "gen-data", rc.to_json(), rc.data.seed);
  std::cout << "wrote dataset to " << dir.string() << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prompt-free parameter-efficient segmentation toolkit"};
  app.set_version_flag("--version", std::string(PFSEG_VERSION));
  app.require_subcommand(1);

  ConfigFlags train_flags, macs_flags, data_flags;
  std::string out, ckpt, mode = "train", hw, split = "both";
  int count = 0, probes = 32;
  std::int64_t seed = 0;
  bool quiet = false, float64 = false, perturb = false, as_json = false;
  std::vector<std::string> runs;

  auto* train_cmd = app.add_subcommand("train", "Train the learnable partition on synthetic data");
  train_flags.add_to(train_cmd, true);
  train_cmd->add_option("--out", out, std::string("Output directory (default: $") + kOutEnv + "/<run>)");
  train_cmd->add_flag("--quiet", quiet, "No per-epoch progress on stderr");

  auto* eval_cmd = app.add_subcommand("evaluate", "mIoU of a checkpoint on held-out synthetic data");
  eval_cmd->add_option("--checkpoint", ckpt, "Checkpoint file")->required();
  eval_cmd->add_option("--mode", mode, "train|deploy");
  eval_cmd->add_option("--hw", hw, "Evaluation resolution HxW");
  eval_cmd->add_option("--count", count, "Number of samples (default: data.val_count)");
  eval_cmd->add_option("--out", out, "Directory for eval.json and manifest");

  auto* fuse_cmd = app.add_subcommand("fuse", "Fuse LW adapters into deploy form");
  fuse_cmd->add_option("--checkpoint", ckpt, "Train-mode checkpoint")->required();
  fuse_cmd->add_option("--out", out, "Deploy checkpoint path (default: deploy.pfs beside the input)");
  fuse_cmd->add_option("--probes", probes, "Random inputs for the divergence report");
  fuse_cmd->add_option("--seed", seed, "Probe seed");

  auto* merge_cmd = app.add_subcommand("merge-lora", "Merge LoRA deltas into the decoder weights");
  merge_cmd->add_option("--checkpoint", ckpt, "Checkpoint file")->required();
  merge_cmd->add_option("--out", out, "Merged checkpoint path (default: merged.pfs beside the input)");
  merge_cmd->add_option("--probes", probes, "Random inputs for the divergence report");
  merge_cmd->add_option("--seed", seed, "Probe seed");

  auto* macs_cmd = app.add_subcommand("macs", "MACs / parameter report for a config");
  macs_flags.add_to(macs_cmd, false);
  macs_cmd->add_option("--hw", hw, "Input resolution HxW (default: data size)");
  macs_cmd->add_option("--mode", mode, "train|deploy");
  macs_cmd->add_flag("--json", as_json, "Machine-readable output");

  auto* compare_cmd = app.add_subcommand("compare", "Trade-off table over finished runs");
  compare_cmd->add_option("runs", runs, "Run directories (or summary.json files)")->required();
  compare_cmd->add_option("--out", out, "Directory for compare.json");

  auto* verify_cmd = app.add_subcommand("verify", "Run the invariant suites");
  verify_cmd->add_flag("--float64", float64, "Double precision with tighter tolerances");
  verify_cmd->add_flag("--perturb-fused", perturb, "Test mode: corrupt fused kernels (fusion suite must fail)");
  verify_cmd->add_option("--seed", seed, "Seed for the random instances");
  verify_cmd->add_flag("--json", as_json, "Machine-readable output");

  auto* data_cmd = app.add_subcommand("gen-data", "Write the synthetic dataset as PPM/PGM files");
  data_flags.add_to(data_cmd, false);
  data_cmd->add_option("--out", out, "Output directory");
  data_cmd->add_option("--split", split, "train|val|both");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUserError;
  }

  try {
    if (*train_cmd) return cmd_train(train_flags, out, quiet);
    if (*eval_cmd) return cmd_evaluate(ckpt, mode, hw, count, out);
    if (*fuse_cmd) return cmd_fuse(ckpt, out, probes, static_cast<std::uint64_t>(seed));
    if (*merge_cmd) return cmd_merge_lora(ckpt, out, probes, static_cast<std::uint64_t>(seed));
    if (*macs_cmd) return cmd_macs(macs_flags, hw, mode, as_json);
    if (*compare_cmd) return cmd_compare(runs, out);
    if (*verify_cmd) return cmd_verify(float64, perturb, static_cast<std::uint64_t>(seed), as_json);
    if (*data_cmd) return cmd_gen_data(data_flags, out, split);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.kind() == ErrorKind::Numeric ? kNumericError : kUserError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUserError;
  }
  return kUserError;
}
