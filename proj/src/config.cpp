#include "pfseg/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace pfseg {

namespace {

// Reads known keys of an object, rejecting anything else.
class Reader {
 public:
  Reader(const Json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j.is_object()) fail(ErrorKind::Config, where_ + ": expected an object");
  }
  ~Reader() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) fail(ErrorKind::Config, where_ + ": unknown key '" + it.key() + "'");
  }

  template <typename V>
  void get(const char* key, V& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).template get<V>();
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::Config, where_ + "." + key + ": " + e.what());
    }
  }
  const Json* sub(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }
  std::string path(const char* key) const { return where_ + "." + key; }

 private:
  const Json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

}  // namespace

Json to_json(const ModelConfig& c) {
  Json stages = Json::array();
  for (const auto& s : c.encoder.stages)
    stages.push_back({{"depth", s.depth}, {"dim", s.dim}, {"downsample", s.downsample}, {"heads", s.heads}});
  const auto& a = c.adapter;
  const auto& d = c.decoder;
  return {
      {"num_classes", c.num_classes},
      {"seed", c.seed},
      {"encoder", {{"patch_size", c.encoder.patch_size}, {"in_channels", c.encoder.in_channels}, {"mlp_ratio", c.encoder.mlp_ratio}, {"stages", stages}}},
      {"decoder",
       {{"dim", d.dim}, {"depth", d.depth}, {"heads", d.heads}, {"mlp_hidden", d.mlp_hidden}, {"mask_dim", d.mask_dim},
        {"lora", d.lora}, {"lora_rank", d.lora_rank}, {"lora_alpha", d.lora_alpha}, {"lora_targets", d.lora_targets}}},
      {"adapter",
       {{"kind", to_string(a.kind)}, {"bottleneck_dim", a.bottleneck_dim}, {"scale", a.scale}, {"hp_dilation_rates", a.hp_dilation_rates},
        {"hp_wiring", to_string(a.hp_wiring)}, {"lw_branches", a.lw_branches}, {"branch_pattern", a.branch_pattern}, {"dr_scale", a.dr_scale}}},
      {"posenc", to_string(c.posenc)},
      {"peg_placement", to_string(c.peg_placement)},
      {"abs_pe_grid", c.abs_pe_grid},
      {"abs_pe_std", c.abs_pe_std},
      {"tokens_learnable", c.tokens_learnable},
      {"head_trainable", c.head_trainable},
  };
}

ModelConfig model_config_from_json(const Json& j) {
  ModelConfig c;
  Reader r(j, "model");
  r.get("num_classes", c.num_classes);
  r.get("seed", c.seed);
  if (const Json* e = r.sub("encoder")) {
    Reader er(*e, r.path("encoder"));
    er.get("patch_size", c.encoder.patch_size);
    er.get("in_channels", c.encoder.in_channels);
    er.get("mlp_ratio", c.encoder.mlp_ratio);
    if (const Json* st = er.sub("stages")) {
      if (!st->is_array()) fail(ErrorKind::Config, "model.encoder.stages: expected an array");
      c.encoder.stages.clear();
      for (std::size_t i = 0; i < st->size(); ++i) {
        StageConfig s;
        Reader sr(st->at(i), "model.encoder.stages[" + std::to_string(i) + "]");
        sr.get("depth", s.depth);
        sr.get("dim", s.dim);
        sr.get("downsample", s.downsample);
        sr.get("heads", s.heads);
        c.encoder.stages.push_back(s);
      }
    }
  }
  if (const Json* d = r.sub("decoder")) {
    Reader dr(*d, r.path("decoder"));
    dr.get("dim", c.decoder.dim);
    dr.get("depth", c.decoder.depth);
    dr.get("heads", c.decoder.heads);
    dr.get("mlp_hidden", c.decoder.mlp_hidden);
    dr.get("mask_dim", c.decoder.mask_dim);
    dr.get("lora", c.decoder.lora);
    dr.get("lora_rank", c.decoder.lora_rank);
    dr.get("lora_alpha", c.decoder.lora_alpha);
    dr.get("lora_targets", c.decoder.lora_targets);
  }
  if (const Json* a = r.sub("adapter")) {
    Reader ar(*a, r.path("adapter"));
    std::string kind = to_string(c.adapter.kind), wiring = to_string(c.adapter.hp_wiring);
    ar.get("kind", kind);
    ar.get("hp_wiring", wiring);
    c.adapter.kind = parse_adapter_kind(kind);
    c.adapter.hp_wiring = parse_hp_wiring(wiring);
    ar.get("bottleneck_dim", c.adapter.bottleneck_dim);
    ar.get("scale", c.adapter.scale);
    ar.get("hp_dilation_rates", c.adapter.hp_dilation_rates);
    ar.get("lw_branches", c.adapter.lw_branches);
    ar.get("branch_pattern", c.adapter.branch_pattern);
    ar.get("dr_scale", c.adapter.dr_scale);
  }
  std::string posenc = to_string(c.posenc), placement = to_string(c.peg_placement);
  r.get("posenc", posenc);
  r.get("peg_placement", placement);
  c.posenc = parse_posenc_kind(posenc);
  c.peg_placement = parse_peg_placement(placement);
  r.get("abs_pe_grid", c.abs_pe_grid);
  r.get("abs_pe_std", c.abs_pe_std);
  r.get("tokens_learnable", c.tokens_learnable);
  r.get("head_trainable", c.head_trainable);
  return c;
}

Json to_json(const DatasetSpec& c) {
  return {{"num_classes", c.num_classes}, {"height", c.height}, {"width", c.width}, {"train_count", c.train_count},
          {"val_count", c.val_count}, {"seed", c.seed}, {"wobble", c.gen.wobble}, {"noise", c.gen.noise},
          {"allow_ribbons", c.gen.allow_ribbons}};
}

DatasetSpec dataset_spec_from_json(const Json& j) {
  DatasetSpec c;
  Reader r(j, "data");
  r.get("num_classes", c.num_classes);
  r.get("height", c.height);
  r.get("width", c.width);
  r.get("train_count", c.train_count);
  r.get("val_count", c.val_count);
  r.get("seed", c.seed);
  r.get("wobble", c.gen.wobble);
  r.get("noise", c.gen.noise);
  r.get("allow_ribbons", c.gen.allow_ribbons);
  return c;
}

Json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"lr0", c.lr0},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"adam_eps", c.adam_eps},
          {"seed", c.seed},
          {"eval_every", c.eval_every},
          {"augment",
           {{"crop", c.augment.crop}, {"hflip_prob", c.augment.hflip_prob}, {"rot90", c.augment.rot90}, {"rotation_deg", c.augment.rotation_deg}}}};
}

TrainConfig train_config_from_json(const Json& j) {
  TrainConfig c;
  Reader r(j, "train");
  r.get("epochs", c.epochs);
  r.get("batch_size", c.batch_size);
  r.get("lr0", c.lr0);
  r.get("beta1", c.beta1);
  r.get("beta2", c.beta2);
  r.get("adam_eps", c.adam_eps);
  r.get("seed", c.seed);
  r.get("eval_every", c.eval_every);
  if (const Json* a = r.sub("augment")) {
    Reader ar(*a, r.path("augment"));
    ar.get("crop", c.augment.crop);
    ar.get("hflip_prob", c.augment.hflip_prob);
    ar.get("rot90", c.augment.rot90);
    ar.get("rotation_deg", c.augment.rotation_deg);
  }
  return c;
}

Json RunConfig::to_json() const { return {{"model", pfseg::to_json(model)}, {"data", pfseg::to_json(data)}, {"train", pfseg::to_json(train)}}; }

RunConfig RunConfig::from_json(const Json& j) {
  RunConfig c;
  Reader r(j, "config");
  if (const Json* m = r.sub("model")) c.model = model_config_from_json(*m);
  if (const Json* d = r.sub("data")) c.data = dataset_spec_from_json(*d);
  if (const Json* t = r.sub("train")) c.train = train_config_from_json(*t);
  return c;
}

void RunConfig::validate() const {
  model.validate();
  if (data.num_classes != model.num_classes)
    fail(ErrorKind::Config, "data.num_classes (" + std::to_string(data.num_classes) + ") differs from model.num_classes (" +
                                std::to_string(model.num_classes) + ")");
  if (data.height < 16 || data.width < 16) fail(ErrorKind::Config, "data height/width must be >= 16");
  if (data.train_count < 0 || data.val_count < 0) fail(ErrorKind::Config, "sample counts must be >= 0");
  if (train.augment.crop < 0) fail(ErrorKind::Config, "train.augment.crop must be >= 0");
  const auto p = model.encoder.patch_size;
  const auto side = train.augment.crop > 0 ? train.augment.crop : std::min(data.height, data.width);
  if (side % p != 0) fail(ErrorKind::Config, "training resolution " + std::to_string(side) + " is not divisible by patch size " + std::to_string(p));
  if (train.augment.crop == 0 && train.augment.rot90 && data.height != data.width)
    fail(ErrorKind::Config, "rot90 augmentation without cropping needs square images");
}

Json parse_json(const std::string& text, const std::string& source) {
  try {
    return Json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Config, source + ": " + e.what());
  }
}

Json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Io, "cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_json(ss.str(), path);
}

void apply_override(Json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) fail(ErrorKind::Config, "override '" + assignment + "' must look like key.path=value");
  const std::string path = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  Json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object() || !node->contains(key)) fail(ErrorKind::Config, "override: unknown key '" + path + "'");
    node = &(*node)[key];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  Json value;
  try {
    value = Json::parse(text);
  } catch (const nlohmann::json::exception&) {
    value = text;
  }
  *node = value;
}

}  // namespace pfseg
