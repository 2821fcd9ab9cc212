#pragma once

// JSON (de)serialization of model, data and training configs.
//
// A run config document has three sections:
//   { "model": {...}, "data": {...}, "train": {...} }
// Missing keys take the defaults of the corresponding struct; unknown keys are
// rejected. Overrides use dotted paths, e.g. "model.adapter.kind=lw".

#include <string>

#include <json.hpp>

#include "pfseg/harness.hpp"

namespace pfseg {

using Json = nlohmann::ordered_json;

Json to_json(const ModelConfig& c);
Json to_json(const DatasetSpec& c);
Json to_json(const TrainConfig& c);

ModelConfig model_config_from_json(const Json& j);
DatasetSpec dataset_spec_from_json(const Json& j);
TrainConfig train_config_from_json(const Json& j);

struct RunConfig {
  ModelConfig model;
  DatasetSpec data;
  TrainConfig train;

  Json to_json() const;
  static RunConfig from_json(const Json& j);
  void validate() const;
};

/// Parses a JSON document; errors carry the source name.
Json parse_json(const std::string& text, const std::string& source);
Json read_json_file(const std::string& path);

/// Applies "a.b.c=value". The value is read as JSON when it parses, else as a
/// string. The path must name an existing key.
void apply_override(Json& doc, const std::string& assignment);

}  // namespace pfseg
