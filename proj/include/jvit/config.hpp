// SPDX-License-Identifier: Apache-2.0
//
// JSON run configuration. Keys are snake_case; an unknown key is an error
// that names the key.

#pragma once

#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>

#include "json.hpp"
#include "jvit/dataset.hpp"
#include "jvit/model.hpp"
#include "jvit/train.hpp"

namespace jvit {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Where images come from: a CIFAR-10 binary file or the synthetic generator.
struct DataSpec {
  enum class Kind { kCifar10, kSynthetic } kind = Kind::kSynthetic;
  std::filesystem::path path;  // cifar10
  SyntheticSpec synthetic;     // h/w/c/patch_size/num_classes follow the model
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataSpec data;
  std::optional<DataSpec> eval_data;
  std::filesystem::path output_dir;
  std::uint64_t init_seed = 0;
};

nlohmann::json to_json(const ModelConfig& c);
nlohmann::json to_json(const TrainConfig& c);
nlohmann::json to_json(const DataSpec& d);
nlohmann::json to_json(const RunConfig& c);

/// Missing keys keep their defaults; unknown keys and wrong types throw
/// ConfigError naming the key path (e.g. "train.jigsaw.gama").
ModelConfig model_from_json(const nlohmann::json& j, const std::string& where = "model");
TrainConfig train_from_json(const nlohmann::json& j, const std::string& where = "train");
DataSpec data_from_json(const nlohmann::json& j, const std::string& where = "data");
RunConfig run_from_json(const nlohmann::json& j);

/// Parses and validates a run config file; every error is a ConfigError.
RunConfig load_run_config(const std::filesystem::path& path);

/// "cifar10:<path>" or "synthetic:n=N,seed=S[,classes=K]".
DataSpec parse_data_spec(const std::string& text);

/// Materializes a data spec for the given model geometry.
Dataset load_dataset(const DataSpec& spec, const ModelConfig& model);

}  // namespace jvit
