#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "ctdet/evaluation.hpp"
#include "ctdet/transfer.hpp"
#include "json.hpp"

namespace ctdet {

// Text starting with '{' is JSON. Anything else is read as
//
//   # comment
//   [section]
//   key = value
//
// where a value that parses as JSON (numbers, true/false, [lists], "strings")
// keeps that type and any other value is a bare string. Throws ConfigError.
nlohmann::json parse_config_text(const std::string& text);
nlohmann::json load_config_file(const std::filesystem::path& path);

enum class Precision { kSingle, kDouble };

const char* to_string(Precision p);
Precision parse_precision(const std::string& s);

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::size_t shots = 5;
  std::uint64_t trial = 0;
  Variant variant = Variant::kFull;
  Precision precision = Precision::kDouble;

  PretrainConfig pretrain;
  FinetuneConfig finetune;
  // Head modes given explicitly in the config; unset ones follow the variant.
  nlohmann::json head_overrides = nlohmann::json::object();
  CtConfig context;
  std::size_t test_scenes = kTestScenesPerTrial;
  std::size_t source_test_scenes = 200;
  EvalOptions eval;
  std::size_t incremental_steps = 400;
  double incremental_lr = 4e-3;

  TransferConfig transfer() const;
  // Episode and model seeds for this (seed, trial).
  EpisodeSpec episode(const Benchmark& bench) const;

  // Unknown sections or keys and malformed values throw ConfigError.
  static ExperimentConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

}  // namespace ctdet
