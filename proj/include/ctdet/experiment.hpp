#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ctdet/config.hpp"
#include "ctdet/incremental.hpp"

namespace ctdet {

struct SourceModel {
  DetectorParams<float> params;
  bool from_cache = false;
  std::vector<TrainLogRow> log;  // empty when loaded
};

// Reuses `cache` when it holds a detector pretrained with the same settings;
// otherwise pretrains and (if a path is given) writes the checkpoint there.
SourceModel obtain_source_detector(const ExperimentConfig& config,
                                   const std::optional<std::filesystem::path>& cache,
                                   const std::optional<std::filesystem::path>& log_path = {});

// Loads a checkpoint written by obtain_source_detector, whatever settings it
// was pretrained with. Throws FileError.
DetectorParams<float> load_source_detector(const std::filesystem::path& path);

// Source-domain mAP on the fixed held-out source scenes.
EvalReport evaluate_source(const DetectorParams<float>& params, const ExperimentConfig& config);

struct FewShotRun {
  FewShotModel<float> model;
  EvalReport report;  // metadata holds the resolved config
  std::vector<TrainLogRow> log;
};

// Samples the (seed, trial) episode, fine-tunes config.variant and evaluates
// it on the episode's test scenes at config.precision.
FewShotRun run_fewshot(const ExperimentConfig& config, const DetectorParams<float>& source,
                       const std::optional<std::filesystem::path>& log_path = {});

// Few-shot checkpoint whose metadata also carries the run config.
void save_fewshot(const FewShotModel<float>& model, const ExperimentConfig& config,
                  const std::filesystem::path& path);

struct LoadedFewShot {
  FewShotModel<float> model;
  ExperimentConfig config;
};

// Throws FileError for a missing file or a checkpoint without a config.
LoadedFewShot load_fewshot(const std::filesystem::path& path);

EvalReport evaluate_fewshot(const FewShotModel<float>& model, const std::vector<Scene>& scenes,
                            const ExperimentConfig& config);

// Source and target mAP of the joint head before and after incremental
// fine-tuning on the N-shot mixed set.
nlohmann::json run_incremental(const ExperimentConfig& config, const DetectorParams<float>& source,
                               const std::optional<std::filesystem::path>& log_path = {});

struct AffinityStats {
  double mean_topk_mass = 0;
  std::size_t positives = 0;
  std::size_t k = 3;
  nlohmann::json examples = nlohmann::json::array();
};

// Mean top-k softmax affinity mass over positive priors (IoU >= 0.5) of
// `classes` in `scenes`. Throws ParameterError when the model has no
// attention at inference (baseline, source-OBJ-only, unload-at-test).
AffinityStats affinity_concentration(const FewShotModel<double>& model,
                                     const std::vector<Scene>& scenes,
                                     const std::vector<int>& classes, std::size_t k = 3,
                                     std::size_t max_examples = 5);

struct GradSuiteEntry {
  std::string name;
  double max_rel_error = 0;
  // Entry with that error.
  std::string param;
  double analytic = 0, numeric = 0;
};

struct GradSuiteReport {
  std::vector<GradSuiteEntry> entries;
  double max_rel_error = 0;
  double tolerance = 1e-5;
  std::size_t draws = 0;
  bool passed() const { return max_rel_error <= tolerance; }
  nlohmann::json to_json() const;
};

// Central finite-difference checks in double precision over random small
// instances: every tensor op, the context chain under each metric and
// embedding, the incremental joint head, and the full fine-tuning loss of a
// miniature detector. Steps 1e-6..1e-3 (see step_sweep_check).
GradSuiteReport run_gradient_suite(std::uint64_t seed, std::size_t draws, double tolerance = 1e-5);

}  // namespace ctdet
