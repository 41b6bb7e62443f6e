#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ctdet/context_transformer.hpp"
#include "ctdet/detector.hpp"
#include "ctdet/evaluation.hpp"

namespace ctdet {

// Target-domain classifier configurations.
//   baseline:         fresh per-scale conv classifier on the backbone features
//   source_obj_only:  preserved source scores mapped by the shared classifier
//   transformer_only: context module and classifier over a re-initialized OBJ head
//   full:             context module over the preserved source OBJ head
//   unload_at_test:   trained as full, context module removed at inference
//   non_local:        full, with every prior box as its own context field
enum class Variant { kBaseline, kSourceObjOnly, kTransformerOnly, kFull, kUnloadAtTest, kNonLocal };

const char* to_string(Variant v);
Variant parse_variant(const std::string& s);
std::vector<Variant> table_variants();

enum class HeadMode { kFinetune, kPreserve, kFreeze, kReinit };

const char* to_string(HeadMode m);
HeadMode parse_head_mode(const std::string& s);

struct TransferConfig {
  Variant variant = Variant::kFull;
  // Frozen: with a handful of scenes a fine-tuned backbone memorizes them.
  HeadMode backbone = HeadMode::kFreeze;
  HeadMode bbox = HeadMode::kFinetune;
  HeadMode bg = HeadMode::kFinetune;
  HeadMode source_obj = HeadMode::kPreserve;
  CtConfig ct;

  // Head modes and context-module mode implied by a variant.
  static TransferConfig for_variant(Variant v, const CtConfig& ct = {});
  // Throws ConfigError listing conflicting settings.
  void validate() const;
  bool uses_source_scores() const;
  bool uses_context_module() const;

  nlohmann::json to_json() const;
  static TransferConfig from_json(const nlohmann::json& j);
};

template <typename T>
struct FewShotModel {
  DetectorConfig detector_config;
  TransferConfig transfer;
  std::vector<int> target_ids;
  DetectorParams<T> detector;
  CtParams<T> ct;                        // unused by the baseline
  std::vector<ConvLayer<T>> target_heads;  // baseline only

  std::size_t num_target() const { return target_ids.size(); }
  std::vector<NamedTensor<T>> named() const;
  // Tensors the optimizer updates, given the head modes.
  std::vector<Tensor<T>> trainable() const;
  // Parameters added on top of the source detector for target classes.
  std::size_t extra_param_count() const;
};

template <typename T>
struct ModelOutput {
  Tensor<T> loc, bg, logits;
  HeadOutputs<T> heads;
  std::optional<CtOutput<T>> ct;
  std::optional<SourceScoreSet<T>> scores;
};

template <typename T>
ModelOutput<T> model_forward(const FewShotModel<T>& model, const PriorBoxSet& priors,
                             const Tensor<T>& image, bool inference);

FewShotModel<float> make_fewshot_model(const DetectorParams<float>& source,
                                       const DetectorConfig& detector_config,
                                       const TransferConfig& transfer,
                                       const std::vector<int>& target_ids, std::uint64_t seed);

template <typename To, typename From>
FewShotModel<To> cast_model(const FewShotModel<From>& m);

struct FinetuneConfig {
  std::size_t steps = 400;
  std::size_t batch = 16;
  SgdConfig sgd{4e-3, 0.9, 5e-4, {{300, 0.1}, {350, 0.1}}};
  std::uint64_t seed = 0;
  bool flip = true;
  std::optional<std::filesystem::path> log_path;

  // Milestones at the same fractions of a different run length.
  static SgdConfig scaled_schedule(const SgdConfig& base, std::size_t base_steps, std::size_t steps);
};

// Cyclic seeded sampling over the training scenes: every scene is visited
// once per pass, each pass in a fresh permutation.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::uint64_t seed);
  std::vector<std::size_t> next(std::size_t batch);

 private:
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  Xoshiro256 rng_;
  void reshuffle();
};

struct TrainOutputs {
  Tensor<float> loc, bg, logits;
};
using TrainForward = std::function<TrainOutputs(const Tensor<float>& image)>;

// Shared SGD loop over a fixed training set: `label_of` maps ground-truth
// class ids to logit columns. Throws NumericalError on a non-finite loss.
void train_loop(const TrainForward& forward, const std::vector<Tensor<float>>& params,
                const PriorBoxSet& priors, const std::vector<Scene>& train,
                const FinetuneConfig& options, const std::function<int(int)>& label_of,
                std::vector<TrainLogRow>* log);

void finetune(FewShotModel<float>& model, const std::vector<Scene>& train,
              const FinetuneConfig& options, std::vector<TrainLogRow>* log = nullptr);

template <typename T>
std::vector<Detection> predict_target(const FewShotModel<T>& model, const PriorBoxSet& priors,
                                      const Image& image, const DecodeOptions& options = {});

template <typename T>
Predictor target_predictor(const FewShotModel<T>& model, const PriorBoxSet& priors);

// Checkpoint layout: "detector.*", "ct.*", "target_head.*"; metadata holds the
// transfer config and target ids.
Checkpoint save_model(const FewShotModel<float>& model, std::uint64_t step);
FewShotModel<float> load_model(const Checkpoint& ckpt, const DetectorConfig& detector_config);

}  // namespace ctdet
