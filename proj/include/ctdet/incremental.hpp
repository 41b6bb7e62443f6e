#pragma once

#include <cstdint>
#include <vector>

#include "ctdet/transfer.hpp"

namespace ctdet {

// Full few-shot model plus a residual adapter over the source OBJ scores; the
// joint head classifies C_s + C_t classes with one softmax.
template <typename T>
struct IncrementalModel {
  FewShotModel<T> base;
  Tensor<T> adapter;  // C_s x C_s, zero at init

  std::size_t num_source() const { return base.detector_config.num_source; }
  std::size_t num_classes() const { return num_source() + base.num_target(); }
  std::vector<NamedTensor<T>> named() const;
  std::vector<Tensor<T>> trainable() const;
};

// [P + P W_a | target logits]. Throws DimensionError on mismatched shapes.
template <typename T>
Tensor<T> joint_logits(const Tensor<T>& p, const Tensor<T>& adapter, const Tensor<T>& target);

template <typename T>
struct JointOutput {
  Tensor<T> loc, bg, logits;  // logits: D_p x (C_s + C_t), pre-softmax
  Tensor<T> source_scores;    // P before the adapter
};

// The target pathway consumes P before the adapter.
template <typename T>
JointOutput<T> incremental_forward(const IncrementalModel<T>& model, const PriorBoxSet& priors,
                                   const Tensor<T>& image, bool inference);

IncrementalModel<float> make_incremental_model(const DetectorParams<float>& source,
                                               const DetectorConfig& detector_config,
                                               const CtConfig& ct,
                                               const std::vector<int>& target_ids,
                                               std::uint64_t seed);

template <typename To, typename From>
IncrementalModel<To> cast_incremental(const IncrementalModel<From>& m);

// `shots` single-class scenes per source class (seeded) followed by the
// target training scenes, then shuffled with a seeded permutation.
std::vector<Scene> build_incremental_trainset(const Benchmark& bench,
                                              const std::vector<Scene>& target_train,
                                              std::size_t shots, std::uint64_t seed);

// One decay by 10 at 30% (1 shot) or 60% (more shots) of the run.
SgdConfig incremental_schedule(const SgdConfig& base, std::size_t shots, std::size_t steps);

void incremental_finetune(IncrementalModel<float>& model, const std::vector<Scene>& train,
                          const FinetuneConfig& options, std::vector<TrainLogRow>* log = nullptr);

// Detections over source and target classes together.
template <typename T>
std::vector<Detection> predict_joint(const IncrementalModel<T>& model, const PriorBoxSet& priors,
                                     const Image& image, const DecodeOptions& options = {});

template <typename T>
Predictor joint_predictor(const IncrementalModel<T>& model, const PriorBoxSet& priors);

}  // namespace ctdet
