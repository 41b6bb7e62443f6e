#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ctdet/anchors.hpp"
#include "ctdet/numerics/checkpoint.hpp"
#include "ctdet/numerics/optimizer.hpp"
#include "ctdet/numerics/tensor.hpp"
#include "ctdet/synthdata.hpp"

namespace ctdet {

struct DetectorConfig {
  std::size_t image_size = 64;
  // Output channels of the stride-2 3x3 conv blocks.
  std::vector<std::size_t> backbone_channels{16, 32, 32, 32, 32};
  // The last scales.size() blocks emit the feature maps the heads read.
  std::vector<ScaleSpec> scales = default_scale_specs();
  std::size_t num_source = 12;

  void validate() const;
  std::size_t num_feature_maps() const { return scales.size(); }
  std::size_t first_feature_block() const { return backbone_channels.size() - scales.size(); }
};

template <typename T>
struct ConvLayer {
  Tensor<T> weight;  // k x k x in x out
  Tensor<T> bias;    // out
};

template <typename T>
struct ScaleHeads {
  ConvLayer<T> bbox;  // 4 * M_k outputs
  ConvLayer<T> bg;    // M_k outputs (objectness logit)
  ConvLayer<T> obj;   // C_s * M_k outputs
};

template <typename T>
struct DetectorParams {
  std::vector<ConvLayer<T>> backbone;
  std::vector<ScaleHeads<T>> heads;

  std::vector<NamedTensor<T>> named() const;
};

template <typename T>
DetectorParams<T> init_detector(const DetectorConfig& config, std::uint64_t seed);

// He-normal weights and zero bias for a k x k conv.
template <typename T>
ConvLayer<T> init_conv(std::size_t k, std::size_t in, std::size_t out, double std_dev,
                       double bias, Xoshiro256& rng);

template <typename T>
Tensor<T> conv_forward(const Tensor<T>& x, const ConvLayer<T>& layer, int stride, int padding);

// Image as an H x W x 3 tensor.
template <typename T>
Tensor<T> image_tensor(const Image& image);

// Feature maps from the last num_feature_maps() blocks.
template <typename T>
std::vector<Tensor<T>> backbone_forward(const Tensor<T>& image, const DetectorParams<T>& params,
                                        const DetectorConfig& config);

// Applies one 3x3 conv per scale and flattens H x W x (M*C) maps into
// (H*W*M) x C rows, concatenated across scales in prior order.
template <typename T>
struct FlatHead {
  Tensor<T> flat;
  std::vector<Tensor<T>> maps;
};

template <typename T>
FlatHead<T> per_scale_head(const std::vector<Tensor<T>>& features,
                           const std::vector<const ConvLayer<T>*>& layers,
                           const std::vector<ScaleSpec>& scales, std::size_t per_prior);

template <typename T>
struct HeadOutputs {
  Tensor<T> loc;     // D_p x 4
  Tensor<T> bg;      // D_p x 1 objectness logits
  Tensor<T> scores;  // D_p x C_s pre-softmax source scores
  std::vector<Tensor<T>> score_maps;  // per scale H x W x (M * C_s)
  std::vector<GridProvenance> provenance;
};

// Throws ConsistencyError when the feature maps do not line up with the
// configured scale order (checked through per-row provenance).
template <typename T>
HeadOutputs<T> heads_forward(const std::vector<Tensor<T>>& features,
                             const DetectorParams<T>& params, const DetectorConfig& config,
                             const PriorBoxSet& priors, bool with_scores = true);

// Provenance implied by a list of feature map shapes and per-cell ratio counts.
std::vector<GridProvenance> provenance_from_maps(const std::vector<Shape>& shapes,
                                                 const std::vector<std::size_t>& ratios_per_cell);

struct MatchedTargets {
  std::vector<int> labels;          // class index per prior, -1 for background
  std::vector<double> loc_targets;  // D_p x 4 encoded offsets (zero for negatives)
  std::vector<std::uint8_t> positive;
  std::size_t num_pos = 0;
};

// `class_index` maps a ground-truth class id to the head's column.
MatchedTargets build_targets(const std::vector<GroundTruth>& gts, const PriorBoxSet& priors,
                             const std::function<int(int)>& class_index,
                             double iou_threshold = 0.5);

// Indices of the `ratio * num_pos` negatives with the largest objectness loss.
std::vector<std::size_t> hard_negatives(std::span<const double> bg_logits,
                                        std::span<const std::uint8_t> positive,
                                        std::size_t ratio = 3);

template <typename T>
struct LossParts {
  Tensor<T> total;  // (loc + bg + cls) / normalizer
  double loc = 0, bg = 0, cls = 0;
  std::size_t num_pos = 0, num_neg = 0;
};

// nullopt signals a batch element without positives (to be skipped).
template <typename T>
std::optional<LossParts<T>> multibox_loss(const Tensor<T>& loc, const Tensor<T>& bg,
                                          const Tensor<T>& cls_logits,
                                          const MatchedTargets& targets, double normalizer);

struct Detection {
  Box box;
  int cls = 0;
  double score = 0;
};

// Tensor values widened to double, for decoding single-precision outputs.
template <typename T>
std::vector<double> as_double(const Tensor<T>& t) {
  return std::vector<double>(t.data().begin(), t.data().end());
}

struct DecodeOptions {
  double score_threshold = 0.01;
  double nms_iou = 0.45;
  std::size_t top_k = 200;
};

// score = sigmoid(objectness) * softmax(class logits); per-class NMS.
std::vector<Detection> decode_detections(std::span<const double> loc,
                                         std::span<const double> bg_logits,
                                         std::span<const double> class_logits,
                                         std::size_t num_classes, const PriorBoxSet& priors,
                                         const std::vector<int>& class_ids,
                                         const DecodeOptions& options = {});

// Source-domain detections of a pretrained model.
std::vector<Detection> predict(const Image& image, const DetectorParams<double>& params,
                               const DetectorConfig& config, const PriorBoxSet& priors,
                               const std::vector<int>& source_ids,
                               const DecodeOptions& options = {});

struct TrainLogRow {
  std::int64_t step = 0;
  double loss = 0, loss_loc = 0, loss_bg = 0, loss_cls = 0, lr = 0;
};

std::string to_jsonl(const TrainLogRow& row);

struct PretrainConfig {
  std::size_t steps = 2000;
  std::size_t batch = 16;
  SgdConfig sgd{1e-2, 0.9, 5e-4, {{1500, 0.1}, {1800, 0.1}}};
  std::uint64_t seed = 0;
  bool flip = true;
  std::optional<std::filesystem::path> log_path;
  std::optional<std::filesystem::path> checkpoint_path;
};

// Trains on freshly rendered source scenes. Throws NumericalError on a
// non-finite loss.
DetectorParams<float> pretrain_source(const Benchmark& bench, const DetectorConfig& config,
                                      const PretrainConfig& options,
                                      std::vector<TrainLogRow>* log = nullptr);

// Parameter conversion and persistence.
template <typename To, typename From>
DetectorParams<To> cast_params(const DetectorParams<From>& p);

template <typename T>
void store_params(Checkpoint& ckpt, const std::string& prefix, const std::vector<NamedTensor<T>>& params);

// Copies checkpoint values into the named tensors; throws FileError on a
// missing entry or shape mismatch.
template <typename T>
void restore_params(const Checkpoint& ckpt, const std::string& prefix,
                    const std::vector<NamedTensor<T>>& params);

// Validation helpers shared by the training loops.
void require_finite(double value, const std::string& what);

}  // namespace ctdet
