#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ctdet/anchors.hpp"
#include "ctdet/numerics/tensor.hpp"
#include "ctdet/synthdata.hpp"
#include "json.hpp"

namespace ctdet {

enum class PoolKind { kMax, kAvg, kNone };
enum class Embedding { kResidual, kPlain, kNone };
enum class Metric { kDot, kNegEuclidean, kCosine };
enum class ThetaSharing { kShared, kPerScale };
enum class CtMode { kFull, kNonLocal, kUnloadAtTest };

const char* to_string(PoolKind v);
const char* to_string(Embedding v);
const char* to_string(Metric v);
const char* to_string(ThetaSharing v);
const char* to_string(CtMode v);
PoolKind parse_pool_kind(const std::string& s);
Embedding parse_embedding(const std::string& s);
Metric parse_metric(const std::string& s);
ThetaSharing parse_theta_sharing(const std::string& s);
CtMode parse_ct_mode(const std::string& s);

// kernel == 0 means pass-through for that scale. Stride equals the kernel
// unless set explicitly.
struct PoolSpec {
  int kernel = 0;
  int stride = 0;
  bool ceil_mode = true;

  bool pass_through() const { return kernel == 0; }
  int effective_stride() const { return stride > 0 ? stride : kernel; }
};

// Kernels 3, 2, 2, 2 on the first four of six scales of the reference layout.
std::vector<PoolSpec> reference_pooling();
// Kernels 2, 2 on the 8x8 and 4x4 scales, pass-through on 2x2.
std::vector<PoolSpec> default_pooling();

struct CtConfig {
  PoolKind pool = PoolKind::kMax;
  std::vector<PoolSpec> pooling = default_pooling();
  Embedding embedding = Embedding::kResidual;
  Metric metric = Metric::kDot;
  ThetaSharing theta = ThetaSharing::kShared;
  CtMode mode = CtMode::kFull;
  double theta_init_std = 0.01;

  nlohmann::json to_json() const;
  static CtConfig from_json(const nlohmann::json& j);
};

// Per-scale score tensors H x W x (M * C) and their row-flattened matrix.
template <typename T>
struct SourceScoreSet {
  std::vector<Tensor<T>> maps;
  Tensor<T> flat;  // D_p x C
  std::vector<std::size_t> ratios;  // M_k
  std::vector<GridProvenance> provenance;
  std::vector<std::size_t> scale_offsets;  // first row per scale, plus end
  std::size_t channels = 0;
};

// Flattens maps (k, row, col, ratio) order. Throws DimensionError when a
// map's channel count is not M_k * C.
template <typename T>
SourceScoreSet<T> make_score_set(const std::vector<Tensor<T>>& maps,
                                 const std::vector<std::size_t>& ratios, std::size_t channels);

template <typename T>
using ContextFieldSet = SourceScoreSet<T>;

// Pools each scale's map over space, channelwise; pass-through scales are
// copied. Throws ParameterError on a config of the wrong length or a kernel
// larger than the map with ceil mode off.
template <typename T>
ContextFieldSet<T> build_context_fields(const SourceScoreSet<T>& scores, PoolKind kind,
                                        const std::vector<PoolSpec>& pooling);

// Closed-form D_q.
std::size_t count_context_fields(const std::vector<ScaleSpec>& scales,
                                 const std::vector<PoolSpec>& pooling, PoolKind kind = PoolKind::kMax);

template <typename T>
struct CtParams {
  // Embedding weights (C_s x C_s); undefined when embedding is none.
  Tensor<T> wf, wg, wh, wphi;
  std::vector<Tensor<T>> theta;  // one shared C_s x C_t, or one per scale

  std::vector<Tensor<T>> tensors() const;
  std::vector<NamedTensor<T>> named() const;
};

template <typename T>
CtParams<T> init_ct_params(std::size_t num_source, std::size_t num_target, std::size_t num_scales,
                           const CtConfig& config, std::uint64_t seed);

template <typename To, typename From>
CtParams<To> cast_ct_params(const CtParams<From>& p);

// x + x W (residual), x W (plain) or x (none).
template <typename T>
Tensor<T> embed(const Tensor<T>& x, const Tensor<T>& w, Embedding kind);

template <typename T>
Tensor<T> affinity(const Tensor<T>& p, const Tensor<T>& q, const CtParams<T>& params,
                   const CtConfig& config);

// softmax(A) rows times h(Q).
template <typename T>
Tensor<T> aggregate(const Tensor<T>& a, const Tensor<T>& q, const CtParams<T>& params,
                    const CtConfig& config);

// P + L W_phi; P + L when embedding is none.
template <typename T>
Tensor<T> fuse(const Tensor<T>& p, const Tensor<T>& l, const CtParams<T>& params,
               const CtConfig& config);

// Pre-softmax target logits P_hat Theta (per-scale Theta applied to its rows).
template <typename T>
Tensor<T> target_logits(const Tensor<T>& p_hat, const CtParams<T>& params,
                        const std::vector<std::size_t>& scale_offsets);

template <typename T>
Tensor<T> target_obj(const Tensor<T>& p_hat, const CtParams<T>& params,
                     const std::vector<std::size_t>& scale_offsets);

template <typename T>
struct CtOutput {
  Tensor<T> logits;  // D_p x C_t, pre-softmax
  Tensor<T> probs;   // softmax rows of logits
  Tensor<T> affinity;  // A, undefined when the module was bypassed
  Tensor<T> fused;     // P_hat
  std::optional<ContextFieldSet<T>> fields;
};

// `inference` selects the test-time path: unload-at-test skips the module.
template <typename T>
CtOutput<T> ct_forward(const SourceScoreSet<T>& scores, const CtParams<T>& params,
                       const CtConfig& config, bool inference);

std::size_t count_extra_params(std::size_t num_source, std::size_t num_target,
                               const CtConfig& config, std::size_t num_scales = 1);

struct AffinityEntry {
  GridProvenance field;
  double weight = 0;
};

// k largest softmax(A(i,:)) weights with their field provenance.
std::vector<AffinityEntry> top_k_affinity(const Tensor<double>& a, std::size_t prior, std::size_t k,
                                          const std::vector<GridProvenance>& field_provenance);

nlohmann::json affinity_dump(const GridProvenance& prior, const Box& box,
                             const std::vector<AffinityEntry>& topk);

}  // namespace ctdet
