#include "ctdet/context_transformer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ctdet/errors.hpp"
#include "ctdet/numerics/ops.hpp"

namespace ctdet {

namespace {

template <typename E, std::size_t N>
E parse_enum(const std::string& s, const std::pair<const char*, E> (&table)[N], const char* what) {
  for (const auto& [name, v] : table)
    if (s == name) return v;
  std::string options;
  for (const auto& [name, v] : table) options += std::string(options.empty() ? "" : ", ") + name;
  throw ParameterError(std::string("unknown ") + what + " '" + s + "' (expected one of " + options + ")");
}

template <typename E, std::size_t N>
const char* enum_name(E v, const std::pair<const char*, E> (&table)[N]) {
  for (const auto& [name, e] : table)
    if (e == v) return name;
  return "?";
}

const std::pair<const char*, PoolKind> kPoolNames[] = {
    {"max", PoolKind::kMax}, {"avg", PoolKind::kAvg}, {"none", PoolKind::kNone}};
const std::pair<const char*, Embedding> kEmbeddingNames[] = {
    {"residual", Embedding::kResidual}, {"plain", Embedding::kPlain}, {"none", Embedding::kNone}};
const std::pair<const char*, Metric> kMetricNames[] = {
    {"dot", Metric::kDot}, {"neg_euclidean", Metric::kNegEuclidean}, {"cosine", Metric::kCosine}};
const std::pair<const char*, ThetaSharing> kThetaNames[] = {
    {"shared", ThetaSharing::kShared}, {"per_scale", ThetaSharing::kPerScale}};
const std::pair<const char*, CtMode> kModeNames[] = {{"full", CtMode::kFull},
                                                      {"non_local", CtMode::kNonLocal},
                                                      {"unload_at_test", CtMode::kUnloadAtTest}};

}  // namespace

const char* to_string(PoolKind v) { return enum_name(v, kPoolNames); }
const char* to_string(Embedding v) { return enum_name(v, kEmbeddingNames); }
const char* to_string(Metric v) { return enum_name(v, kMetricNames); }
const char* to_string(ThetaSharing v) { return enum_name(v, kThetaNames); }
const char* to_string(CtMode v) { return enum_name(v, kModeNames); }
PoolKind parse_pool_kind(const std::string& s) { return parse_enum(s, kPoolNames, "pooling"); }
Embedding parse_embedding(const std::string& s) { return parse_enum(s, kEmbeddingNames, "embedding"); }
Metric parse_metric(const std::string& s) { return parse_enum(s, kMetricNames, "metric"); }
ThetaSharing parse_theta_sharing(const std::string& s) { return parse_enum(s, kThetaNames, "theta sharing"); }
CtMode parse_ct_mode(const std::string& s) { return parse_enum(s, kModeNames, "mode"); }

std::vector<PoolSpec> reference_pooling() {
  return {{3, 3, true}, {2, 2, true}, {2, 2, true}, {2, 2, true}, {}, {}};
}

std::vector<PoolSpec> default_pooling() { return {{2, 2, true}, {2, 2, true}, {}}; }

nlohmann::json CtConfig::to_json() const {
  nlohmann::json kernels = nlohmann::json::array();
  for (const auto& p : pooling) kernels.push_back(p.kernel);
  return {{"pool", to_string(pool)},
          {"kernels", kernels},
          {"embedding", to_string(embedding)},
          {"metric", to_string(metric)},
          {"theta", to_string(theta)},
          {"mode", to_string(mode)},
          {"theta_init_std", theta_init_std}};
}

CtConfig CtConfig::from_json(const nlohmann::json& j) {
  CtConfig c;
  if (j.contains("pool")) c.pool = parse_pool_kind(j["pool"].get<std::string>());
  if (j.contains("kernels")) {
    c.pooling.clear();
    for (const auto& k : j["kernels"]) c.pooling.push_back(PoolSpec{k.get<int>(), 0, true});
  }
  if (j.contains("embedding")) c.embedding = parse_embedding(j["embedding"].get<std::string>());
  if (j.contains("metric")) c.metric = parse_metric(j["metric"].get<std::string>());
  if (j.contains("theta")) c.theta = parse_theta_sharing(j["theta"].get<std::string>());
  if (j.contains("mode")) c.mode = parse_ct_mode(j["mode"].get<std::string>());
  if (j.contains("theta_init_std")) c.theta_init_std = j["theta_init_std"].get<double>();
  return c;
}

template <typename T>
SourceScoreSet<T> make_score_set(const std::vector<Tensor<T>>& maps,
                                 const std::vector<std::size_t>& ratios, std::size_t channels) {
  if (maps.size() != ratios.size() || maps.empty()) {
    throw DimensionError("score set: " + std::to_string(maps.size()) + " maps for " +
                         std::to_string(ratios.size()) + " scales");
  }
  SourceScoreSet<T> s;
  s.maps = maps;
  s.ratios = ratios;
  s.channels = channels;
  std::vector<Tensor<T>> rows;
  std::size_t offset = 0;
  for (std::size_t k = 0; k < maps.size(); ++k) {
    const auto& m = maps[k];
    if (m.rank() != 3 || m.dim(2) != ratios[k] * channels) {
      throw DimensionError("score set: scale " + std::to_string(k) + " map " + shape_str(m.shape()) +
                           " is not H x W x (" + std::to_string(ratios[k]) + "*" +
                           std::to_string(channels) + ")");
    }
    s.scale_offsets.push_back(offset);
    const std::size_t n = m.dim(0) * m.dim(1) * ratios[k];
    for (std::size_t r = 0; r < m.dim(0); ++r)
      for (std::size_t c = 0; c < m.dim(1); ++c)
        for (std::size_t a = 0; a < ratios[k]; ++a) s.provenance.push_back({k, r, c, a});
    rows.push_back(ops::reshape(m, {n, channels}));
    offset += n;
  }
  s.scale_offsets.push_back(offset);
  s.flat = rows.size() == 1 ? rows[0] : ops::concat_rows(rows);
  return s;
}

template <typename T>
ContextFieldSet<T> build_context_fields(const SourceScoreSet<T>& scores, PoolKind kind,
                                        const std::vector<PoolSpec>& pooling) {
  if (kind == PoolKind::kNone) return scores;
  if (pooling.size() != scores.maps.size()) {
    throw ParameterError("build_context_fields: pooling config has " +
                         std::to_string(pooling.size()) + " entries for " +
                         std::to_string(scores.maps.size()) + " scales");
  }
  std::vector<Tensor<T>> pooled;
  for (std::size_t k = 0; k < scores.maps.size(); ++k) {
    const auto& spec = pooling[k];
    if (spec.pass_through()) {
      pooled.push_back(scores.maps[k]);
    } else if (kind == PoolKind::kMax) {
      pooled.push_back(ops::spatial_max_pool(scores.maps[k], spec.kernel, spec.effective_stride(),
                                             spec.ceil_mode));
    } else {
      pooled.push_back(ops::spatial_avg_pool(scores.maps[k], spec.kernel, spec.effective_stride(),
                                             spec.ceil_mode));
    }
  }
  return make_score_set(pooled, scores.ratios, scores.channels);
}

std::size_t count_context_fields(const std::vector<ScaleSpec>& scales,
                                 const std::vector<PoolSpec>& pooling, PoolKind kind) {
  if (kind != PoolKind::kNone && pooling.size() != scales.size()) {
    throw ParameterError("count_context_fields: pooling config has " +
                         std::to_string(pooling.size()) + " entries for " +
                         std::to_string(scales.size()) + " scales");
  }
  std::size_t total = 0;
  for (std::size_t k = 0; k < scales.size(); ++k) {
    std::size_t u = scales[k].height, v = scales[k].width;
    if (kind != PoolKind::kNone && !pooling[k].pass_through()) {
      const auto& p = pooling[k];
      u = ops::pooled_extent(u, p.kernel, p.effective_stride(), p.ceil_mode);
      v = ops::pooled_extent(v, p.kernel, p.effective_stride(), p.ceil_mode);
    }
    total += u * v * scales[k].ratios.size();
  }
  return total;
}

template <typename T>
std::vector<Tensor<T>> CtParams<T>::tensors() const {
  std::vector<Tensor<T>> out;
  for (const auto& [name, t] : named()) out.push_back(t);
  return out;
}

template <typename T>
std::vector<NamedTensor<T>> CtParams<T>::named() const {
  std::vector<NamedTensor<T>> out;
  if (wf.defined()) {
    out.push_back({"ct.f", wf});
    out.push_back({"ct.g", wg});
    out.push_back({"ct.h", wh});
    out.push_back({"ct.phi", wphi});
  }
  for (std::size_t k = 0; k < theta.size(); ++k) out.push_back({"ct.theta." + std::to_string(k), theta[k]});
  return out;
}

template <typename T>
CtParams<T> init_ct_params(std::size_t num_source, std::size_t num_target, std::size_t num_scales,
                           const CtConfig& config, std::uint64_t seed) {
  if (num_source == 0 || num_target == 0 || num_scales == 0) {
    throw ParameterError("init_ct_params: class and scale counts must be positive");
  }
  Xoshiro256 rng(derive_seed(seed, 0xC7C7));
  auto gaussian = [&](Shape shape, double sd) {
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(sd * rng.normal());
    return Tensor<T>(std::move(shape), std::move(v), true);
  };
  CtParams<T> p;
  const Shape sq{num_source, num_source};
  if (config.embedding == Embedding::kResidual) {
    p.wf = Tensor<T>(sq, true);
    p.wg = Tensor<T>(sq, true);
    p.wh = Tensor<T>(sq, true);
    p.wphi = Tensor<T>(sq, true);
  } else if (config.embedding == Embedding::kPlain) {
    const double sd = 1.0 / std::sqrt(static_cast<double>(num_source));
    p.wf = gaussian(sq, sd);
    p.wg = gaussian(sq, sd);
    p.wh = gaussian(sq, sd);
    p.wphi = gaussian(sq, sd);
  }
  const std::size_t n_theta = config.theta == ThetaSharing::kShared ? 1 : num_scales;
  for (std::size_t k = 0; k < n_theta; ++k)
    p.theta.push_back(gaussian({num_source, num_target}, config.theta_init_std));
  return p;
}

template <typename To, typename From>
CtParams<To> cast_ct_params(const CtParams<From>& p) {
  CtParams<To> out;
  if (p.wf.defined()) {
    out.wf = p.wf.template cast<To>(true);
    out.wg = p.wg.template cast<To>(true);
    out.wh = p.wh.template cast<To>(true);
    out.wphi = p.wphi.template cast<To>(true);
  }
  for (const auto& t : p.theta) out.theta.push_back(t.template cast<To>(true));
  return out;
}

template <typename T>
Tensor<T> embed(const Tensor<T>& x, const Tensor<T>& w, Embedding kind) {
  switch (kind) {
    case Embedding::kResidual:
      return ops::add(x, ops::matmul(x, w));
    case Embedding::kPlain:
      return ops::matmul(x, w);
    case Embedding::kNone:
      return x;
  }
  throw ParameterError("embed: unknown embedding kind");
}

template <typename T>
Tensor<T> affinity(const Tensor<T>& p, const Tensor<T>& q, const CtParams<T>& params,
                   const CtConfig& config) {
  if (p.rank() != 2 || q.rank() != 2 || p.dim(1) != q.dim(1)) {
    throw DimensionError("affinity: score matrices " + shape_str(p.shape()) + " and " +
                         shape_str(q.shape()) + " disagree on channels");
  }
  Tensor<T> fp = embed(p, params.wf, config.embedding);
  Tensor<T> gq = embed(q, params.wg, config.embedding);
  switch (config.metric) {
    case Metric::kDot:
      return ops::matmul(fp, ops::transpose(gq));
    case Metric::kNegEuclidean:
      return ops::neg_sq_distance(fp, gq);
    case Metric::kCosine:
      return ops::matmul(ops::l2_normalize_rows(fp), ops::transpose(ops::l2_normalize_rows(gq)));
  }
  throw ParameterError("affinity: unknown metric");
}

template <typename T>
Tensor<T> aggregate(const Tensor<T>& a, const Tensor<T>& q, const CtParams<T>& params,
                    const CtConfig& config) {
  if (a.rank() != 2 || a.dim(1) != q.dim(0)) {
    throw DimensionError("aggregate: affinity " + shape_str(a.shape()) + " does not match fields " +
                         shape_str(q.shape()));
  }
  return ops::matmul(ops::softmax_rows(a), embed(q, params.wh, config.embedding));
}

template <typename T>
Tensor<T> fuse(const Tensor<T>& p, const Tensor<T>& l, const CtParams<T>& params,
               const CtConfig& config) {
  if (p.shape() != l.shape()) {
    throw DimensionError("fuse: " + shape_str(p.shape()) + " vs " + shape_str(l.shape()));
  }
  if (config.embedding == Embedding::kNone) return ops::add(p, l);
  return ops::add(p, ops::matmul(l, params.wphi));
}

template <typename T>
Tensor<T> target_logits(const Tensor<T>& p_hat, const CtParams<T>& params,
                        const std::vector<std::size_t>& scale_offsets) {
  if (params.theta.empty()) throw ParameterError("target_logits: no target classifier");
  if (params.theta.size() == 1) return ops::matmul(p_hat, params.theta[0]);
  if (scale_offsets.size() != params.theta.size() + 1) {
    throw DimensionError("target_logits: " + std::to_string(params.theta.size()) +
                         " per-scale classifiers for " + std::to_string(scale_offsets.size() - 1) +
                         " scales");
  }
  std::vector<Tensor<T>> parts;
  for (std::size_t k = 0; k < params.theta.size(); ++k) {
    parts.push_back(
        ops::matmul(ops::slice_rows(p_hat, scale_offsets[k], scale_offsets[k + 1]), params.theta[k]));
  }
  return ops::concat_rows(parts);
}

template <typename T>
Tensor<T> target_obj(const Tensor<T>& p_hat, const CtParams<T>& params,
                     const std::vector<std::size_t>& scale_offsets) {
  return ops::softmax_rows(target_logits(p_hat, params, scale_offsets));
}

template <typename T>
CtOutput<T> ct_forward(const SourceScoreSet<T>& scores, const CtParams<T>& params,
                       const CtConfig& config, bool inference) {
  CtOutput<T> out;
  const Tensor<T>& p = scores.flat;
  if (config.mode == CtMode::kUnloadAtTest && inference) {
    out.fused = p;
  } else {
    ContextFieldSet<T> fields = config.mode == CtMode::kNonLocal
                                    ? scores
                                    : build_context_fields(scores, config.pool, config.pooling);
    out.affinity = affinity(p, fields.flat, params, config);
    const Tensor<T> l = aggregate(out.affinity, fields.flat, params, config);
    out.fused = fuse(p, l, params, config);
    out.fields = std::move(fields);
  }
  out.logits = target_logits(out.fused, params, scores.scale_offsets);
  out.probs = ops::softmax_rows(out.logits);
  return out;
}

std::size_t count_extra_params(std::size_t num_source, std::size_t num_target,
                               const CtConfig& config, std::size_t num_scales) {
  const std::size_t embed = config.embedding == Embedding::kNone ? 0 : 4 * num_source * num_source;
  const std::size_t thetas = config.theta == ThetaSharing::kShared ? 1 : num_scales;
  return embed + thetas * num_source * num_target;
}

std::vector<AffinityEntry> top_k_affinity(const Tensor<double>& a, std::size_t prior, std::size_t k,
                                          const std::vector<GridProvenance>& field_provenance) {
  if (a.rank() != 2 || prior >= a.dim(0)) {
    throw ParameterError("top_k_affinity: prior " + std::to_string(prior) + " outside " +
                         shape_str(a.shape()));
  }
  const std::size_t n = a.dim(1);
  if (k == 0 || k > n) {
    throw ParameterError("top_k_affinity: k=" + std::to_string(k) + " outside [1, " +
                         std::to_string(n) + "]");
  }
  if (field_provenance.size() != n) {
    throw DimensionError("top_k_affinity: provenance for " + std::to_string(field_provenance.size()) +
                         " fields, affinity has " + std::to_string(n));
  }
  const double* row = a.data().data() + prior * n;
  const double mx = *std::max_element(row, row + n);
  std::vector<double> w(n);
  double z = 0;
  for (std::size_t j = 0; j < n; ++j) z += (w[j] = std::exp(row[j] - mx));
  for (auto& v : w) v /= z;
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) { return w[x] > w[y]; });
  std::vector<AffinityEntry> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back({field_provenance[idx[i]], w[idx[i]]});
  return out;
}

nlohmann::json affinity_dump(const GridProvenance& prior, const Box& box,
                             const std::vector<AffinityEntry>& topk) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : topk) {
    entries.push_back({{"scale", e.field.scale},
                       {"cell", {e.field.row, e.field.col}},
                       {"ratio", e.field.ratio},
                       {"weight", e.weight}});
  }
  return {{"prior",
           {{"scale", prior.scale},
            {"cell", {prior.row, prior.col}},
            {"ratio", prior.ratio},
            {"box", {box.cx, box.cy, box.w, box.h}}}},
          {"topk", entries}};
}

#define CTDET_INSTANTIATE_CT(T)                                                                  \
  template SourceScoreSet<T> make_score_set(const std::vector<Tensor<T>>&,                       \
                                            const std::vector<std::size_t>&, std::size_t);       \
  template ContextFieldSet<T> build_context_fields(const SourceScoreSet<T>&, PoolKind,           \
                                                   const std::vector<PoolSpec>&);                \
  template struct CtParams<T>;                                                                   \
  template CtParams<T> init_ct_params<T>(std::size_t, std::size_t, std::size_t, const CtConfig&, \
                                         std::uint64_t);                                         \
  template Tensor<T> embed(const Tensor<T>&, const Tensor<T>&, Embedding);                       \
  template Tensor<T> affinity(const Tensor<T>&, const Tensor<T>&, const CtParams<T>&,            \
                              const CtConfig&);                                                  \
  template Tensor<T> aggregate(const Tensor<T>&, const Tensor<T>&, const CtParams<T>&,           \
                               const CtConfig&);                                                 \
  template Tensor<T> fuse(const Tensor<T>&, const Tensor<T>&, const CtParams<T>&,                \
                          const CtConfig&);                                                      \
  template Tensor<T> target_logits(const Tensor<T>&, const CtParams<T>&,                         \
                                   const std::vector<std::size_t>&);                             \
  template Tensor<T> target_obj(const Tensor<T>&, const CtParams<T>&,                            \
                                const std::vector<std::size_t>&);                                \
  template CtOutput<T> ct_forward(const SourceScoreSet<T>&, const CtParams<T>&, const CtConfig&, \
                                  bool);

CTDET_INSTANTIATE_CT(float)
CTDET_INSTANTIATE_CT(double)

template CtParams<double> cast_ct_params<double, float>(const CtParams<float>&);
template CtParams<float> cast_ct_params<float, double>(const CtParams<double>&);
template CtParams<double> cast_ct_params<double, double>(const CtParams<double>&);

}  // namespace ctdet
