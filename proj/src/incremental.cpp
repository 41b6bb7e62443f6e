#include "ctdet/incremental.hpp"

#include <map>

#include "ctdet/errors.hpp"
#include "ctdet/numerics/ops.hpp"

namespace ctdet {

template <typename T>
std::vector<NamedTensor<T>> IncrementalModel<T>::named() const {
  auto out = base.named();
  out.push_back({"incremental.adapter", adapter});
  return out;
}

template <typename T>
std::vector<Tensor<T>> IncrementalModel<T>::trainable() const {
  auto out = base.trainable();
  out.push_back(adapter);
  return out;
}

template <typename T>
Tensor<T> joint_logits(const Tensor<T>& p, const Tensor<T>& adapter, const Tensor<T>& target) {
  if (p.rank() != 2 || adapter.shape() != Shape{p.dim(1), p.dim(1)} || target.rank() != 2 ||
      target.dim(0) != p.dim(0)) {
    throw DimensionError("joint_logits: P " + shape_str(p.shape()) + ", adapter " +
                         shape_str(adapter.shape()) + ", target logits " +
                         shape_str(target.shape()));
  }
  const auto source = ops::add(p, ops::matmul(p, adapter));
  return ops::concat_cols(source, target);
}

template <typename T>
JointOutput<T> incremental_forward(const IncrementalModel<T>& model, const PriorBoxSet& priors,
                                   const Tensor<T>& image, bool inference) {
  const auto out = model_forward(model.base, priors, image, inference);
  JointOutput<T> j;
  j.loc = out.loc;
  j.bg = out.bg;
  j.source_scores = out.scores->flat;
  j.logits = joint_logits(j.source_scores, model.adapter, out.logits);
  return j;
}

IncrementalModel<float> make_incremental_model(const DetectorParams<float>& source,
                                               const DetectorConfig& detector_config,
                                               const CtConfig& ct,
                                               const std::vector<int>& target_ids,
                                               std::uint64_t seed) {
  IncrementalModel<float> m;
  m.base = make_fewshot_model(source, detector_config, TransferConfig::for_variant(Variant::kFull, ct),
                              target_ids, seed);
  const std::size_t cs = detector_config.num_source;
  m.adapter = Tensor<float>({cs, cs}, true);
  return m;
}

template <typename To, typename From>
IncrementalModel<To> cast_incremental(const IncrementalModel<From>& m) {
  IncrementalModel<To> out;
  out.base = cast_model<To>(m.base);
  out.adapter = m.adapter.template cast<To>(true);
  return out;
}

std::vector<Scene> build_incremental_trainset(const Benchmark& bench,
                                              const std::vector<Scene>& target_train,
                                              std::size_t shots, std::uint64_t seed) {
  if (shots == 0) throw ParameterError("build_incremental_trainset: shots must be >= 1");
  std::vector<Scene> out;
  std::uint64_t index = 0;
  for (int cls : bench.source_ids())
    for (std::size_t n = 0; n < shots; ++n)
      out.push_back(single_class_scene(bench, cls, derive_seed(derive_seed(seed, 0x1AC5), index++)));
  out.insert(out.end(), target_train.begin(), target_train.end());
  Xoshiro256 rng(derive_seed(seed, 0x5AFF));
  for (std::size_t i = out.size(); i > 1; --i) std::swap(out[i - 1], out[rng.below(i)]);
  return out;
}

SgdConfig incremental_schedule(const SgdConfig& base, std::size_t shots, std::size_t steps) {
  SgdConfig out = base;
  const double frac = shots <= 1 ? 0.3 : 0.6;
  out.schedule = {{static_cast<std::int64_t>(std::llround(frac * static_cast<double>(steps))), 0.1}};
  return out;
}

namespace {

// Source classes occupy ids 0..C_s-1.
template <typename T>
std::vector<int> joint_ids(const IncrementalModel<T>& model) {
  std::vector<int> ids;
  for (std::size_t i = 0; i < model.num_source(); ++i) ids.push_back(static_cast<int>(i));
  ids.insert(ids.end(), model.base.target_ids.begin(), model.base.target_ids.end());
  return ids;
}

}  // namespace

void incremental_finetune(IncrementalModel<float>& model, const std::vector<Scene>& train,
                          const FinetuneConfig& options, std::vector<TrainLogRow>* log) {
  const PriorBoxSet priors = generate_priors(model.base.detector_config.scales);
  const int cs = static_cast<int>(model.num_source());
  std::map<int, int> target_column;
  for (std::size_t i = 0; i < model.base.target_ids.size(); ++i)
    target_column[model.base.target_ids[i]] = cs + static_cast<int>(i);
  auto label_of = [&](int id) {
    if (id >= 0 && id < cs) return id;
    const auto it = target_column.find(id);
    if (it == target_column.end())
      throw InputError("incremental_finetune: unknown class " + std::to_string(id));
    return it->second;
  };
  auto forward = [&](const Tensor<float>& image) {
    auto out = incremental_forward(model, priors, image, false);
    return TrainOutputs{out.loc, out.bg, out.logits};
  };
  train_loop(forward, model.trainable(), priors, train, options, label_of, log);
}

template <typename T>
std::vector<Detection> predict_joint(const IncrementalModel<T>& model, const PriorBoxSet& priors,
                                     const Image& image, const DecodeOptions& options) {
  NoGradGuard guard;
  const auto out = incremental_forward(model, priors, image_tensor<T>(image), true);
  return decode_detections(as_double(out.loc), as_double(out.bg), as_double(out.logits),
                           model.num_classes(), priors, joint_ids(model), options);
}

template <typename T>
Predictor joint_predictor(const IncrementalModel<T>& model, const PriorBoxSet& priors) {
  return [&model, &priors](const Scene& s) { return predict_joint(model, priors, s.image); };
}

template struct IncrementalModel<float>;
template struct IncrementalModel<double>;
template Tensor<float> joint_logits(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&);
template Tensor<double> joint_logits(const Tensor<double>&, const Tensor<double>&,
                                     const Tensor<double>&);
template JointOutput<float> incremental_forward(const IncrementalModel<float>&, const PriorBoxSet&,
                                                const Tensor<float>&, bool);
template JointOutput<double> incremental_forward(const IncrementalModel<double>&, const PriorBoxSet&,
                                                 const Tensor<double>&, bool);
template std::vector<Detection> predict_joint(const IncrementalModel<float>&, const PriorBoxSet&,
                                              const Image&, const DecodeOptions&);
template std::vector<Detection> predict_joint(const IncrementalModel<double>&, const PriorBoxSet&,
                                              const Image&, const DecodeOptions&);
template Predictor joint_predictor(const IncrementalModel<float>&, const PriorBoxSet&);
template Predictor joint_predictor(const IncrementalModel<double>&, const PriorBoxSet&);
template IncrementalModel<double> cast_incremental<double, float>(const IncrementalModel<float>&);
template IncrementalModel<float> cast_incremental<float, double>(const IncrementalModel<double>&);

}  // namespace ctdet
