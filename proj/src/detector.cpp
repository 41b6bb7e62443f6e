#include "ctdet/detector.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "ctdet/errors.hpp"
#include "ctdet/numerics/ops.hpp"
#include "json.hpp"

namespace ctdet {

void DetectorConfig::validate() const {
  if (image_size == 0) throw ParameterError("detector: image size must be positive");
  if (scales.empty()) throw ParameterError("detector: no scales configured");
  if (scales.size() > backbone_channels.size()) {
    throw ParameterError("detector: more scales than backbone blocks");
  }
  if (num_source == 0) throw ParameterError("detector: no source classes");
  std::size_t side = image_size;
  for (std::size_t b = 0; b < backbone_channels.size(); ++b) {
    side = (side + 1) / 2;
    if (b >= first_feature_block()) {
      const auto& s = scales[b - first_feature_block()];
      if (s.height != side || s.width != side) {
        throw ParameterError("detector: block " + std::to_string(b) + " yields " +
                             std::to_string(side) + "x" + std::to_string(side) +
                             " but scale expects " + std::to_string(s.height) + "x" +
                             std::to_string(s.width));
      }
    }
  }
}

template <typename T>
std::vector<NamedTensor<T>> DetectorParams<T>::named() const {
  std::vector<NamedTensor<T>> out;
  for (std::size_t i = 0; i < backbone.size(); ++i) {
    out.push_back({"backbone." + std::to_string(i) + ".weight", backbone[i].weight});
    out.push_back({"backbone." + std::to_string(i) + ".bias", backbone[i].bias});
  }
  for (std::size_t k = 0; k < heads.size(); ++k) {
    const std::string p = "head." + std::to_string(k) + ".";
    out.push_back({p + "bbox.weight", heads[k].bbox.weight});
    out.push_back({p + "bbox.bias", heads[k].bbox.bias});
    out.push_back({p + "bg.weight", heads[k].bg.weight});
    out.push_back({p + "bg.bias", heads[k].bg.bias});
    out.push_back({p + "obj.weight", heads[k].obj.weight});
    out.push_back({p + "obj.bias", heads[k].obj.bias});
  }
  return out;
}

template <typename T>
ConvLayer<T> init_conv(std::size_t k, std::size_t in, std::size_t out, double std_dev,
                       double bias, Xoshiro256& rng) {
  std::vector<T> w(k * k * in * out);
  for (auto& v : w) v = static_cast<T>(std_dev * rng.normal());
  return ConvLayer<T>{Tensor<T>({k, k, in, out}, std::move(w), true),
                      Tensor<T>({out}, std::vector<T>(out, static_cast<T>(bias)), true)};
}

// Objectness starts pessimistic so early hard-negative mining is stable.
constexpr double kBgBiasInit = -2.0;
constexpr double kHeadStd = 0.05;

template <typename T>
DetectorParams<T> init_detector(const DetectorConfig& config, std::uint64_t seed) {
  config.validate();
  Xoshiro256 rng(derive_seed(seed, 0xDE7EC7));
  DetectorParams<T> p;
  std::size_t in = 3;
  for (std::size_t out : config.backbone_channels) {
    p.backbone.push_back(init_conv<T>(3, in, out, std::sqrt(2.0 / (9.0 * in)), 0.0, rng));
    in = out;
  }
  for (std::size_t k = 0; k < config.scales.size(); ++k) {
    const std::size_t cin = config.backbone_channels[config.first_feature_block() + k];
    const std::size_t m = config.scales[k].ratios.size();
    ScaleHeads<T> h;
    h.bbox = init_conv<T>(3, cin, 4 * m, kHeadStd, 0.0, rng);
    h.bg = init_conv<T>(3, cin, m, kHeadStd, kBgBiasInit, rng);
    h.obj = init_conv<T>(3, cin, config.num_source * m, kHeadStd, 0.0, rng);
    p.heads.push_back(std::move(h));
  }
  return p;
}

template <typename T>
Tensor<T> conv_forward(const Tensor<T>& x, const ConvLayer<T>& layer, int stride, int padding) {
  return ops::add_bias(ops::conv2d(x, layer.weight, stride, padding), layer.bias);
}

template <typename T>
Tensor<T> image_tensor(const Image& image) {
  std::vector<T> v(image.rgb.begin(), image.rgb.end());
  return Tensor<T>({image.height, image.width, 3}, std::move(v));
}

template <typename T>
std::vector<Tensor<T>> backbone_forward(const Tensor<T>& image, const DetectorParams<T>& params,
                                        const DetectorConfig& config) {
  const Shape expect{config.image_size, config.image_size, 3};
  if (image.shape() != expect) {
    throw DimensionError("backbone_forward: expected image " + shape_str(expect) + ", got " +
                         shape_str(image.shape()));
  }
  if (params.backbone.size() != config.backbone_channels.size()) {
    throw DimensionError("backbone_forward: parameter block count mismatch");
  }
  std::vector<Tensor<T>> maps;
  Tensor<T> x = image;
  for (std::size_t b = 0; b < params.backbone.size(); ++b) {
    x = ops::relu(conv_forward(x, params.backbone[b], 2, 1));
    if (b >= config.first_feature_block()) maps.push_back(x);
  }
  return maps;
}

template <typename T>
FlatHead<T> per_scale_head(const std::vector<Tensor<T>>& features,
                           const std::vector<const ConvLayer<T>*>& layers,
                           const std::vector<ScaleSpec>& scales, std::size_t per_prior) {
  if (features.size() != scales.size() || layers.size() != scales.size()) {
    throw DimensionError("per_scale_head: " + std::to_string(features.size()) + " maps, " +
                         std::to_string(layers.size()) + " heads, " +
                         std::to_string(scales.size()) + " scales");
  }
  FlatHead<T> out;
  std::vector<Tensor<T>> rows;
  for (std::size_t k = 0; k < scales.size(); ++k) {
    Tensor<T> y = conv_forward(features[k], *layers[k], 1, 1);
    const std::size_t m = scales[k].ratios.size();
    if (y.dim(2) != m * per_prior) {
      throw DimensionError("per_scale_head: scale " + std::to_string(k) + " emits " +
                           std::to_string(y.dim(2)) + " channels, expected " +
                           std::to_string(m * per_prior));
    }
    rows.push_back(ops::reshape(y, {y.dim(0) * y.dim(1) * m, per_prior}));
    out.maps.push_back(std::move(y));
  }
  out.flat = rows.size() == 1 ? rows[0] : ops::concat_rows(rows);
  return out;
}

std::vector<GridProvenance> provenance_from_maps(const std::vector<Shape>& shapes,
                                                 const std::vector<std::size_t>& ratios_per_cell) {
  std::vector<GridProvenance> out;
  for (std::size_t k = 0; k < shapes.size(); ++k) {
    for (std::size_t r = 0; r < shapes[k][0]; ++r)
      for (std::size_t c = 0; c < shapes[k][1]; ++c)
        for (std::size_t m = 0; m < ratios_per_cell[k]; ++m) out.push_back({k, r, c, m});
  }
  return out;
}

template <typename T>
HeadOutputs<T> heads_forward(const std::vector<Tensor<T>>& features,
                             const DetectorParams<T>& params, const DetectorConfig& config,
                             const PriorBoxSet& priors, bool with_scores) {
  if (features.size() != config.scales.size() || params.heads.size() != config.scales.size()) {
    throw DimensionError("heads_forward: expected " + std::to_string(config.scales.size()) +
                         " feature maps, got " + std::to_string(features.size()));
  }
  std::vector<Shape> shapes;
  std::vector<std::size_t> ratios;
  for (std::size_t k = 0; k < features.size(); ++k) {
    shapes.push_back(features[k].shape());
    ratios.push_back(config.scales[k].ratios.size());
  }
  HeadOutputs<T> out;
  out.provenance = provenance_from_maps(shapes, ratios);
  if (out.provenance != priors.provenance) {
    throw ConsistencyError("heads_forward: flattened rows do not follow the prior box order");
  }

  auto layers = [&](auto member) {
    std::vector<const ConvLayer<T>*> v;
    for (const auto& h : params.heads) v.push_back(&(h.*member));
    return v;
  };
  out.loc = per_scale_head(features, layers(&ScaleHeads<T>::bbox), config.scales, 4).flat;
  out.bg = per_scale_head(features, layers(&ScaleHeads<T>::bg), config.scales, 1).flat;
  if (with_scores) {
    auto obj = per_scale_head(features, layers(&ScaleHeads<T>::obj), config.scales,
                              config.num_source);
    out.scores = obj.flat;
    out.score_maps = std::move(obj.maps);
  }
  return out;
}

MatchedTargets build_targets(const std::vector<GroundTruth>& gts, const PriorBoxSet& priors,
                             const std::function<int(int)>& class_index, double iou_threshold) {
  MatchedTargets t;
  const std::size_t n = priors.size();
  t.labels.assign(n, -1);
  t.loc_targets.assign(n * 4, 0.0);
  t.positive.assign(n, 0);
  const auto match = match_priors(gts, priors, iou_threshold);
  for (std::size_t p = 0; p < n; ++p) {
    if (match[p] < 0) continue;
    const auto& g = gts[static_cast<std::size_t>(match[p])];
    t.labels[p] = class_index(g.cls);
    const auto off = encode_offsets(g.box, priors.boxes[p]);
    std::copy(off.begin(), off.end(), t.loc_targets.begin() + static_cast<long>(p * 4));
    t.positive[p] = 1;
    ++t.num_pos;
  }
  return t;
}

std::vector<std::size_t> hard_negatives(std::span<const double> bg_logits,
                                        std::span<const std::uint8_t> positive,
                                        std::size_t ratio) {
  std::size_t num_pos = 0;
  std::vector<std::size_t> neg;
  for (std::size_t i = 0; i < positive.size(); ++i) {
    if (positive[i]) {
      ++num_pos;
    } else {
      neg.push_back(i);
    }
  }
  const std::size_t keep = std::min(neg.size(), ratio * num_pos);
  // Loss of a negative is softplus(logit), monotone in the logit.
  std::stable_sort(neg.begin(), neg.end(),
                   [&](std::size_t a, std::size_t b) { return bg_logits[a] > bg_logits[b]; });
  neg.resize(keep);
  std::sort(neg.begin(), neg.end());
  return neg;
}

template <typename T>
std::optional<LossParts<T>> multibox_loss(const Tensor<T>& loc, const Tensor<T>& bg,
                                          const Tensor<T>& cls_logits,
                                          const MatchedTargets& targets, double normalizer) {
  const std::size_t n = targets.labels.size();
  if (loc.shape() != Shape{n, 4} || bg.numel() != n || cls_logits.rank() != 2 ||
      cls_logits.dim(0) != n) {
    throw DimensionError("multibox_loss: predictions " + shape_str(loc.shape()) + ", " +
                         shape_str(bg.shape()) + ", " + shape_str(cls_logits.shape()) +
                         " do not match " + std::to_string(n) + " priors");
  }
  if (targets.num_pos == 0) return std::nullopt;
  if (!(normalizer > 0)) throw ParameterError("multibox_loss: normalizer must be positive");

  std::vector<T> loc_t(targets.loc_targets.begin(), targets.loc_targets.end());
  Tensor<T> l_loc = ops::smooth_l1<T>(loc, loc_t, targets.positive);

  std::vector<double> bg_vals(bg.data().begin(), bg.data().end());
  const auto negs = hard_negatives(bg_vals, targets.positive);
  std::vector<std::uint8_t> mask(targets.positive);
  for (std::size_t i : negs) mask[i] = 1;
  std::vector<T> bg_t(n);
  for (std::size_t i = 0; i < n; ++i) bg_t[i] = targets.positive[i] ? T(1) : T(0);
  Tensor<T> l_bg = ops::sigmoid_bce<T>(ops::reshape(bg, {n}), bg_t, mask);

  Tensor<T> l_cls = ops::softmax_cross_entropy(cls_logits, targets.labels);

  LossParts<T> parts;
  const T inv = static_cast<T>(1.0 / normalizer);
  parts.total = ops::scale(ops::add(ops::add(l_loc, l_bg), l_cls), inv);
  parts.loc = static_cast<double>(l_loc.item()) / normalizer;
  parts.bg = static_cast<double>(l_bg.item()) / normalizer;
  parts.cls = static_cast<double>(l_cls.item()) / normalizer;
  parts.num_pos = targets.num_pos;
  parts.num_neg = negs.size();
  return parts;
}

namespace {

double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

}  // namespace

std::vector<Detection> decode_detections(std::span<const double> loc,
                                         std::span<const double> bg_logits,
                                         std::span<const double> class_logits,
                                         std::size_t num_classes, const PriorBoxSet& priors,
                                         const std::vector<int>& class_ids,
                                         const DecodeOptions& options) {
  const std::size_t n = priors.size();
  if (loc.size() != n * 4 || bg_logits.size() != n || class_logits.size() != n * num_classes ||
      class_ids.size() != num_classes) {
    throw DimensionError("decode_detections: prediction sizes do not match " +
                         std::to_string(n) + " priors x " + std::to_string(num_classes) +
                         " classes");
  }
  std::vector<Box> boxes(n);
  std::vector<double> probs(n * num_classes);
  for (std::size_t p = 0; p < n; ++p) {
    boxes[p] = decode_offsets({loc[p * 4], loc[p * 4 + 1], loc[p * 4 + 2], loc[p * 4 + 3]},
                              priors.boxes[p]);
    const double* row = class_logits.data() + p * num_classes;
    const double mx = *std::max_element(row, row + num_classes);
    double z = 0;
    for (std::size_t c = 0; c < num_classes; ++c) z += std::exp(row[c] - mx);
    const double obj = sigmoid(bg_logits[p]);
    for (std::size_t c = 0; c < num_classes; ++c)
      probs[p * num_classes + c] = obj * std::exp(row[c] - mx) / z;
  }
  std::vector<Detection> out;
  for (std::size_t c = 0; c < num_classes; ++c) {
    std::vector<ScoredBox> cand;
    for (std::size_t p = 0; p < n; ++p) {
      const double s = probs[p * num_classes + c];
      if (s > options.score_threshold) cand.push_back({boxes[p], s});
    }
    for (std::size_t i : nms(cand, options.nms_iou, options.top_k))
      out.push_back({cand[i].box, class_ids[c], cand[i].score});
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const Detection& a, const Detection& b) { return a.score > b.score; });
  if (out.size() > options.top_k) out.resize(options.top_k);
  return out;
}

std::vector<Detection> predict(const Image& image, const DetectorParams<double>& params,
                               const DetectorConfig& config, const PriorBoxSet& priors,
                               const std::vector<int>& source_ids, const DecodeOptions& options) {
  NoGradGuard guard;
  const auto feats = backbone_forward(image_tensor<double>(image), params, config);
  const auto h = heads_forward(feats, params, config, priors);
  return decode_detections(h.loc.data(), h.bg.data(), h.scores.data(), config.num_source, priors,
                           source_ids, options);
}

std::string to_jsonl(const TrainLogRow& row) {
  nlohmann::json j{{"step", row.step},       {"loss", row.loss},
                   {"loss_loc", row.loss_loc}, {"loss_bg", row.loss_bg},
                   {"loss_cls", row.loss_cls}, {"lr", row.lr}};
  return j.dump();
}

void require_finite(double value, const std::string& what) {
  if (!std::isfinite(value)) throw NumericalError(what + " is not finite (" + std::to_string(value) + ")");
}

DetectorParams<float> pretrain_source(const Benchmark& bench, const DetectorConfig& config,
                                      const PretrainConfig& options,
                                      std::vector<TrainLogRow>* log) {
  config.validate();
  if (config.num_source != bench.num_source()) {
    throw ParameterError("pretrain_source: detector has " + std::to_string(config.num_source) +
                         " source classes, benchmark has " + std::to_string(bench.num_source()));
  }
  if (options.batch == 0) throw ParameterError("pretrain_source: batch must be positive");
  const PriorBoxSet priors = generate_priors(config.scales);
  DetectorParams<float> params = init_detector<float>(config, options.seed);
  std::vector<Tensor<float>> trainable;
  for (auto& nt : params.named()) trainable.push_back(nt.tensor);
  Sgd<float> sgd(trainable, options.sgd);

  std::ofstream log_file;
  if (options.log_path) {
    log_file.open(*options.log_path);
    if (!log_file) throw FileError("cannot open log " + options.log_path->string());
  }
  auto class_index = [&](int id) { return bench.domain_index(id); };
  Xoshiro256 flip_rng(derive_seed(options.seed, 0xF11B));

  for (std::size_t step = 0; step < options.steps; ++step) {
    std::vector<Scene> batch;
    std::vector<MatchedTargets> targets;
    std::size_t total_pos = 0;
    for (std::size_t b = 0; b < options.batch; ++b) {
      Scene s = source_scene(bench, derive_seed(derive_seed(options.seed, step), b));
      if (options.flip && flip_rng.uniform() < 0.5) s = flip_horizontal(s);
      targets.push_back(build_targets(s.ground_truth(), priors, class_index));
      total_pos += targets.back().num_pos;
      batch.push_back(std::move(s));
    }
    sgd.zero_grad();
    TrainLogRow row;
    row.step = static_cast<std::int64_t>(step);
    row.lr = options.sgd.lr_at(row.step);
    if (total_pos == 0) continue;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const auto feats = backbone_forward(image_tensor<float>(batch[b].image), params, config);
      const auto h = heads_forward(feats, params, config, priors);
      auto parts = multibox_loss(h.loc, h.bg, h.scores, targets[b], static_cast<double>(total_pos));
      if (!parts) continue;
      parts->total.backward();
      row.loss += parts->loc + parts->bg + parts->cls;
      row.loss_loc += parts->loc;
      row.loss_bg += parts->bg;
      row.loss_cls += parts->cls;
    }
    require_finite(row.loss, "pretraining loss at step " + std::to_string(step));
    sgd.step(row.step);
    if (log) log->push_back(row);
    if (log_file) log_file << to_jsonl(row) << '\n';
  }
  if (options.checkpoint_path) {
    Checkpoint ckpt;
    ckpt.global_step = options.steps;
    store_params(ckpt, "detector.", params.named());
    ckpt.save(*options.checkpoint_path);
  }
  return params;
}

namespace {

template <typename To, typename From>
ConvLayer<To> cast_layer(const ConvLayer<From>& l) {
  return {l.weight.template cast<To>(true), l.bias.template cast<To>(true)};
}

}  // namespace

template <typename To, typename From>
DetectorParams<To> cast_params(const DetectorParams<From>& p) {
  DetectorParams<To> out;
  for (const auto& l : p.backbone) out.backbone.push_back(cast_layer<To>(l));
  for (const auto& h : p.heads)
    out.heads.push_back({cast_layer<To>(h.bbox), cast_layer<To>(h.bg), cast_layer<To>(h.obj)});
  return out;
}

template <typename T>
void store_params(Checkpoint& ckpt, const std::string& prefix,
                  const std::vector<NamedTensor<T>>& params) {
  for (const auto& nt : params)
    ckpt.entries[prefix + nt.name] = CheckpointEntry::from_tensor(nt.tensor);
}

template <typename T>
void restore_params(const Checkpoint& ckpt, const std::string& prefix,
                    const std::vector<NamedTensor<T>>& params) {
  for (const auto& nt : params) {
    const auto it = ckpt.entries.find(prefix + nt.name);
    if (it == ckpt.entries.end()) throw FileError("checkpoint lacks entry " + prefix + nt.name);
    if (it->second.shape != nt.tensor.shape()) {
      throw FileError("checkpoint entry " + prefix + nt.name + " has shape " +
                      shape_str(it->second.shape) + ", expected " + shape_str(nt.tensor.shape()));
    }
    auto values = it->second.template values_as<T>();
    Tensor<T> t = nt.tensor;
    std::copy(values.begin(), values.end(), t.mutable_data().begin());
  }
}

#define CTDET_INSTANTIATE_DETECTOR(T)                                                          \
  template struct DetectorParams<T>;                                                           \
  template ConvLayer<T> init_conv<T>(std::size_t, std::size_t, std::size_t, double, double,    \
                                     Xoshiro256&);                                             \
  template DetectorParams<T> init_detector<T>(const DetectorConfig&, std::uint64_t);           \
  template Tensor<T> conv_forward(const Tensor<T>&, const ConvLayer<T>&, int, int);            \
  template Tensor<T> image_tensor<T>(const Image&);                                            \
  template std::vector<Tensor<T>> backbone_forward(const Tensor<T>&, const DetectorParams<T>&, \
                                                   const DetectorConfig&);                     \
  template FlatHead<T> per_scale_head(const std::vector<Tensor<T>>&,                           \
                                      const std::vector<const ConvLayer<T>*>&,                 \
                                      const std::vector<ScaleSpec>&, std::size_t);             \
  template HeadOutputs<T> heads_forward(const std::vector<Tensor<T>>&,                         \
                                        const DetectorParams<T>&, const DetectorConfig&,       \
                                        const PriorBoxSet&, bool);                             \
  template std::optional<LossParts<T>> multibox_loss(const Tensor<T>&, const Tensor<T>&,       \
                                                     const Tensor<T>&, const MatchedTargets&,  \
                                                     double);                                  \
  template void store_params(Checkpoint&, const std::string&,                                  \
                             const std::vector<NamedTensor<T>>&);                              \
  template void restore_params(const Checkpoint&, const std::string&,                          \
                               const std::vector<NamedTensor<T>>&);

CTDET_INSTANTIATE_DETECTOR(float)
CTDET_INSTANTIATE_DETECTOR(double)

template DetectorParams<double> cast_params<double, float>(const DetectorParams<float>&);
template DetectorParams<float> cast_params<float, double>(const DetectorParams<double>&);
template DetectorParams<double> cast_params<double, double>(const DetectorParams<double>&);
template DetectorParams<float> cast_params<float, float>(const DetectorParams<float>&);

}  // namespace ctdet
