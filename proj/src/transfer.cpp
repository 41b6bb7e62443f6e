#include "ctdet/transfer.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

#include "ctdet/errors.hpp"
#include "ctdet/numerics/ops.hpp"

namespace ctdet {

namespace {

const std::pair<const char*, Variant> kVariantNames[] = {
    {"baseline", Variant::kBaseline},
    {"source_obj_only", Variant::kSourceObjOnly},
    {"transformer_only", Variant::kTransformerOnly},
    {"full", Variant::kFull},
    {"unload_at_test", Variant::kUnloadAtTest},
    {"non_local", Variant::kNonLocal}};

const std::pair<const char*, HeadMode> kHeadModeNames[] = {{"finetune", HeadMode::kFinetune},
                                                          {"preserve", HeadMode::kPreserve},
                                                          {"freeze", HeadMode::kFreeze},
                                                          {"reinit", HeadMode::kReinit}};

bool trains(HeadMode m) { return m != HeadMode::kFreeze; }

}  // namespace

const char* to_string(Variant v) {
  for (const auto& [n, e] : kVariantNames)
    if (e == v) return n;
  return "?";
}

Variant parse_variant(const std::string& s) {
  for (const auto& [n, e] : kVariantNames)
    if (s == n) return e;
  throw ConfigError("unknown variant '" + s +
                    "' (expected baseline, source_obj_only, transformer_only, full, "
                    "unload_at_test or non_local)");
}

std::vector<Variant> table_variants() {
  return {Variant::kBaseline, Variant::kSourceObjOnly, Variant::kTransformerOnly, Variant::kFull,
          Variant::kUnloadAtTest};
}

const char* to_string(HeadMode m) {
  for (const auto& [n, e] : kHeadModeNames)
    if (e == m) return n;
  return "?";
}

HeadMode parse_head_mode(const std::string& s) {
  for (const auto& [n, e] : kHeadModeNames)
    if (s == n) return e;
  throw ConfigError("unknown head mode '" + s + "' (expected finetune, preserve, freeze or reinit)");
}

TransferConfig TransferConfig::for_variant(Variant v, const CtConfig& ct) {
  TransferConfig t;
  t.variant = v;
  t.ct = ct;
  switch (v) {
    case Variant::kBaseline:
      t.source_obj = HeadMode::kFreeze;  // not part of the target pathway
      t.ct.mode = CtMode::kFull;
      break;
    case Variant::kTransformerOnly:
      t.source_obj = HeadMode::kReinit;
      t.ct.mode = CtMode::kFull;
      break;
    case Variant::kSourceObjOnly:
    case Variant::kFull:
      t.ct.mode = CtMode::kFull;
      break;
    case Variant::kUnloadAtTest:
      t.ct.mode = CtMode::kUnloadAtTest;
      break;
    case Variant::kNonLocal:
      t.ct.mode = CtMode::kNonLocal;
      break;
  }
  return t;
}

void TransferConfig::validate() const {
  std::vector<std::string> conflicts;
  if ((variant == Variant::kUnloadAtTest) != (ct.mode == CtMode::kUnloadAtTest)) {
    conflicts.push_back(std::string("variant ") + to_string(variant) + " with context mode " +
                        to_string(ct.mode));
  }
  if ((variant == Variant::kNonLocal) != (ct.mode == CtMode::kNonLocal)) {
    if (variant != Variant::kUnloadAtTest)
      conflicts.push_back(std::string("variant ") + to_string(variant) + " with context mode " +
                          to_string(ct.mode));
  }
  if ((variant == Variant::kTransformerOnly) != (source_obj == HeadMode::kReinit) &&
      variant != Variant::kBaseline) {
    conflicts.push_back(std::string("variant ") + to_string(variant) + " with source OBJ mode " +
                        to_string(source_obj));
  }
  if (variant == Variant::kBaseline && source_obj != HeadMode::kFreeze) {
    conflicts.push_back("baseline does not use the source OBJ head; its mode must be freeze");
  }
  if (!conflicts.empty()) {
    std::string msg = "conflicting transfer settings:";
    for (const auto& c : conflicts) msg += "\n  - " + c;
    throw ConfigError(msg);
  }
}

bool TransferConfig::uses_source_scores() const { return variant != Variant::kBaseline; }

bool TransferConfig::uses_context_module() const {
  return variant != Variant::kBaseline && variant != Variant::kSourceObjOnly;
}

nlohmann::json TransferConfig::to_json() const {
  return {{"variant", to_string(variant)},   {"backbone", to_string(backbone)},
          {"bbox", to_string(bbox)},         {"bg", to_string(bg)},
          {"source_obj", to_string(source_obj)}, {"context", ct.to_json()}};
}

TransferConfig TransferConfig::from_json(const nlohmann::json& j) {
  const Variant v = parse_variant(j.at("variant").get<std::string>());
  TransferConfig t = for_variant(v, j.contains("context") ? CtConfig::from_json(j["context"]) : CtConfig{});
  if (j.contains("context") && !j["context"].contains("mode")) t.ct.mode = for_variant(v).ct.mode;
  if (j.contains("backbone")) t.backbone = parse_head_mode(j["backbone"].get<std::string>());
  if (j.contains("bbox")) t.bbox = parse_head_mode(j["bbox"].get<std::string>());
  if (j.contains("bg")) t.bg = parse_head_mode(j["bg"].get<std::string>());
  if (j.contains("source_obj")) t.source_obj = parse_head_mode(j["source_obj"].get<std::string>());
  return t;
}

template <typename T>
std::vector<NamedTensor<T>> FewShotModel<T>::named() const {
  std::vector<NamedTensor<T>> out;
  for (auto nt : detector.named()) out.push_back({"detector." + nt.name, nt.tensor});
  if (transfer.uses_source_scores())
    for (auto nt : ct.named()) out.push_back(nt);
  for (std::size_t k = 0; k < target_heads.size(); ++k) {
    out.push_back({"target_head." + std::to_string(k) + ".weight", target_heads[k].weight});
    out.push_back({"target_head." + std::to_string(k) + ".bias", target_heads[k].bias});
  }
  return out;
}

template <typename T>
std::vector<Tensor<T>> FewShotModel<T>::trainable() const {
  std::vector<Tensor<T>> out;
  auto add = [&](const ConvLayer<T>& l, HeadMode m) {
    if (!trains(m)) return;
    out.push_back(l.weight);
    out.push_back(l.bias);
  };
  for (const auto& l : detector.backbone) add(l, transfer.backbone);
  for (const auto& h : detector.heads) {
    add(h.bbox, transfer.bbox);
    add(h.bg, transfer.bg);
    if (transfer.uses_source_scores()) add(h.obj, transfer.source_obj);
  }
  if (transfer.variant == Variant::kSourceObjOnly) {
    for (const auto& t : ct.theta) out.push_back(t);
  } else if (transfer.uses_context_module()) {
    for (const auto& t : ct.tensors()) out.push_back(t);
  }
  for (const auto& l : target_heads) add(l, HeadMode::kFinetune);
  return out;
}

template <typename T>
std::size_t FewShotModel<T>::extra_param_count() const {
  if (transfer.variant == Variant::kBaseline) {
    std::size_t n = 0;
    for (const auto& l : target_heads) n += l.weight.numel() + l.bias.numel();
    return n;
  }
  if (transfer.variant == Variant::kSourceObjOnly) {
    std::size_t n = 0;
    for (const auto& t : ct.theta) n += t.numel();
    return n;
  }
  return count_extra_params(detector_config.num_source, num_target(), transfer.ct,
                            detector_config.scales.size());
}

template <typename T>
ModelOutput<T> model_forward(const FewShotModel<T>& model, const PriorBoxSet& priors,
                             const Tensor<T>& image, bool inference) {
  const auto& cfg = model.detector_config;
  const auto feats = backbone_forward(image, model.detector, cfg);
  ModelOutput<T> out;
  out.heads = heads_forward(feats, model.detector, cfg, priors, model.transfer.uses_source_scores());
  out.loc = out.heads.loc;
  out.bg = out.heads.bg;
  if (model.transfer.variant == Variant::kBaseline) {
    std::vector<const ConvLayer<T>*> layers;
    for (const auto& l : model.target_heads) layers.push_back(&l);
    out.logits = per_scale_head(feats, layers, cfg.scales, model.num_target()).flat;
    return out;
  }
  std::vector<std::size_t> ratios;
  for (const auto& s : cfg.scales) ratios.push_back(s.ratios.size());
  out.scores = make_score_set(out.heads.score_maps, ratios, cfg.num_source);
  if (model.transfer.variant == Variant::kSourceObjOnly) {
    out.logits = target_logits(out.scores->flat, model.ct, out.scores->scale_offsets);
    return out;
  }
  out.ct = ct_forward(*out.scores, model.ct, model.transfer.ct, inference);
  out.logits = out.ct->logits;
  return out;
}

FewShotModel<float> make_fewshot_model(const DetectorParams<float>& source,
                                       const DetectorConfig& detector_config,
                                       const TransferConfig& transfer,
                                       const std::vector<int>& target_ids, std::uint64_t seed) {
  transfer.validate();
  detector_config.validate();
  if (target_ids.empty()) throw ParameterError("few-shot model needs at least one target class");
  FewShotModel<float> m;
  m.detector_config = detector_config;
  m.transfer = transfer;
  m.target_ids = target_ids;
  m.detector = cast_params<float>(source);  // deep copy

  Xoshiro256 rng(derive_seed(seed, 0x7A59E7));
  const std::size_t ct = target_ids.size();
  const auto& scales = detector_config.scales;
  for (std::size_t k = 0; k < scales.size(); ++k) {
    const std::size_t cin =
        detector_config.backbone_channels[detector_config.first_feature_block() + k];
    const std::size_t mk = scales[k].ratios.size();
    auto& h = m.detector.heads[k];
    if (transfer.source_obj == HeadMode::kReinit)
      h.obj = init_conv<float>(3, cin, detector_config.num_source * mk, 0.05, 0.0, rng);
    if (transfer.bbox == HeadMode::kReinit) h.bbox = init_conv<float>(3, cin, 4 * mk, 0.05, 0.0, rng);
    if (transfer.bg == HeadMode::kReinit) h.bg = init_conv<float>(3, cin, mk, 0.05, -2.0, rng);
    if (transfer.variant == Variant::kBaseline)
      m.target_heads.push_back(init_conv<float>(3, cin, ct * mk, 0.05, 0.0, rng));
  }
  if (transfer.backbone == HeadMode::kReinit) {
    const auto fresh = init_detector<float>(detector_config, derive_seed(seed, 0xBB));
    m.detector.backbone = fresh.backbone;
  }
  if (transfer.uses_source_scores()) {
    CtConfig cc = transfer.ct;
    if (transfer.variant == Variant::kSourceObjOnly) cc.embedding = Embedding::kNone;
    m.ct = init_ct_params<float>(detector_config.num_source, ct, scales.size(), cc, seed);
  }

  // Frozen tensors leave the tape so backward does not touch them.
  auto freeze = [](ConvLayer<float>& l) {
    l.weight.set_requires_grad(false);
    l.bias.set_requires_grad(false);
  };
  for (auto& l : m.detector.backbone)
    if (!trains(transfer.backbone)) freeze(l);
  for (auto& h : m.detector.heads) {
    if (!trains(transfer.bbox)) freeze(h.bbox);
    if (!trains(transfer.bg)) freeze(h.bg);
    if (!trains(transfer.source_obj) || !transfer.uses_source_scores()) freeze(h.obj);
  }
  return m;
}

template <typename To, typename From>
FewShotModel<To> cast_model(const FewShotModel<From>& m) {
  FewShotModel<To> out;
  out.detector_config = m.detector_config;
  out.transfer = m.transfer;
  out.target_ids = m.target_ids;
  out.detector = cast_params<To>(m.detector);
  out.ct = cast_ct_params<To>(m.ct);
  for (const auto& l : m.target_heads)
    out.target_heads.push_back({l.weight.template cast<To>(true), l.bias.template cast<To>(true)});
  return out;
}

SgdConfig FinetuneConfig::scaled_schedule(const SgdConfig& base, std::size_t base_steps,
                                          std::size_t steps) {
  SgdConfig out = base;
  out.schedule.clear();
  for (const auto& m : base.schedule) {
    const double frac = static_cast<double>(m.step) / static_cast<double>(base_steps);
    out.schedule.push_back({static_cast<std::int64_t>(std::llround(frac * static_cast<double>(steps))),
                            m.factor});
  }
  return out;
}

BatchSampler::BatchSampler(std::size_t n, std::uint64_t seed) : order_(n), rng_(seed) {
  if (n == 0) throw ParameterError("batch sampler over an empty training set");
  std::iota(order_.begin(), order_.end(), 0);
  reshuffle();
}

void BatchSampler::reshuffle() {
  for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng_.below(i)]);
  cursor_ = 0;
}

std::vector<std::size_t> BatchSampler::next(std::size_t batch) {
  std::vector<std::size_t> out;
  while (out.size() < batch) {
    if (cursor_ == order_.size()) reshuffle();
    out.push_back(order_[cursor_++]);
  }
  return out;
}

void train_loop(const TrainForward& forward, const std::vector<Tensor<float>>& params,
                const PriorBoxSet& priors, const std::vector<Scene>& train,
                const FinetuneConfig& options, const std::function<int(int)>& label_of,
                std::vector<TrainLogRow>* log) {
  if (options.batch == 0) throw ParameterError("train_loop: batch must be positive");
  // Both orientations of every training scene, prepared once.
  struct Prepared {
    Tensor<float> image;
    MatchedTargets targets;
  };
  std::vector<std::array<Prepared, 2>> prepared;
  for (const auto& s : train) {
    const Scene f = flip_horizontal(s);
    prepared.push_back({Prepared{image_tensor<float>(s.image),
                                 build_targets(s.ground_truth(), priors, label_of)},
                        Prepared{image_tensor<float>(f.image),
                                 build_targets(f.ground_truth(), priors, label_of)}});
  }
  BatchSampler sampler(train.size(), derive_seed(options.seed, 0xBA7C));
  Xoshiro256 flip_rng(derive_seed(options.seed, 0xF11B));
  Sgd<float> sgd(params, options.sgd);
  std::ofstream log_file;
  if (options.log_path) {
    log_file.open(*options.log_path);
    if (!log_file) throw FileError("cannot open log " + options.log_path->string());
  }

  for (std::size_t step = 0; step < options.steps; ++step) {
    std::vector<const Prepared*> batch;
    std::size_t total_pos = 0;
    for (std::size_t i : sampler.next(options.batch)) {
      const bool flip = options.flip && flip_rng.uniform() < 0.5;
      batch.push_back(&prepared[i][flip ? 1 : 0]);
      total_pos += batch.back()->targets.num_pos;
    }
    TrainLogRow row;
    row.step = static_cast<std::int64_t>(step);
    row.lr = options.sgd.lr_at(row.step);
    sgd.zero_grad();
    if (total_pos == 0) continue;
    for (const Prepared* p : batch) {
      const TrainOutputs out = forward(p->image);
      auto parts = multibox_loss(out.loc, out.bg, out.logits, p->targets,
                                 static_cast<double>(total_pos));
      if (!parts) continue;
      parts->total.backward();
      row.loss += parts->loc + parts->bg + parts->cls;
      row.loss_loc += parts->loc;
      row.loss_bg += parts->bg;
      row.loss_cls += parts->cls;
    }
    require_finite(row.loss, "training loss at step " + std::to_string(step));
    sgd.step(row.step);
    if (log) log->push_back(row);
    if (log_file) log_file << to_jsonl(row) << '\n';
  }
}

void finetune(FewShotModel<float>& model, const std::vector<Scene>& train,
              const FinetuneConfig& options, std::vector<TrainLogRow>* log) {
  const PriorBoxSet priors = generate_priors(model.detector_config.scales);
  std::map<int, int> column;
  for (std::size_t i = 0; i < model.target_ids.size(); ++i)
    column[model.target_ids[i]] = static_cast<int>(i);
  auto label_of = [&](int id) {
    const auto it = column.find(id);
    if (it == column.end()) throw InputError("finetune: class " + std::to_string(id) + " is not a target class");
    return it->second;
  };
  auto forward = [&](const Tensor<float>& image) {
    auto out = model_forward(model, priors, image, false);
    return TrainOutputs{out.loc, out.bg, out.logits};
  };
  train_loop(forward, model.trainable(), priors, train, options, label_of, log);
}

template <typename T>
std::vector<Detection> predict_target(const FewShotModel<T>& model, const PriorBoxSet& priors,
                                      const Image& image, const DecodeOptions& options) {
  NoGradGuard guard;
  const auto out = model_forward(model, priors, image_tensor<T>(image), true);
  return decode_detections(as_double(out.loc), as_double(out.bg), as_double(out.logits),
                           model.num_target(), priors, model.target_ids, options);
}

template <typename T>
Predictor target_predictor(const FewShotModel<T>& model, const PriorBoxSet& priors) {
  return [&model, &priors](const Scene& s) { return predict_target(model, priors, s.image); };
}

Checkpoint save_model(const FewShotModel<float>& model, std::uint64_t step) {
  Checkpoint ckpt;
  ckpt.global_step = step;
  ckpt.metadata = nlohmann::json{{"transfer", model.transfer.to_json()},
                                 {"target_ids", model.target_ids}}
                      .dump();
  store_params(ckpt, "", model.named());
  return ckpt;
}

FewShotModel<float> load_model(const Checkpoint& ckpt, const DetectorConfig& detector_config) {
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(ckpt.metadata);
  } catch (const nlohmann::json::exception& e) {
    throw FileError(std::string("checkpoint metadata is not JSON: ") + e.what());
  }
  if (!meta.contains("transfer") || !meta.contains("target_ids")) {
    throw FileError("checkpoint is not a few-shot model (missing transfer metadata)");
  }
  const TransferConfig transfer = TransferConfig::from_json(meta["transfer"]);
  const auto ids = meta["target_ids"].get<std::vector<int>>();
  FewShotModel<float> m =
      make_fewshot_model(init_detector<float>(detector_config, 0), detector_config, transfer, ids, 0);
  restore_params(ckpt, "", m.named());
  return m;
}

template struct FewShotModel<float>;
template struct FewShotModel<double>;
template ModelOutput<float> model_forward(const FewShotModel<float>&, const PriorBoxSet&,
                                          const Tensor<float>&, bool);
template ModelOutput<double> model_forward(const FewShotModel<double>&, const PriorBoxSet&,
                                           const Tensor<double>&, bool);
template std::vector<Detection> predict_target(const FewShotModel<float>&, const PriorBoxSet&,
                                               const Image&, const DecodeOptions&);
template std::vector<Detection> predict_target(const FewShotModel<double>&, const PriorBoxSet&,
                                               const Image&, const DecodeOptions&);
template Predictor target_predictor(const FewShotModel<float>&, const PriorBoxSet&);
template Predictor target_predictor(const FewShotModel<double>&, const PriorBoxSet&);
template FewShotModel<double> cast_model<double, float>(const FewShotModel<float>&);
template FewShotModel<float> cast_model<float, double>(const FewShotModel<double>&);

}  // namespace ctdet
