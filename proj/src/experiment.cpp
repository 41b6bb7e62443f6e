#include "ctdet/experiment.hpp"

#include <cmath>
#include <filesystem>
#include <functional>
#include <numeric>

#include "ctdet/errors.hpp"
#include "ctdet/numerics/gradcheck.hpp"
#include "ctdet/numerics/ops.hpp"

namespace ctdet {

namespace {

nlohmann::json pretrain_identity(const ExperimentConfig& config, const DetectorConfig& det) {
  return {{"kind", "source_detector"},
          {"pretrain", config.to_json()["pretrain"]},
          {"image_size", det.image_size},
          {"backbone_channels", det.backbone_channels},
          {"num_source", det.num_source}};
}

}  // namespace

SourceModel obtain_source_detector(const ExperimentConfig& config,
                                   const std::optional<std::filesystem::path>& cache,
                                   const std::optional<std::filesystem::path>& log_path) {
  const Benchmark bench = default_benchmark();
  const DetectorConfig det;
  const nlohmann::json identity = pretrain_identity(config, det);
  SourceModel out;
  if (cache && std::filesystem::exists(*cache)) {
    const Checkpoint ckpt = Checkpoint::load(*cache);
    nlohmann::json meta;
    try {
      meta = nlohmann::json::parse(ckpt.metadata);
    } catch (const nlohmann::json::exception&) {
      meta = nullptr;
    }
    if (meta == identity) {
      out.params = init_detector<float>(det, config.pretrain.seed);
      restore_params(ckpt, "detector.", out.params.named());
      out.from_cache = true;
      return out;
    }
  }
  PretrainConfig options = config.pretrain;
  options.log_path = log_path;
  out.params = pretrain_source(bench, det, options, &out.log);
  if (cache) {
    if (cache->has_parent_path()) std::filesystem::create_directories(cache->parent_path());
    Checkpoint ckpt;
    ckpt.global_step = options.steps;
    ckpt.metadata = identity.dump();
    store_params(ckpt, "detector.", out.params.named());
    ckpt.save(*cache);
  }
  return out;
}

DetectorParams<float> load_source_detector(const std::filesystem::path& path) {
  const Checkpoint ckpt = Checkpoint::load(path);
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(ckpt.metadata);
  } catch (const nlohmann::json::exception&) {
    meta = nullptr;
  }
  if (!meta.is_object() || meta.value("kind", "") != "source_detector") {
    throw FileError("'" + path.string() + "' is not a source detector checkpoint");
  }
  const DetectorConfig det;
  auto params = init_detector<float>(det, 0);
  restore_params(ckpt, "detector.", params.named());
  return params;
}

EvalReport evaluate_source(const DetectorParams<float>& params, const ExperimentConfig& config) {
  const Benchmark bench = default_benchmark();
  const DetectorConfig det;
  const PriorBoxSet priors = generate_priors(det.scales);
  const auto scenes = source_test_scenes(bench, config.source_test_scenes);
  const auto p = cast_params<double>(params);
  const auto ids = bench.source_ids();
  auto predictor = [&](const Scene& s) { return predict(s.image, p, det, priors, ids); };
  EvalReport r = evaluate_model(predictor, scenes, bench, ids, config.eval);
  r.metadata = {{"config", config.to_json()}, {"split", "source"}};
  return r;
}

EvalReport evaluate_fewshot(const FewShotModel<float>& model, const std::vector<Scene>& scenes,
                            const ExperimentConfig& config) {
  const Benchmark bench = default_benchmark();
  const PriorBoxSet priors = generate_priors(model.detector_config.scales);
  if (config.precision == Precision::kSingle) {
    return evaluate_model(target_predictor(model, priors), scenes, bench, model.target_ids, config.eval);
  }
  const auto md = cast_model<double>(model);
  return evaluate_model(target_predictor(md, priors), scenes, bench, model.target_ids, config.eval);
}

void save_fewshot(const FewShotModel<float>& model, const ExperimentConfig& config,
                  const std::filesystem::path& path) {
  Checkpoint ckpt = save_model(model, config.finetune.steps);
  auto meta = nlohmann::json::parse(ckpt.metadata);
  meta["config"] = config.to_json();
  ckpt.metadata = meta.dump();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  ckpt.save(path);
}

LoadedFewShot load_fewshot(const std::filesystem::path& path) {
  const Checkpoint ckpt = Checkpoint::load(path);
  const DetectorConfig det;
  FewShotModel<float> model = load_model(ckpt, det);
  const auto meta = nlohmann::json::parse(ckpt.metadata);
  if (!meta.contains("config")) throw FileError("checkpoint " + path.string() + " carries no run config");
  return {std::move(model), ExperimentConfig::from_json(meta["config"])};
}

FewShotRun run_fewshot(const ExperimentConfig& config, const DetectorParams<float>& source,
                       const std::optional<std::filesystem::path>& log_path) {
  const Benchmark bench = default_benchmark();
  const DetectorConfig det;
  const Episode ep = sample_episode(bench, config.episode(bench), config.test_scenes);
  const std::uint64_t run_seed = derive_seed(config.seed, config.trial);
  FewShotRun run{make_fewshot_model(source, det, config.transfer(), bench.target_ids(), run_seed), {}, {}};
  FinetuneConfig options = config.finetune;
  options.seed = run_seed;
  options.log_path = log_path;
  finetune(run.model, ep.train, options, &run.log);
  run.report = evaluate_fewshot(run.model, ep.test, config);
  run.report.metadata = {{"config", config.to_json()},
                         {"split", "target"},
                         {"train_scenes", ep.train.size()},
                         {"extra_params", run.model.extra_param_count()},
                         {"final_loss", run.log.empty() ? 0.0 : run.log.back().loss}};
  return run;
}

nlohmann::json run_incremental(const ExperimentConfig& config, const DetectorParams<float>& source,
                               const std::optional<std::filesystem::path>& log_path) {
  const Benchmark bench = default_benchmark();
  const DetectorConfig det;
  const PriorBoxSet priors = generate_priors(det.scales);
  const Episode ep = sample_episode(bench, config.episode(bench), config.test_scenes);
  const auto source_scenes = source_test_scenes(bench, config.source_test_scenes);
  const std::uint64_t run_seed = derive_seed(config.seed, config.trial);
  IncrementalModel<float> model =
      make_incremental_model(source, det, config.context, bench.target_ids(), run_seed);

  auto measure = [&] {
    const auto md = cast_incremental<double>(model);
    const auto s = evaluate_model(joint_predictor(md, priors), source_scenes, bench,
                                  bench.source_ids(), config.eval);
    const auto t = evaluate_model(joint_predictor(md, priors), ep.test, bench, bench.target_ids(),
                                  config.eval);
    return nlohmann::json{{"source_map", s.map}, {"target_map", t.map}};
  };
  const nlohmann::json before = measure();
  const auto train = build_incremental_trainset(bench, ep.train, config.shots, run_seed);
  FinetuneConfig options = config.finetune;
  options.steps = config.incremental_steps;
  options.sgd.learning_rate = config.incremental_lr;
  options.sgd = incremental_schedule(options.sgd, config.shots, options.steps);
  options.seed = run_seed;
  options.log_path = log_path;
  std::vector<TrainLogRow> log;
  incremental_finetune(model, train, options, &log);
  const nlohmann::json after = measure();
  const double s0 = before["source_map"], s1 = after["source_map"];
  const double t0 = before["target_map"], t1 = after["target_map"];
  return {{"config", config.to_json()},
          {"train_scenes", train.size()},
          {"before", before},
          {"after", after},
          {"source_retention", s0 > 0 ? s1 / s0 : 0.0},
          {"target_gain", t1 - t0}};
}

AffinityStats affinity_concentration(const FewShotModel<double>& model,
                                     const std::vector<Scene>& scenes,
                                     const std::vector<int>& classes, std::size_t k,
                                     std::size_t max_examples) {
  const auto& t = model.transfer;
  if (!t.uses_context_module() || t.variant == Variant::kSourceObjOnly ||
      t.ct.mode == CtMode::kUnloadAtTest) {
    throw ParameterError(std::string("variant ") + to_string(t.variant) +
                         " has no attention at inference");
  }
  NoGradGuard guard;
  const PriorBoxSet priors = generate_priors(model.detector_config.scales);
  AffinityStats stats;
  stats.k = k;
  double total = 0;
  for (const auto& scene : scenes) {
    std::vector<Box> boxes;
    for (const auto& g : scene.ground_truth())
      if (std::find(classes.begin(), classes.end(), g.cls) != classes.end()) boxes.push_back(g.box);
    if (boxes.empty()) continue;
    const auto out = model_forward(model, priors, image_tensor<double>(scene.image), true);
    const auto& fields = out.ct->fields->provenance;
    for (std::size_t i = 0; i < priors.size(); ++i) {
      bool positive = false;
      for (const auto& b : boxes) positive = positive || iou(priors.boxes[i], b) >= 0.5;
      if (!positive) continue;
      const auto top = top_k_affinity(out.ct->affinity, i, std::min(k, fields.size()), fields);
      double mass = 0;
      for (const auto& e : top) mass += e.weight;
      total += mass;
      ++stats.positives;
      if (stats.examples.size() < max_examples) {
        auto dump = affinity_dump(priors.provenance[i], priors.boxes[i], top);
        dump["scene_seed"] = scene.seed;
        stats.examples.push_back(dump);
      }
    }
  }
  stats.mean_topk_mass = stats.positives ? total / static_cast<double>(stats.positives) : 0.0;
  return stats;
}

nlohmann::json GradSuiteReport::to_json() const {
  nlohmann::json e = nlohmann::json::array();
  for (const auto& x : entries) {
    e.push_back({{"name", x.name},
                 {"max_rel_error", x.max_rel_error},
                 {"param", x.param},
                 {"analytic", x.analytic},
                 {"numeric", x.numeric}});
  }
  return {{"draws", draws}, {"tolerance", tolerance}, {"max_rel_error", max_rel_error},
          {"passed", passed()}, {"checks", e}};
}

namespace {

using Rng = Xoshiro256;

Tensor<double> rand_tensor(Shape shape, Rng& rng, double lo = -1, double hi = 1) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor<double>(std::move(shape), std::move(v), true);
}

// Distinct values at least 2/n apart in [-1, 1], so no max-pool window
// holds a near tie that a finite-difference step could flip.
Tensor<double> spread_tensor(Shape shape, Rng& rng) {
  const std::size_t n = shape_numel(shape);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = -1 + 2 * (static_cast<double>(order[i]) + 0.5) / static_cast<double>(n);
  return Tensor<double>(std::move(shape), std::move(v), true);
}

// Steps for the central differences; see step_sweep_check.
const std::vector<double> kSteps{1e-6, 1e-5, 1e-4, 1e-3};

// Weighted sum giving each output element a distinct cotangent.
Tensor<double> project(const Tensor<double>& t) {
  std::vector<double> w(t.numel());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::sin(1.0 + 0.7 * static_cast<double>(i));
  return ops::sum(ops::mul(t, Tensor<double>(t.shape(), w)));
}

GradSuiteEntry check(const LossFn& loss, std::vector<NamedParam>& ps, double tol) {
  const auto r = step_sweep_check(loss, ps, kSteps, tol);
  GradSuiteEntry out;
  for (const auto& p : r.params) {
    if (out.param.empty() || p.max_rel_error > out.max_rel_error) {
      out.max_rel_error = p.max_rel_error;
      out.param = p.name + "[" + std::to_string(p.worst_index) + "]";
      out.analytic = p.analytic;
      out.numeric = p.numeric;
    }
  }
  return out;
}

GradSuiteEntry worse(GradSuiteEntry a, GradSuiteEntry b) {
  return b.max_rel_error > a.max_rel_error ? b : a;
}

GradSuiteEntry ops_draw(Rng& rng, double tol) {
  const std::size_t m = 2 + rng.below(3), k = 2 + rng.below(3), n = 2 + rng.below(3);
  auto a = rand_tensor({m, k}, rng), b = rand_tensor({k, n}, rng), c = rand_tensor({m, k}, rng);
  auto bias = rand_tensor({k}, rng);
  auto img = spread_tensor({5, 4, 2}, rng);
  auto w = rand_tensor({3, 3, 2, 3}, rng);
  std::vector<int> targets(m);
  for (auto& t : targets) t = static_cast<int>(rng.below(n));
  targets[0] = -1;
  std::vector<double> bce_t(m * k), l1_t(m * k);
  for (auto& t : bce_t) t = static_cast<double>(rng.below(2));
  for (auto& t : l1_t) t = rng.uniform(-3, 3);
  std::vector<std::uint8_t> mask(m * k, 1), row_mask(m, 1);
  mask[1] = 0;
  row_mask[0] = 0;
  std::vector<NamedParam> ps{{"a", a}, {"b", b}, {"c", c}, {"bias", bias}, {"img", img}, {"w", w}};
  const std::vector<LossFn> terms{
      [&] { return project(ops::matmul(a, b)); },
      [&] { return project(ops::transpose(a)); },
      [&] { return project(ops::sub(ops::mul(a, c), ops::scale(c, 0.3))); },
      [&] { return project(ops::add_bias(a, bias)); },
      [&] { return project(ops::softmax_rows(ops::matmul(a, b))); },
      [&] { return project(ops::l2_normalize_rows(c)); },
      [&] { return project(ops::neg_sq_distance(a, c)); },
      [&] { return project(ops::concat_rows<double>({a, c})); },
      [&] { return project(ops::concat_cols(a, c)); },
      [&] { return project(ops::slice_rows(c, 1, m)); },
      [&] { return project(ops::reshape(a, {m * k})); },
      [&] { return project(ops::relu(ops::add(a, ops::scale(c, 0.5)))); },
      [&] { return project(ops::spatial_max_pool(img, 2, 2)); },
      [&] { return project(ops::spatial_avg_pool(img, 3, 2)); },
      [&] { return project(ops::conv2d(img, w, 2, 1)); },
      [&] { return project(ops::conv2d(img, w, 1, 0)); },
      [&] { return ops::softmax_cross_entropy(ops::matmul(c, b), targets); },
      [&] { return ops::sigmoid_bce<double>(ops::reshape(c, {m * k}), bce_t, mask); },
      [&] { return ops::smooth_l1<double>(ops::scale(a, 4.0), l1_t, row_mask); },
  };
  GradSuiteEntry worst;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    auto e = check(terms[i], ps, tol);
    e.param = "term " + std::to_string(i) + " " + e.param;
    worst = i == 0 ? e : worse(worst, e);
  }
  worst.name = "ops";
  return worst;
}

GradSuiteEntry context_draw(Rng& rng, std::size_t draw, double tol) {
  CtConfig cfg;
  const Metric metrics[] = {Metric::kDot, Metric::kNegEuclidean, Metric::kCosine};
  const Embedding embeddings[] = {Embedding::kResidual, Embedding::kPlain, Embedding::kNone};
  const PoolKind pools[] = {PoolKind::kMax, PoolKind::kAvg, PoolKind::kNone};
  cfg.metric = metrics[draw % 3];
  cfg.embedding = embeddings[(draw / 3) % 3];
  cfg.pool = pools[(draw / 2) % 3];
  cfg.theta = draw % 2 ? ThetaSharing::kPerScale : ThetaSharing::kShared;
  cfg.mode = draw % 4 == 3 ? CtMode::kNonLocal : CtMode::kFull;
  cfg.pooling = {PoolSpec{2, 0, true}, PoolSpec{}};
  const std::size_t cs = 2 + rng.below(3), ct = 2 + rng.below(2), m = 1 + rng.below(2);
  std::vector<Tensor<double>> maps{spread_tensor({4, 4, m * cs}, rng), spread_tensor({2, 2, m * cs}, rng)};
  CtParams<double> p;
  if (cfg.embedding != Embedding::kNone) {
    p.wf = rand_tensor({cs, cs}, rng, -0.3, 0.3);
    p.wg = rand_tensor({cs, cs}, rng, -0.3, 0.3);
    p.wh = rand_tensor({cs, cs}, rng, -0.3, 0.3);
    p.wphi = rand_tensor({cs, cs}, rng, -0.3, 0.3);
  }
  p.theta.push_back(rand_tensor({cs, ct}, rng));
  if (cfg.theta == ThetaSharing::kPerScale) p.theta.push_back(rand_tensor({cs, ct}, rng));
  const std::size_t dp = 20 * m;
  std::vector<int> labels(dp);
  // A few labelled rows keep the loss a short sum.
  for (auto& l : labels) l = rng.below(4) == 0 ? static_cast<int>(rng.below(ct)) : -1;
  labels[0] = 0;
  std::vector<NamedParam> ps{{"map0", maps[0]}, {"map1", maps[1]}};
  for (const auto& nt : p.named()) ps.push_back({nt.name, nt.tensor});
  LossFn loss = [&] {
    const auto scores = make_score_set(maps, {m, m}, cs);
    return ops::softmax_cross_entropy(ct_forward(scores, p, cfg, false).logits, labels);
  };
  auto e = check(loss, ps, tol);
  e.name = std::string("context.") + to_string(cfg.metric) + "." + to_string(cfg.embedding) + "." +
           to_string(cfg.pool) + "." + to_string(cfg.theta) + "." + to_string(cfg.mode);
  return e;
}

GradSuiteEntry incremental_draw(Rng& rng, double tol) {
  const std::size_t dp = 3 + rng.below(5), cs = 2 + rng.below(3), ct = 2 + rng.below(2);
  auto p = rand_tensor({dp, cs}, rng, -2, 2);
  auto adapter = rand_tensor({cs, cs}, rng, -0.3, 0.3);
  auto theta = rand_tensor({cs, ct}, rng);
  std::vector<int> labels(dp);
  for (auto& l : labels) l = static_cast<int>(rng.below(cs + ct));
  std::vector<NamedParam> ps{{"scores", p}, {"adapter", adapter}, {"theta", theta}};
  LossFn loss = [&] {
    return ops::softmax_cross_entropy(joint_logits(p, adapter, ops::matmul(p, theta)), labels);
  };
  auto e = check(loss, ps, tol);
  e.name = "incremental.joint";
  return e;
}

// 8x8 images, three blocks, 2x2 (two ratios) and 1x1 (one ratio) scales.
DetectorConfig miniature_detector() {
  DetectorConfig c;
  c.image_size = 8;
  c.backbone_channels = {3, 4, 4};
  c.scales = {ScaleSpec{2, 2, 0.4, {1.0, 2.0}}, ScaleSpec{1, 1, 0.8, {1.0}}};
  c.num_source = 3;
  return c;
}

GradSuiteEntry finetune_loss_draw(Rng& rng, std::size_t draw, double tol) {
  const Variant variants[] = {Variant::kFull, Variant::kBaseline, Variant::kTransformerOnly,
                              Variant::kSourceObjOnly, Variant::kNonLocal};
  const Variant v = variants[draw % 5];
  const DetectorConfig det = miniature_detector();
  const PriorBoxSet priors = generate_priors(det.scales);
  CtConfig ct;
  ct.pooling = {PoolSpec{}, PoolSpec{}};  // every prior its own field: more varied context rows
  TransferConfig transfer = TransferConfig::for_variant(v, ct);
  transfer.backbone = HeadMode::kFinetune;
  const std::vector<int> targets{100, 101};
  const auto source = init_detector<float>(det, rng.next());
  auto model = cast_model<double>(make_fewshot_model(source, det, transfer, targets, rng.next()));
  // Redrawn at unit scale: with the training init the gradients of deep
  // weights sit near the finite-difference roundoff floor. Source scores stay
  // small so the attention is not saturated; larger h, phi and theta lift the
  // gradients reaching f and g.
  for (const auto& nt : model.named()) {
    auto t = nt.tensor;
    double r = 0.5;
    if (nt.name.find(".obj.") != std::string::npos) r = 0.3;
    if (nt.name == "ct.h" || nt.name == "ct.phi" || nt.name.rfind("ct.theta", 0) == 0) r = 2.0;
    for (auto& x : t.mutable_data()) x = rng.uniform(-r, r);
  }
  const auto image = Tensor<double>({8, 8, 3}, rand_tensor({8 * 8 * 3}, rng, 0, 1).values());
  std::vector<GroundTruth> gts;
  const std::size_t n = 1 + rng.below(2);
  // Close to priors inside the image, so every regression residual stays in
  // the quadratic part of smooth L1. In the linear part two residuals of
  // opposite sign cancel to an exactly zero gradient that finite differences
  // only see as roundoff.
  std::vector<std::size_t> inside;
  for (std::size_t i = 0; i < priors.size(); ++i) {
    const Box& p = priors.boxes[i];
    if (p.xmin() > 0.01 && p.ymin() > 0.01 && p.xmax() < 0.99 && p.ymax() < 0.99) inside.push_back(i);
  }
  for (std::size_t i = 0; i < n; ++i) {
    const Box& p = priors.boxes[inside[rng.below(inside.size())]];
    gts.push_back({Box{p.cx + 0.005 * rng.uniform(-1, 1), p.cy + 0.005 * rng.uniform(-1, 1),
                       p.w * rng.uniform(0.97, 1.03), p.h * rng.uniform(0.97, 1.03)},
                   targets[i % 2]});
  }
  const auto matched = build_targets(gts, priors, [](int id) { return id - 100; });
  // Only what this variant trains.
  std::vector<NamedParam> ps;
  const auto trained = model.trainable();
  for (const auto& nt : model.named()) {
    for (const auto& t : trained) {
      if (t.node() == nt.tensor.node()) ps.push_back({nt.name, nt.tensor});
    }
  }
  LossFn loss = [&] {
    const auto out = model_forward(model, priors, image, false);
    return multibox_loss(out.loc, out.bg, out.logits, matched, static_cast<double>(matched.num_pos))
        ->total;
  };
  auto e = check(loss, ps, tol);
  e.name = std::string("finetune_loss.") + to_string(v);
  return e;
}

}  // namespace

GradSuiteReport run_gradient_suite(std::uint64_t seed, std::size_t draws, double tolerance) {
  GradSuiteReport rep;
  rep.tolerance = tolerance;
  rep.draws = draws;
  for (std::size_t d = 0; d < draws; ++d) {
    Rng rng(derive_seed(seed, d));
    const std::string tag = "[" + std::to_string(d) + "]";
    auto add = [&](GradSuiteEntry e) {
      e.name += tag;
      rep.max_rel_error = std::max(rep.max_rel_error, e.max_rel_error);
      rep.entries.push_back(std::move(e));
    };
    add(ops_draw(rng, tolerance));
    add(context_draw(rng, d, tolerance));
    add(incremental_draw(rng, tolerance));
    add(finetune_loss_draw(rng, d, tolerance));
  }
  return rep;
}

}  // namespace ctdet
