#include <cmath>
#include <random>

#include "ctdet/detector.hpp"
#include "ctdet/errors.hpp"
#include "ctdet/numerics/gradcheck.hpp"
#include "ctdet/numerics/ops.hpp"
#include "ctdet/transfer.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace ctdet;

namespace {

DetectorConfig tiny_config() {
  DetectorConfig c;
  c.image_size = 8;
  c.backbone_channels = {3, 4, 4};
  c.scales = {ScaleSpec{2, 2, 0.4, {1.0, 2.0}}, ScaleSpec{1, 1, 0.8, {1.0}}};
  c.num_source = 3;
  return c;
}

Tensor<double> weighted_sum(const std::vector<Tensor<double>>& ts) {
  std::vector<Tensor<double>> parts;
  double phase = 0.3;
  for (const auto& t : ts) {
    std::vector<double> w(t.numel());
    for (auto& v : w) v = std::sin(phase += 0.9);
    parts.push_back(ops::sum(ops::mul(t, Tensor<double>(t.shape(), w))));
  }
  Tensor<double> total = parts[0];
  for (std::size_t i = 1; i < parts.size(); ++i) total = ops::add(total, parts[i]);
  return total;
}

}  // namespace

TEST_SUITE("detector") {

TEST_CASE("backbone shapes and errors") {
  const DetectorConfig cfg;
  auto params = init_detector<double>(cfg, 3);
  Image img{64, 64, std::vector<float>(64 * 64 * 3, 0.5f)};
  const auto maps = backbone_forward(image_tensor<double>(img), params, cfg);
  REQUIRE(maps.size() == 3);
  CHECK(maps[0].shape() == Shape{8, 8, 32});
  CHECK(maps[1].shape() == Shape{4, 4, 32});
  CHECK(maps[2].shape() == Shape{2, 2, 32});

  // zero image through zero biases stays zero
  for (auto& l : params.backbone) std::fill(l.bias.mutable_data().begin(), l.bias.mutable_data().end(), 0.0);
  Image zero{64, 64, std::vector<float>(64 * 64 * 3, 0.0f)};
  for (const auto& m : backbone_forward(image_tensor<double>(zero), params, cfg))
    for (double v : m.data()) CHECK(v == 0.0);

  Image wrong{32, 32, std::vector<float>(32 * 32 * 3, 0.0f)};
  CHECK_THROWS_AS(backbone_forward(image_tensor<double>(wrong), params, cfg), DimensionError);

  DetectorConfig bad = cfg;
  bad.scales.pop_back();
  bad.scales.insert(bad.scales.begin(), ScaleSpec{16, 16, 0.1, {1.0}});
  CHECK_THROWS_AS(bad.validate(), ParameterError);
}

TEST_CASE("backbone gradients on an 8x8 input") {
  const auto cfg = tiny_config();
  auto params = init_detector<double>(cfg, 11);
  std::mt19937_64 rng(5);
  const auto image = testing::random_tensor({8, 8, 3}, rng, 0.0, 1.0);
  std::vector<NamedParam> ps;
  for (const auto& nt : params.named()) {
    if (nt.name.rfind("backbone.", 0) != 0) continue;
    auto t = nt.tensor;
    for (auto& v : t.mutable_data()) v = std::uniform_real_distribution<double>(-0.5, 0.5)(rng);
    ps.push_back({nt.name, nt.tensor});
  }
  LossFn loss = [&] { return weighted_sum(backbone_forward(image, params, cfg)); };
  const auto r = finite_diff_check(loss, ps, 1e-6, 1e-5);
  CHECK(r.max_rel_error <= 1e-5);
}

TEST_CASE("heads follow prior order and match a per-cell conv oracle") {
  const auto cfg = tiny_config();
  const auto priors = generate_priors(cfg.scales);
  const auto params = init_detector<double>(cfg, 2);
  std::mt19937_64 rng(9);
  const auto feats = backbone_forward(testing::random_tensor({8, 8, 3}, rng, 0.0, 1.0), params, cfg);
  const auto out = heads_forward(feats, params, cfg, priors);
  CHECK(out.loc.shape() == Shape{priors.size(), 4});
  CHECK(out.bg.numel() == priors.size());
  REQUIRE(out.scores.shape() == Shape{priors.size(), cfg.num_source});
  CHECK(out.provenance == priors.provenance);

  const std::size_t cs = cfg.num_source;
  for (std::size_t row = 0; row < priors.size(); ++row) {
    const auto& pv = priors.provenance[row];
    const auto& f = feats[pv.scale];
    const auto& w = params.heads[pv.scale].obj.weight;
    const auto& b = params.heads[pv.scale].obj.bias;
    const std::size_t h = f.dim(0), wd = f.dim(1), cin = f.dim(2), cout = w.dim(3);
    for (std::size_t j = 0; j < cs; ++j) {
      const std::size_t oc = pv.ratio * cs + j;
      double acc = b.data()[oc];
      for (int dy = 0; dy < 3; ++dy)
        for (int dx = 0; dx < 3; ++dx) {
          const long y = static_cast<long>(pv.row) + dy - 1, x = static_cast<long>(pv.col) + dx - 1;
          if (y < 0 || x < 0 || y >= static_cast<long>(h) || x >= static_cast<long>(wd)) continue;
          for (std::size_t ci = 0; ci < cin; ++ci) {
            acc += f.data()[(static_cast<std::size_t>(y) * wd + static_cast<std::size_t>(x)) * cin + ci] *
                   w.data()[((static_cast<std::size_t>(dy) * 3 + static_cast<std::size_t>(dx)) * cin + ci) * cout + oc];
          }
        }
      CHECK(out.scores.at(row, j) == doctest::Approx(acc).epsilon(1e-12));
    }
  }

  // scale order swapped without touching the flattening
  auto swapped = feats;
  std::swap(swapped[0], swapped[1]);
  CHECK_THROWS_AS(heads_forward(swapped, params, cfg, priors), ConsistencyError);
}

TEST_CASE("hard negatives") {
  std::vector<double> logits{0.1, 3.0, -1.0, 2.0, 0.5, 5.0, -3.0, 1.5, 0.0, 4.0, -0.5};
  std::vector<std::uint8_t> pos(logits.size(), 0);
  pos[1] = pos[5] = 1;
  const auto neg = hard_negatives(logits, pos, 3);
  // negatives ranked by logit: 9 (4.0), 3 (2.0), 7 (1.5), 4 (0.5), 0 (0.1), 8 (0.0)
  CHECK(neg == std::vector<std::size_t>{0, 3, 4, 7, 8, 9});

  pos.assign(logits.size(), 0);
  CHECK(hard_negatives(logits, pos, 3).empty());
}

TEST_CASE("multibox loss") {
  const auto cfg = tiny_config();
  const auto priors = generate_priors(cfg.scales);
  const std::vector<GroundTruth> gts{{priors.boxes[0], 0}, {priors.boxes[5], 2}};
  const auto t = build_targets(gts, priors, [](int c) { return c; });
  REQUIRE(t.num_pos >= 2);
  const std::size_t n = priors.size();

  // exact offsets, confident objectness, dominant class logit
  std::vector<double> loc(t.loc_targets), bg(n), cls(n * 3, 0.0);
  for (std::size_t p = 0; p < n; ++p) {
    bg[p] = t.positive[p] ? 40.0 : -40.0;
    if (t.positive[p]) cls[p * 3 + static_cast<std::size_t>(t.labels[p])] = 40.0;
  }
  auto perfect = multibox_loss(Tensor<double>({n, 4}, loc), Tensor<double>({n, 1}, bg),
                               Tensor<double>({n, 3}, cls), t, static_cast<double>(t.num_pos));
  REQUIRE(perfect);
  CHECK(perfect->total.item() < 1e-12);
  CHECK(perfect->num_neg == std::min(3 * t.num_pos, n - t.num_pos));

  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    auto l = multibox_loss(testing::random_tensor({n, 4}, rng, -3, 3), testing::random_tensor({n, 1}, rng, -3, 3),
                           testing::random_tensor({n, 3}, rng, -3, 3), t, static_cast<double>(t.num_pos));
    REQUIRE(l);
    CHECK(l->loc >= 0);
    CHECK(l->bg >= 0);
    CHECK(l->cls >= 0);
    CHECK(std::isfinite(l->total.item()));
    CHECK(l->total.item() == doctest::Approx(l->loc + l->bg + l->cls).epsilon(1e-12));
  }

  MatchedTargets none;
  none.labels.assign(n, -1);
  none.loc_targets.assign(n * 4, 0.0);
  none.positive.assign(n, 0);
  CHECK_FALSE(multibox_loss(Tensor<double>({n, 4}, loc), Tensor<double>({n, 1}, bg),
                            Tensor<double>({n, 3}, cls), none, 1.0));
}

TEST_CASE("decoded scores lie in (0, 1)") {
  const auto cfg = tiny_config();
  const auto priors = generate_priors(cfg.scales);
  std::mt19937_64 rng(4);
  const std::size_t n = priors.size();
  const auto loc = testing::random_tensor({n, 4}, rng, -1, 1);
  const auto bg = testing::random_tensor({n}, rng, -6, 6);
  const auto cls = testing::random_tensor({n, 3}, rng, -6, 6);
  DecodeOptions opt;
  opt.score_threshold = 0.0;
  const auto dets = decode_detections(loc.data(), bg.data(), cls.data(), 3, priors, {7, 8, 9}, opt);
  CHECK_FALSE(dets.empty());
  for (const auto& d : dets) {
    CHECK(d.score > 0.0);
    CHECK(d.score < 1.0);
    CHECK((d.cls >= 7 && d.cls <= 9));
  }
}

TEST_CASE("fine-tuning leaves frozen tensors bit-identical") {
  const Benchmark bench = default_benchmark();
  const DetectorConfig cfg;
  const auto source = init_detector<float>(cfg, 1);
  TransferConfig transfer = TransferConfig::for_variant(Variant::kFull);
  transfer.bg = HeadMode::kFreeze;
  auto model = make_fewshot_model(source, cfg, transfer, bench.target_ids(), 2);
  const auto before = model.named();
  std::vector<std::vector<float>> snapshot;
  for (const auto& nt : before) snapshot.emplace_back(nt.tensor.data().begin(), nt.tensor.data().end());

  const auto ep = sample_episode(bench, {1, bench.target_ids(), 0, 0}, 0);
  FinetuneConfig ft;
  ft.steps = 3;
  ft.batch = 2;
  finetune(model, ep.train, ft);

  const auto after = model.named();
  REQUIRE(after.size() == before.size());
  bool trained_moved = false;
  for (std::size_t i = 0; i < after.size(); ++i) {
    const std::vector<float> now(after[i].tensor.data().begin(), after[i].tensor.data().end());
    const bool frozen = after[i].name.find("backbone.") != std::string::npos ||
                        after[i].name.find(".bg.") != std::string::npos;
    if (frozen) {
      CHECK_MESSAGE(now == snapshot[i], after[i].name);
    } else if (now != snapshot[i]) {
      trained_moved = true;
    }
  }
  CHECK(trained_moved);
}

TEST_CASE("baseline adds more parameters than the context pathway") {
  const Benchmark bench = default_benchmark();
  const DetectorConfig cfg;
  const auto source = init_detector<float>(cfg, 1);
  const auto base = make_fewshot_model(source, cfg, TransferConfig::for_variant(Variant::kBaseline),
                                       bench.target_ids(), 0);
  const auto full = make_fewshot_model(source, cfg, TransferConfig::for_variant(Variant::kFull),
                                       bench.target_ids(), 0);
  CHECK(base.extra_param_count() > full.extra_param_count());
  CHECK(full.extra_param_count() == 4 * 12 * 12 + 12 * 4);
}

TEST_CASE("checkpoint round-trip reproduces evaluation") {
  const Benchmark bench = default_benchmark();
  const DetectorConfig cfg;
  const auto priors = generate_priors(cfg.scales);
  const auto source = init_detector<float>(cfg, 4);
  auto model = make_fewshot_model(source, cfg, TransferConfig::for_variant(Variant::kFull),
                                  bench.target_ids(), 5);
  // move off the zero init so the context module matters
  std::mt19937_64 rng(3);
  for (const auto& nt : model.ct.named()) {
    auto t = nt.tensor;
    for (auto& v : t.mutable_data()) v = static_cast<float>(std::normal_distribution<double>(0, 0.1)(rng));
  }
  const auto restored = load_model(Checkpoint::deserialize(save_model(model, 7).serialize()), cfg);
  const auto scenes = sample_episode(bench, {1, bench.target_ids(), 0, 0}, 8).test;
  const auto a = evaluate_model(target_predictor(cast_model<double>(model), priors), scenes, bench,
                                bench.target_ids());
  const auto b = evaluate_model(target_predictor(cast_model<double>(restored), priors), scenes, bench,
                                bench.target_ids());
  CHECK(a == b);
  CHECK(a.to_json().dump() == b.to_json().dump());
}

}  // TEST_SUITE
