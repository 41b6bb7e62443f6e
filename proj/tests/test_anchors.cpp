#include <cmath>
#include <random>

#include "ctdet/anchors.hpp"
#include "ctdet/errors.hpp"
#include "doctest.h"

using namespace ctdet;

namespace {

Box random_box(std::mt19937_64& rng, double min_side = 0.05, double max_side = 0.5) {
  std::uniform_real_distribution<double> side(min_side, max_side), u(0.0, 1.0);
  const double w = side(rng), h = side(rng);
  return Box{w / 2 + u(rng) * (1 - w), h / 2 + u(rng) * (1 - h), w, h};
}

// Exhaustive reference for the matching contract.
std::vector<int> brute_force_match(const std::vector<GroundTruth>& gts, const PriorBoxSet& priors,
                                   double thr) {
  const std::size_t np = priors.size(), ng = gts.size();
  std::vector<int> out(np, -1);
  if (ng == 0) return out;
  for (std::size_t p = 0; p < np; ++p) {
    double best = -1;
    int arg = -1;
    for (std::size_t g = 0; g < ng; ++g) {
      const double v = iou(gts[g].box, priors.boxes[p]);
      if (v > best) best = v, arg = static_cast<int>(g);
    }
    if (best > thr) out[p] = arg;
  }
  // GTs in descending order of their best overlap; each takes its best free prior.
  std::vector<std::pair<double, std::size_t>> keyed;
  for (std::size_t g = 0; g < ng; ++g) {
    double best = 0;
    for (std::size_t p = 0; p < np; ++p) best = std::max(best, iou(gts[g].box, priors.boxes[p]));
    keyed.push_back({-best, g});
  }
  std::stable_sort(keyed.begin(), keyed.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<bool> taken(np, false);
  for (auto [negbest, g] : keyed) {
    std::size_t arg = np;
    double best = -1;
    for (std::size_t p = 0; p < np; ++p) {
      if (taken[p]) continue;
      const double v = iou(gts[g].box, priors.boxes[p]);
      if (v > best) best = v, arg = p;
    }
    taken[arg] = true;
    out[arg] = static_cast<int>(g);
  }
  return out;
}

std::vector<std::size_t> reference_nms(const std::vector<ScoredBox>& d, double thr) {
  std::vector<bool> alive(d.size(), true);
  std::vector<std::size_t> keep;
  while (true) {
    std::size_t best = d.size();
    for (std::size_t i = 0; i < d.size(); ++i)
      if (alive[i] && (best == d.size() || d[i].score > d[best].score)) best = i;
    if (best == d.size()) break;
    keep.push_back(best);
    alive[best] = false;
    for (std::size_t i = 0; i < d.size(); ++i)
      if (alive[i] && iou(d[i].box, d[best].box) > thr) alive[i] = false;
  }
  return keep;
}

}  // namespace

TEST_SUITE("anchors") {

TEST_CASE("prior generation") {
  const auto priors = generate_priors(default_scale_specs());
  CHECK(priors.size() == 252);
  CHECK(priors.scale_offsets == std::vector<std::size_t>{0, 192, 240, 252});

  const auto one = generate_priors({ScaleSpec{1, 1, 0.3, {1.0}}});
  REQUIRE(one.size() == 1);
  CHECK(one.boxes[0].cx == 0.5);
  CHECK(one.boxes[0].cy == 0.5);

  // Reference 6-scale layout lands near ten thousand priors.
  const std::size_t ref = count_priors(reference_scale_specs());
  CHECK(ref > 5000);
  CHECK(ref < 20000);

  for (std::size_t i = 0; i < priors.size(); ++i) {
    const auto& pv = priors.provenance[i];
    const auto& s = priors.scales[pv.scale];
    CHECK(priors.boxes[i].cx == doctest::Approx((pv.col + 0.5) / s.width));
    CHECK(priors.boxes[i].cy == doctest::Approx((pv.row + 0.5) / s.height));
  }
  // Order: scale, then row-major cell, then ratio.
  CHECK(priors.provenance[4] == GridProvenance{0, 0, 1, 1});

  CHECK_THROWS_AS(generate_priors({}), ParameterError);
  CHECK_THROWS_AS(generate_priors({ScaleSpec{0, 2, 0.2, {1.0}}}), ParameterError);

  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<ScaleSpec> specs(1 + rng() % 4);
    std::size_t expect = 0;
    for (auto& s : specs) {
      s.height = 1 + rng() % 9;
      s.width = 1 + rng() % 9;
      s.ratios.assign(1 + rng() % 4, 1.0);
      for (std::size_t r = 0; r < s.height; ++r)
        for (std::size_t c = 0; c < s.width; ++c) expect += s.ratios.size();
    }
    CHECK(generate_priors(specs).size() == expect);
    CHECK(count_priors(specs) == expect);
  }
}

TEST_CASE("iou") {
  const Box a = Box::from_corners(0, 0, 2, 2), b = Box::from_corners(1, 1, 3, 3);
  CHECK(iou(a, a) == 1.0);
  CHECK(iou(a, Box::from_corners(5, 5, 6, 6)) == 0.0);
  CHECK(iou(a, b) == doctest::Approx(1.0 / 7).epsilon(1e-15));

  std::mt19937_64 rng(8);
  for (int i = 0; i < 200; ++i) {
    const Box x = random_box(rng), y = random_box(rng);
    const double v = iou(x, y);
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
    CHECK(v == iou(y, x));
  }
}

TEST_CASE("prior matching") {
  const auto priors = generate_priors(default_scale_specs());
  CHECK(std::all_of(match_priors({}, priors).begin(), match_priors({}, priors).end(),
                    [](int a) { return a == -1; }));

  const Box exact = priors.boxes[37];
  const auto m = match_priors({{exact, 3}}, priors);
  CHECK(m[37] == 0);
  for (std::size_t p = 0; p < priors.size(); ++p)
    if (p != 37 && iou(exact, priors.boxes[p]) <= 0.5) CHECK(m[p] == -1);

  CHECK_THROWS_AS(match_priors({{Box{0.5, 0.5, 0.0, 0.2}, 0}}, priors), InputError);

  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<GroundTruth> gts(1 + rng() % 4);
    for (auto& g : gts) g.box = random_box(rng, 0.02, 0.6);
    const auto got = match_priors(gts, priors);
    CHECK(got == brute_force_match(gts, priors, 0.5));
    for (std::size_t g = 0; g < gts.size(); ++g)
      CHECK(std::count(got.begin(), got.end(), static_cast<int>(g)) >= 1);
  }
}

TEST_CASE("offset encoding") {
  const Box prior{0.5, 0.5, 0.2, 0.2};
  const auto zero = encode_offsets(prior, prior);
  for (double v : zero) CHECK(v == 0.0);

  const auto o = encode_offsets(Box{0.52, 0.5, 0.4, 0.2}, prior);
  CHECK(o[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(o[1] == 0.0);
  CHECK(o[2] == doctest::Approx(std::log(2.0) / 0.2).epsilon(1e-12));
  CHECK(o[3] == 0.0);

  CHECK_THROWS_AS(encode_offsets(Box{0.5, 0.5, -0.1, 0.2}, prior), InputError);

  std::mt19937_64 rng(21);
  const auto priors = generate_priors(default_scale_specs());
  for (int i = 0; i < 200; ++i) {
    const Box gt = random_box(rng, 0.05, 0.5);
    const Box& p = priors.boxes[rng() % priors.size()];
    const Box back = decode_offsets_raw(encode_offsets(gt, p), p);
    CHECK(std::abs(back.cx - gt.cx) <= 1e-9);
    CHECK(std::abs(back.cy - gt.cy) <= 1e-9);
    CHECK(std::abs(back.w - gt.w) <= 1e-9);
    CHECK(std::abs(back.h - gt.h) <= 1e-9);
    const Box clamped = decode_offsets(encode_offsets(gt, p), p);
    CHECK(std::abs(clamped.cx - gt.cx) <= 1e-9);
  }
  const Box c = decode_offsets({30, -30, 8, 8}, prior);
  CHECK(c.w > 0);
  CHECK(c.h > 0);
  CHECK(c.xmin() >= 0.0);
  CHECK(c.ymax() <= 1.0 + 1e-6);
}

TEST_CASE("non-maximum suppression") {
  const Box b{0.5, 0.5, 0.2, 0.2};
  CHECK(nms({{b, 0.3}}) == std::vector<std::size_t>{0});
  CHECK(nms({{b, 0.8}, {b, 0.9}}) == std::vector<std::size_t>{1});
  CHECK(nms({{b, 0.5}, {b, 0.5}}) == std::vector<std::size_t>{0});

  std::mt19937_64 rng(33);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<ScoredBox> dets(50);
    for (auto& d : dets) d = ScoredBox{random_box(rng, 0.1, 0.4), u(rng)};
    CHECK(nms(dets, 0.45, 200) == reference_nms(dets, 0.45));
    CHECK(nms(dets, 0.45, 3).size() <= 3);
  }
}

}  // TEST_SUITE
