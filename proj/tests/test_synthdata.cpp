#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "ctdet/errors.hpp"
#include "ctdet/synthdata.hpp"
#include "doctest.h"

using namespace ctdet;

namespace {

// Nearest-centroid classifier on 12x12 object crops: the pixel-only witness
// that confusion-group members cannot be told apart without context.
std::vector<float> crop_features(const Scene& s, const Box& b) {
  constexpr int kSide = 12;
  std::vector<float> f;
  f.reserve(kSide * kSide * 3);
  const double n = static_cast<double>(s.image.width);
  for (int y = 0; y < kSide; ++y)
    for (int x = 0; x < kSide; ++x) {
      const double px = (b.xmin() + (x + 0.5) / kSide * b.w) * n;
      const double py = (b.ymin() + (y + 0.5) / kSide * b.h) * n;
      const auto ix = static_cast<std::size_t>(std::clamp(px, 0.0, n - 1));
      const auto iy = static_cast<std::size_t>(std::clamp(py, 0.0, n - 1));
      for (std::size_t c = 0; c < 3; ++c) f.push_back(s.image.at(iy, ix, c));
    }
  return f;
}

struct CentroidResult {
  double overall = 0;
  double within_group = 0;
};

CentroidResult centroid_oracle(const Benchmark& bench, const RenderOptions& opts) {
  const auto ids = bench.target_ids();
  std::map<int, std::vector<double>> centroid;
  constexpr int kTrain = 60, kTest = 60;
  for (int cls : ids) {
    std::vector<double> acc;
    for (int i = 0; i < kTrain; ++i) {
      const Scene s = single_class_scene(bench, cls, derive_seed(1000 + cls, i), opts);
      const auto f = crop_features(s, s.objects[0].box);
      if (acc.empty()) acc.assign(f.size(), 0.0);
      for (std::size_t j = 0; j < f.size(); ++j) acc[j] += f[j] / kTrain;
    }
    centroid[cls] = acc;
  }
  auto dist = [](const std::vector<float>& f, const std::vector<double>& c) {
    double d = 0;
    for (std::size_t j = 0; j < f.size(); ++j) d += (f[j] - c[j]) * (f[j] - c[j]);
    return d;
  };
  int correct = 0, total = 0, within_correct = 0;
  for (int cls : ids) {
    const int group = *bench.spec(cls).confusion_group;
    for (int i = 0; i < kTest; ++i) {
      const Scene s = single_class_scene(bench, cls, derive_seed(5000 + cls, i), opts);
      const auto f = crop_features(s, s.objects[0].box);
      int best = -1, best_in = -1;
      double bd = INFINITY, bd_in = INFINITY;
      for (int c : ids) {
        const double d = dist(f, centroid[c]);
        if (d < bd) bd = d, best = c;
        if (*bench.spec(c).confusion_group == group && d < bd_in) bd_in = d, best_in = c;
      }
      correct += best == cls;
      within_correct += best_in == cls;
      ++total;
    }
  }
  return {static_cast<double>(correct) / total, static_cast<double>(within_correct) / total};
}

}  // namespace

TEST_SUITE("synthdata") {

TEST_CASE("prng streams") {
  std::uint64_t state = 0;
  CHECK(splitmix64(state) == 0xe220a8397b1dcdafULL);
  Xoshiro256 a(42), b(42), c(43);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next();
    CHECK(x == b.next());
    differs = differs || x != c.next();
  }
  CHECK(differs);
  for (int i = 0; i < 1000; ++i) {
    const double u = a.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    CHECK(a.below(7) < 7);
  }
  CHECK(derive_seed(1, 2) != derive_seed(1, 3));
  CHECK(derive_seed(1, 2) != derive_seed(2, 2));
}

TEST_CASE("default benchmark contract") {
  const Benchmark bench = default_benchmark();
  CHECK(bench.num_source() == 12);
  CHECK(bench.num_target() == 4);
  std::set<int> src, tgt;
  for (const auto& c : bench.source) src.insert(c.id);
  for (const auto& c : bench.target) tgt.insert(c.id);
  for (int id : tgt) CHECK(src.count(id) == 0);

  std::map<int, std::vector<const ClassSpec*>> groups;
  for (const auto& c : bench.target) {
    REQUIRE(c.confusion_group.has_value());
    REQUIRE(c.context_glyph.has_value());
    groups[*c.confusion_group].push_back(&c);
  }
  CHECK(groups.size() == 2);
  for (const auto& [g, members] : groups) {
    REQUIRE(members.size() == 2);
    CHECK(members[0]->glyph.shape == members[1]->glyph.shape);
    CHECK(members[0]->glyph.color.distance(members[1]->glyph.color) <= bench.perturbation_radius);
    const auto& ca = *members[0]->context_glyph;
    const auto& cb = *members[1]->context_glyph;
    CHECK((ca.shape != cb.shape || ca.color.distance(cb.color) > 0.1));
  }
}

TEST_CASE("render determinism and context glyphs") {
  const Benchmark bench = default_benchmark();
  const Scene a = render_scene(bench, {12}, 99);
  const Scene b = render_scene(bench, {12}, 99);
  CHECK(a.image.rgb == b.image.rgb);
  REQUIRE(a.objects.size() == b.objects.size());
  for (std::size_t i = 0; i < a.objects.size(); ++i) CHECK(a.objects[i].box == b.objects[i].box);
  CHECK(render_scene(bench, {12}, 100).image.rgb != a.image.rgb);

  for (int cls : bench.target_ids()) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const Scene s = single_class_scene(bench, cls, seed);
      CHECK(s.context.size() == 1);
      CHECK(s.context[0].owner_class == cls);
      CHECK(s.context[0].shape == bench.spec(cls).context_glyph->shape);
      for (const auto& o : s.objects) {
        CHECK(o.cls == cls);
        CHECK_FALSE(o.box == s.context[0].box);
      }
    }
  }
  const Scene src = source_scene(bench, 5);
  CHECK(src.context.empty());
  CHECK(src.domain == Domain::kSource);

  for (float p : a.image.rgb) {
    CHECK(p >= 0.0f);
    CHECK(p <= 1.0f);
  }
  CHECK_THROWS_AS(render_scene(bench, {}, 1), ParameterError);
  CHECK_THROWS_AS(render_scene(bench, std::vector<int>(300, 0), 1), PlacementError);
}

TEST_CASE("1000 source scenes: boxes in bounds, uniform class histogram") {
  const Benchmark bench = default_benchmark();
  std::map<int, int> hist;
  int total = 0;
  for (std::uint64_t i = 0; i < 1000; ++i) {
    const Scene s = source_scene(bench, derive_seed(77, i));
    CHECK(!s.objects.empty());
    CHECK(s.objects.size() <= 3);
    for (const auto& o : s.objects) {
      CHECK(o.box.xmin() >= 0.0);
      CHECK(o.box.ymin() >= 0.0);
      CHECK(o.box.xmax() <= 1.0 + 1e-12);
      CHECK(o.box.ymax() <= 1.0 + 1e-12);
      CHECK(o.box.w > 0);
      ++hist[o.cls];
      ++total;
    }
  }
  CHECK(hist.size() == 12);
  const double p = 1.0 / 12, expect = total * p, sd = std::sqrt(total * p * (1 - p));
  for (const auto& [cls, n] : hist) CHECK(std::abs(n - expect) <= 4 * sd);
}

TEST_CASE("episodes") {
  const Benchmark bench = default_benchmark();
  EpisodeSpec spec{5, bench.target_ids(), 11, 0};
  const Episode e0 = sample_episode(bench, spec, 40);
  CHECK(e0.train.size() == 20);
  std::map<int, int> per_class;
  for (const auto& s : e0.train) ++per_class[s.focus_class];
  for (int id : bench.target_ids()) CHECK(per_class[id] == 5);

  spec.trial = 1;
  const Episode e1 = sample_episode(bench, spec, 40);
  CHECK(e1.test.size() == 40);
  for (std::size_t i = 0; i < e0.test.size(); ++i) CHECK(e0.test[i].image.rgb == e1.test[i].image.rgb);
  CHECK(e0.train[0].image.rgb != e1.train[0].image.rgb);

  spec.seed = 12345;
  const Episode e2 = sample_episode(bench, spec, 40);
  CHECK(e2.test[3].image.rgb == e0.test[3].image.rgb);

  CHECK(sample_episode(bench, EpisodeSpec{1, bench.target_ids(), 3, 0}, 4).train.size() == 4);
  CHECK(sample_episode(bench, EpisodeSpec{10, bench.target_ids(), 3, 0}, 4).train.size() == 40);
  CHECK_THROWS_AS(sample_episode(bench, EpisodeSpec{0, bench.target_ids(), 3, 0}), ParameterError);
}

TEST_CASE("pixel-only centroid oracle cannot resolve confusion groups") {
  const Benchmark bench = default_benchmark();
  const CentroidResult with_ctx = centroid_oracle(bench, RenderOptions{});
  MESSAGE("centroid accuracy " << with_ctx.overall << ", within group " << with_ctx.within_group);
  CHECK(with_ctx.overall <= 0.65);
  const CentroidResult no_ctx = centroid_oracle(bench, RenderOptions{false, true});
  CHECK(std::abs(no_ctx.within_group - 0.5) <= 0.10);
}

TEST_CASE("flip and dump") {
  const Benchmark bench = default_benchmark();
  const Scene s = single_class_scene(bench, 13, 4);
  const Scene f = flip_horizontal(s);
  CHECK(f.objects[0].box.cx == doctest::Approx(1.0 - s.objects[0].box.cx));
  CHECK(flip_horizontal(f).image.rgb == s.image.rgb);

  const auto dir = std::filesystem::temp_directory_path() / "ctdet_dump_test";
  std::filesystem::remove_all(dir);
  dump_scenes({s, f}, dir, "t");
  CHECK(std::filesystem::exists(dir / "t_0.png"));
  CHECK(std::filesystem::exists(dir / "t_1.png"));
  std::ifstream in(dir / "annotations.jsonl");
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) {
    CHECK(line.find("\"scene_id\"") != std::string::npos);
    CHECK(line.find("\"target\"") != std::string::npos);
    ++lines;
  }
  CHECK(lines == 2);
  std::filesystem::remove_all(dir);
}

}  // TEST_SUITE
