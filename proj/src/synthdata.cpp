#include "ctdet/synthdata.hpp"

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <set>

#include "json.hpp"

#include "ctdet/errors.hpp"

namespace ctdet {

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
  std::uint64_t s = base;
  const std::uint64_t a = splitmix64(s);
  s = a ^ (index * 0xd1b54a32d192ed03ULL + 0x632be59bd9b4e019ULL);
  return splitmix64(s);
}

namespace {
inline std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
}  // namespace

Xoshiro256::Xoshiro256(std::uint64_t seed) {
  std::uint64_t sm = seed;
  for (auto& s : s_) s = splitmix64(sm);
}

std::uint64_t Xoshiro256::next() {
  const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
  const std::uint64_t t = s_[1] << 17;
  s_[2] ^= s_[0];
  s_[3] ^= s_[1];
  s_[1] ^= s_[2];
  s_[0] ^= s_[3];
  s_[2] ^= t;
  s_[3] = rotl(s_[3], 45);
  return result;
}

double Xoshiro256::uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

std::uint64_t Xoshiro256::below(std::uint64_t n) {
  if (n == 0) return 0;
  const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
  std::uint64_t x;
  do {
    x = next();
  } while (x >= limit);
  return x % n;
}

double Xoshiro256::normal() {
  // Box-Muller; one variate per call keeps the stream position simple.
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

const char* to_string(GlyphShape s) {
  switch (s) {
    case GlyphShape::kCircle: return "circle";
    case GlyphShape::kSquare: return "square";
    case GlyphShape::kTriangle: return "triangle";
    case GlyphShape::kCross: return "cross";
    case GlyphShape::kBar: return "bar";
    case GlyphShape::kRing: return "ring";
  }
  return "?";
}

const char* to_string(Domain d) { return d == Domain::kSource ? "source" : "target"; }

double Rgb::distance(const Rgb& o) const {
  return std::sqrt((r - o.r) * (r - o.r) + (g - o.g) * (g - o.g) + (b - o.b) * (b - o.b));
}

const ClassSpec& Benchmark::spec(int id) const {
  for (const auto& c : source)
    if (c.id == id) return c;
  for (const auto& c : target)
    if (c.id == id) return c;
  throw ParameterError("unknown class id " + std::to_string(id));
}

int Benchmark::domain_index(int id) const {
  for (std::size_t i = 0; i < source.size(); ++i)
    if (source[i].id == id) return static_cast<int>(i);
  for (std::size_t i = 0; i < target.size(); ++i)
    if (target[i].id == id) return static_cast<int>(i);
  throw ParameterError("unknown class id " + std::to_string(id));
}

std::vector<int> Benchmark::source_ids() const {
  std::vector<int> ids;
  for (const auto& c : source) ids.push_back(c.id);
  return ids;
}

std::vector<int> Benchmark::target_ids() const {
  std::vector<int> ids;
  for (const auto& c : target) ids.push_back(c.id);
  return ids;
}

Benchmark default_benchmark() {
  Benchmark b;
  struct Src {
    const char* name;
    GlyphShape shape;
    Rgb color;
  };
  const std::array<Src, 12> sources{{
      {"red_circle", GlyphShape::kCircle, {0.90, 0.15, 0.15}},
      {"green_square", GlyphShape::kSquare, {0.15, 0.80, 0.20}},
      {"blue_triangle", GlyphShape::kTriangle, {0.15, 0.30, 0.95}},
      {"yellow_cross", GlyphShape::kCross, {0.95, 0.90, 0.10}},
      {"magenta_bar", GlyphShape::kBar, {0.90, 0.20, 0.85}},
      {"cyan_ring", GlyphShape::kRing, {0.10, 0.85, 0.90}},
      {"white_circle", GlyphShape::kCircle, {0.97, 0.97, 0.97}},
      {"black_square", GlyphShape::kSquare, {0.06, 0.06, 0.06}},
      {"lime_triangle", GlyphShape::kTriangle, {0.60, 0.95, 0.20}},
      {"red_cross", GlyphShape::kCross, {0.90, 0.15, 0.15}},
      {"cyan_bar", GlyphShape::kBar, {0.10, 0.85, 0.90}},
      {"orange_ring", GlyphShape::kRing, {1.00, 0.55, 0.10}},
  }};
  for (std::size_t i = 0; i < sources.size(); ++i) {
    ClassSpec c;
    c.id = static_cast<int>(i);
    c.name = sources[i].name;
    c.glyph = GlyphStyle{sources[i].shape, sources[i].color, 0.16, 0.42, 0.05};
    c.domain = Domain::kSource;
    b.source.push_back(c);
  }

  auto context_of = [&](int source_id) {
    GlyphStyle g = b.source[static_cast<std::size_t>(source_id)].glyph;
    g.min_size = 0.16;
    g.max_size = 0.22;
    return g;
  };
  struct Tgt {
    const char* name;
    GlyphShape shape;
    Rgb color;
    int group;
    int context_source;
  };
  // Members of a group share shape; colors differ by 0.02 in one channel,
  // well inside the per-instance jitter.
  const std::array<Tgt, 4> targets{{
      {"violet_square_a", GlyphShape::kSquare, {0.55, 0.25, 0.85}, 0, 0},
      {"violet_square_b", GlyphShape::kSquare, {0.55, 0.27, 0.85}, 0, 3},
      {"brown_ring_a", GlyphShape::kRing, {0.60, 0.40, 0.20}, 1, 6},
      {"brown_ring_b", GlyphShape::kRing, {0.62, 0.40, 0.20}, 1, 4},
  }};
  for (std::size_t i = 0; i < targets.size(); ++i) {
    ClassSpec c;
    c.id = static_cast<int>(sources.size() + i);
    c.name = targets[i].name;
    c.glyph = GlyphStyle{targets[i].shape, targets[i].color, 0.20, 0.30, 0.06};
    c.domain = Domain::kTarget;
    c.confusion_group = targets[i].group;
    c.context_glyph = context_of(targets[i].context_source);
    b.target.push_back(c);
  }
  b.image_size = 64;
  b.perturbation_radius = 0.03;
  return b;
}

std::vector<GroundTruth> Scene::ground_truth() const {
  std::vector<GroundTruth> gts;
  gts.reserve(objects.size());
  for (const auto& o : objects) gts.push_back(GroundTruth{o.box, o.cls});
  return gts;
}

namespace {

struct PixelBox {
  double x0, y0, x1, y1;
  double area() const { return std::max(0.0, x1 - x0) * std::max(0.0, y1 - y0); }
};

double intersection(const PixelBox& a, const PixelBox& b) {
  const double w = std::min(a.x1, b.x1) - std::max(a.x0, b.x0);
  const double h = std::min(a.y1, b.y1) - std::max(a.y0, b.y0);
  return (w > 0 && h > 0) ? w * h : 0.0;
}

// Fraction of the smaller box covered by the other.
double overlap_fraction(const PixelBox& a, const PixelBox& b) {
  const double m = std::min(a.area(), b.area());
  return m > 0 ? intersection(a, b) / m : 0.0;
}

// A glyph instance in pixel units, ready to rasterize.
struct GlyphInstance {
  GlyphShape shape;
  Rgb color;
  double cx, cy, size, angle;

  // Local-frame outline points whose rotated extremes bound the glyph.
  std::vector<std::array<double, 2>> hull_points() const {
    const double r = size / 2;
    switch (shape) {
      case GlyphShape::kCircle:
      case GlyphShape::kRing: return {};
      case GlyphShape::kSquare: {
        const double a = 0.75 * r;
        return {{-a, -a}, {a, -a}, {a, a}, {-a, a}};
      }
      case GlyphShape::kTriangle: {
        std::vector<std::array<double, 2>> pts;
        for (int i = 0; i < 3; ++i) {
          const double t = -std::numbers::pi / 2 + i * 2 * std::numbers::pi / 3;
          pts.push_back({r * std::cos(t), r * std::sin(t)});
        }
        return pts;
      }
      case GlyphShape::kCross: {
        const double t = 0.3 * r;
        return {{-r, -t}, {r, -t}, {r, t}, {-r, t}, {-t, -r}, {t, -r}, {t, r}, {-t, r}};
      }
      case GlyphShape::kBar: {
        const double t = 0.3 * r;
        return {{-r, -t}, {r, -t}, {r, t}, {-r, t}};
      }
    }
    return {};
  }

  // Half extents of the axis-aligned bounding box.
  std::array<double, 2> half_extent() const {
    const auto pts = hull_points();
    if (pts.empty()) return {size / 2, size / 2};
    const double c = std::cos(angle), s = std::sin(angle);
    double hx = 0, hy = 0;
    for (const auto& p : pts) {
      hx = std::max(hx, std::abs(c * p[0] - s * p[1]));
      hy = std::max(hy, std::abs(s * p[0] + c * p[1]));
    }
    return {hx, hy};
  }

  PixelBox bounds() const {
    const auto [hx, hy] = half_extent();
    return {cx - hx, cy - hy, cx + hx, cy + hy};
  }

  bool contains(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    // Rotate into the glyph frame.
    const double c = std::cos(angle), s = std::sin(angle);
    const double u = c * dx + s * dy;
    const double v = -s * dx + c * dy;
    const double r = size / 2;
    switch (shape) {
      case GlyphShape::kCircle: return u * u + v * v <= r * r;
      case GlyphShape::kRing: {
        const double d2 = u * u + v * v;
        return d2 <= r * r && d2 >= 0.3 * r * r;
      }
      case GlyphShape::kSquare: return std::abs(u) <= 0.75 * r && std::abs(v) <= 0.75 * r;
      case GlyphShape::kTriangle: {
        // Equilateral triangle with circumradius r, apex up (v negative).
        const auto pts = hull_points();
        for (int i = 0; i < 3; ++i) {
          const auto& a = pts[static_cast<std::size_t>(i)];
          const auto& b = pts[static_cast<std::size_t>((i + 1) % 3)];
          const double cross = (b[0] - a[0]) * (v - a[1]) - (b[1] - a[1]) * (u - a[0]);
          if (cross < 0) return false;
        }
        return true;
      }
      case GlyphShape::kCross: {
        const double t = 0.3 * r;
        return (std::abs(u) <= r && std::abs(v) <= t) || (std::abs(v) <= r && std::abs(u) <= t);
      }
      case GlyphShape::kBar: return std::abs(u) <= r && std::abs(v) <= 0.3 * r;
    }
    return false;
  }
};

void rasterize(Image& img, const GlyphInstance& g) {
  const PixelBox b = g.bounds();
  const long y0 = std::max(0L, static_cast<long>(std::floor(b.y0)));
  const long y1 = std::min(static_cast<long>(img.height) - 1, static_cast<long>(std::ceil(b.y1)));
  const long x0 = std::max(0L, static_cast<long>(std::floor(b.x0)));
  const long x1 = std::min(static_cast<long>(img.width) - 1, static_cast<long>(std::ceil(b.x1)));
  const std::array<double, 3> col{g.color.r, g.color.g, g.color.b};
  for (long y = y0; y <= y1; ++y) {
    for (long x = x0; x <= x1; ++x) {
      int hits = 0;
      for (double sy : {0.25, 0.75})
        for (double sx : {0.25, 0.75}) hits += g.contains(x + sx, y + sy) ? 1 : 0;
      if (!hits) continue;
      const double alpha = hits / 4.0;
      for (std::size_t c = 0; c < 3; ++c) {
        float& p = img.rgb[(static_cast<std::size_t>(y) * img.width + static_cast<std::size_t>(x)) * 3 + c];
        p = static_cast<float>((1 - alpha) * p + alpha * col[c]);
      }
    }
  }
}

void paint_background(Image& img, Xoshiro256& rng) {
  const double gray = rng.uniform(0.30, 0.55);
  std::array<double, 3> base{};
  for (auto& c : base) c = gray + rng.uniform(-0.04, 0.04);
  // Two octaves of smoothstep-interpolated value noise.
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < img.height * img.width; ++i)
      img.rgb[i * 3 + c] = static_cast<float>(base[c]);
  for (const auto& [cells, amp] : {std::pair<std::size_t, double>{4, 0.06}, {8, 0.03}}) {
    std::vector<double> lattice((cells + 1) * (cells + 1));
    for (auto& v : lattice) v = rng.uniform(-amp, amp);
    for (std::size_t y = 0; y < img.height; ++y) {
      for (std::size_t x = 0; x < img.width; ++x) {
        const double fy = (y + 0.5) / img.height * cells, fx = (x + 0.5) / img.width * cells;
        const std::size_t iy = std::min(static_cast<std::size_t>(fy), cells - 1);
        const std::size_t ix = std::min(static_cast<std::size_t>(fx), cells - 1);
        auto smooth = [](double t) { return t * t * (3 - 2 * t); };
        const double ty = smooth(fy - iy), tx = smooth(fx - ix);
        auto L = [&](std::size_t r, std::size_t c) { return lattice[r * (cells + 1) + c]; };
        const double v = (1 - ty) * ((1 - tx) * L(iy, ix) + tx * L(iy, ix + 1)) +
                         ty * ((1 - tx) * L(iy + 1, ix) + tx * L(iy + 1, ix + 1));
        for (std::size_t c = 0; c < 3; ++c) img.rgb[(y * img.width + x) * 3 + c] += static_cast<float>(v);
      }
    }
  }
}

bool is_rotatable(GlyphShape s) { return s != GlyphShape::kCircle && s != GlyphShape::kRing; }

GlyphInstance sample_glyph(const GlyphStyle& style, double image_side, Xoshiro256& rng) {
  GlyphInstance g;
  g.shape = style.shape;
  g.size = rng.uniform(style.min_size, style.max_size) * image_side;
  g.angle = is_rotatable(style.shape) ? rng.uniform(0.0, std::numbers::pi) : 0.0;
  g.color = Rgb{std::clamp(style.color.r + rng.uniform(-style.color_jitter, style.color_jitter), 0.0, 1.0),
                std::clamp(style.color.g + rng.uniform(-style.color_jitter, style.color_jitter), 0.0, 1.0),
                std::clamp(style.color.b + rng.uniform(-style.color_jitter, style.color_jitter), 0.0, 1.0)};
  g.cx = g.cy = 0;
  return g;
}

void sample_center(GlyphInstance& g, double side, Xoshiro256& rng) {
  const auto [hx, hy] = g.half_extent();
  g.cx = rng.uniform(hx, std::max(hx, side - hx));
  g.cy = rng.uniform(hy, std::max(hy, side - hy));
}

constexpr int kPlacementAttempts = 400;
constexpr double kPreferredOverlap = 0.05;
constexpr double kMaxOverlap = 0.8;

}  // namespace

Scene render_scene(const Benchmark& bench, const std::vector<int>& class_draws,
                   std::uint64_t seed, const RenderOptions& options) {
  if (class_draws.empty()) throw ParameterError("render_scene: at least one object required");
  Xoshiro256 rng(seed);
  const double side = static_cast<double>(bench.image_size);

  Scene scene;
  scene.seed = seed;
  scene.domain = bench.spec(class_draws.front()).domain;
  scene.image.height = scene.image.width = bench.image_size;
  scene.image.rgb.assign(bench.image_size * bench.image_size * 3, 0.0f);
  paint_background(scene.image, rng);

  std::vector<PixelBox> occupied;
  std::vector<GlyphInstance> objects;
  std::vector<int> object_cls;
  for (int cls : class_draws) {
    const ClassSpec& spec = bench.spec(cls);
    GlyphInstance g = sample_glyph(spec.glyph, side, rng);
    GlyphInstance best = g;
    double best_overlap = 2.0;
    for (int attempt = 0; attempt < kPlacementAttempts; ++attempt) {
      sample_center(g, side, rng);
      double worst = 0;
      for (const auto& o : occupied) worst = std::max(worst, overlap_fraction(g.bounds(), o));
      if (worst < best_overlap) {
        best_overlap = worst;
        best = g;
      }
      if (worst <= kPreferredOverlap) break;
    }
    if (best_overlap > kMaxOverlap) {
      throw PlacementError("render_scene: cannot place " + std::to_string(class_draws.size()) +
                           " objects without >80% overlap");
    }
    occupied.push_back(best.bounds());
    objects.push_back(best);
    object_cls.push_back(cls);
  }

  // One context glyph per distinct target class near one of that class's
  // instances, at least a glyph width clear of it and overlapping nothing.
  std::vector<GlyphInstance> contexts;
  std::set<int> seen;
  for (std::size_t i = 0; i < object_cls.size(); ++i) {
    const ClassSpec& spec = bench.spec(object_cls[i]);
    if (!spec.context_glyph || !seen.insert(spec.id).second) continue;
    std::vector<std::size_t> owners;
    for (std::size_t j = 0; j < objects.size(); ++j)
      if (object_cls[j] == spec.id) owners.push_back(j);
    GlyphInstance g = sample_glyph(*spec.context_glyph, side, rng);
    const auto [hx, hy] = g.half_extent();
    bool placed = false;
    for (int attempt = 0; attempt < kPlacementAttempts && !placed; ++attempt) {
      const GlyphInstance& anchor = objects[owners[rng.below(owners.size())]];
      const double gap = g.size * rng.uniform(bench.context_gap_min, bench.context_gap_max);
      const double dist = (g.size + anchor.size) / 2 + gap;
      const double theta = rng.uniform(0.0, 2.0 * std::numbers::pi);
      g.cx = anchor.cx + dist * std::cos(theta);
      g.cy = anchor.cy + dist * std::sin(theta);
      if (g.cx < hx || g.cy < hy || g.cx > side - hx || g.cy > side - hy) continue;
      const PixelBox gb = g.bounds();
      bool ok = true;
      for (const auto& o : occupied) ok = ok && intersection(gb, o) == 0.0;
      placed = ok;
    }
    if (!placed) {
      throw PlacementError("render_scene: no room for the context glyph of class " +
                           std::to_string(spec.id));
    }
    occupied.push_back(g.bounds());
    contexts.push_back(g);
    scene.context.push_back(PlacedGlyph{
        Box::from_corners(g.bounds().x0 / side, g.bounds().y0 / side, g.bounds().x1 / side,
                          g.bounds().y1 / side),
        g.shape, spec.id});
  }

  if (options.draw_clutter) {
    const std::uint64_t n_clutter = rng.below(4);
    for (std::uint64_t c = 0; c < n_clutter; ++c) {
      GlyphInstance g;
      g.shape = GlyphShape::kCircle;
      const double level = rng.uniform(0.2, 0.8);
      g.color = Rgb{level, level, level};
      g.size = rng.uniform(2.0, 4.0);
      g.angle = 0;
      sample_center(g, side, rng);
      bool clear = true;
      for (const auto& o : occupied) clear = clear && intersection(g.bounds(), o) == 0.0;
      if (clear) rasterize(scene.image, g);
    }
  }
  if (options.draw_context) {
    for (const auto& g : contexts) rasterize(scene.image, g);
  }
  for (std::size_t i = 0; i < objects.size(); ++i) {
    rasterize(scene.image, objects[i]);
    const PixelBox b = objects[i].bounds();
    scene.objects.push_back(Annotation{
        Box::from_corners(std::clamp(b.x0 / side, 0.0, 1.0), std::clamp(b.y0 / side, 0.0, 1.0),
                          std::clamp(b.x1 / side, 0.0, 1.0), std::clamp(b.y1 / side, 0.0, 1.0)),
        object_cls[i]});
  }
  for (auto& p : scene.image.rgb) p = std::clamp(p, 0.0f, 1.0f);
  return scene;
}

namespace {

// Retries with derived seeds so a scene request always succeeds for
// feasible layouts; still a pure function of the seed.
template <typename F>
Scene render_with_retries(F&& make_draws, const Benchmark& bench, std::uint64_t seed,
                          const RenderOptions& options) {
  for (std::uint64_t attempt = 0; attempt < 16; ++attempt) {
    const std::uint64_t s = attempt == 0 ? seed : derive_seed(seed, 0xA77E0000ULL + attempt);
    Xoshiro256 rng(derive_seed(s, 0xD2A5ULL));
    const std::vector<int> draws = make_draws(rng);
    try {
      return render_scene(bench, draws, s, options);
    } catch (const PlacementError&) {
    }
  }
  throw PlacementError("scene generation failed after 16 attempts");
}

}  // namespace

Scene source_scene(const Benchmark& bench, std::uint64_t seed) {
  const auto ids = bench.source_ids();
  return render_with_retries(
      [&](Xoshiro256& rng) {
        std::vector<int> draws(1 + rng.below(3));
        for (auto& d : draws) d = ids[rng.below(ids.size())];
        return draws;
      },
      bench, seed, RenderOptions{});
}

Scene single_class_scene(const Benchmark& bench, int cls, std::uint64_t seed,
                         const RenderOptions& options) {
  Scene s = render_with_retries(
      [&](Xoshiro256& rng) { return std::vector<int>(rng.uniform() < 0.7 ? 1 : 2, cls); }, bench,
      seed, options);
  s.focus_class = cls;
  return s;
}

Scene flip_horizontal(const Scene& scene) {
  Scene out = scene;
  const std::size_t w = scene.image.width;
  for (std::size_t y = 0; y < scene.image.height; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        out.image.rgb[(y * w + x) * 3 + c] = scene.image.rgb[(y * w + (w - 1 - x)) * 3 + c];
  for (auto& o : out.objects) o.box.cx = 1.0 - o.box.cx;
  for (auto& g : out.context) g.box.cx = 1.0 - g.box.cx;
  return out;
}

namespace {
constexpr std::uint64_t kTargetTestSeed = 0x7E57'5CE7'E000'0001ULL;
constexpr std::uint64_t kSourceTestSeed = 0x7E57'5CE7'E000'0002ULL;
}  // namespace

Episode sample_episode(const Benchmark& bench, const EpisodeSpec& spec, std::size_t test_scenes) {
  if (spec.shots == 0) throw ParameterError("sample_episode: shots must be >= 1");
  if (spec.classes.empty()) throw ParameterError("sample_episode: empty class list");
  Episode ep;
  const std::uint64_t train_seed = derive_seed(spec.seed, spec.trial);
  for (int cls : spec.classes) {
    const std::uint64_t class_seed = derive_seed(train_seed, static_cast<std::uint64_t>(cls));
    for (std::size_t n = 0; n < spec.shots; ++n)
      ep.train.push_back(single_class_scene(bench, cls, derive_seed(class_seed, n)));
  }
  for (std::size_t i = 0; i < test_scenes; ++i) {
    const int cls = spec.classes[i % spec.classes.size()];
    ep.test.push_back(single_class_scene(bench, cls, derive_seed(kTargetTestSeed, i)));
  }
  return ep;
}

std::vector<Scene> source_test_scenes(const Benchmark& bench, std::size_t count) {
  std::vector<Scene> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i)
    out.push_back(source_scene(bench, derive_seed(kSourceTestSeed, i)));
  return out;
}

namespace {

void write_png(const Image& img, const std::filesystem::path& path) {
  FILE* fp = std::fopen(path.string().c_str(), "wb");
  if (!fp) throw FileError("cannot open '" + path.string() + "' for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw FileError("libpng failed writing '" + path.string() + "'");
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height),
               8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_byte> row(img.width * 3);
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t i = 0; i < img.width * 3; ++i)
      row[i] = static_cast<png_byte>(std::lround(img.rgb[y * img.width * 3 + i] * 255.0f));
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

}  // namespace

void dump_scenes(const std::vector<Scene>& scenes, const std::filesystem::path& dir,
                 const std::string& prefix) {
  std::filesystem::create_directories(dir);
  std::ofstream jsonl(dir / "annotations.jsonl", std::ios::app);
  if (!jsonl) throw FileError("cannot write annotations in '" + dir.string() + "'");
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const Scene& s = scenes[i];
    const std::string id = prefix + "_" + std::to_string(i);
    write_png(s.image, dir / (id + ".png"));
    nlohmann::json objs = nlohmann::json::array();
    for (const auto& o : s.objects)
      objs.push_back({{"class", o.cls}, {"cx", o.box.cx}, {"cy", o.box.cy}, {"w", o.box.w}, {"h", o.box.h}});
    jsonl << nlohmann::json{{"scene_id", id}, {"domain", to_string(s.domain)}, {"objects", objs}}.dump()
          << '\n';
  }
}

}  // namespace ctdet
