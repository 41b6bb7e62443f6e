#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ctdet/anchors.hpp"

namespace ctdet {

// splitmix64, used to seed xoshiro256** and to derive per-scene seeds.
std::uint64_t splitmix64(std::uint64_t& state);

// Hash of (base, index) into an independent stream seed.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index);

// xoshiro256** by Blackman and Vigna.
class Xoshiro256 {
 public:
  explicit Xoshiro256(std::uint64_t seed);
  std::uint64_t next();
  double uniform();  // [0, 1)
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  std::uint64_t below(std::uint64_t n);  // [0, n), unbiased
  double normal();

 private:
  std::uint64_t s_[4];
};

enum class GlyphShape { kCircle, kSquare, kTriangle, kCross, kBar, kRing };
enum class Domain { kSource, kTarget };

const char* to_string(GlyphShape s);
const char* to_string(Domain d);

struct Rgb {
  double r = 0, g = 0, b = 0;
  double distance(const Rgb& o) const;
};

struct GlyphStyle {
  GlyphShape shape = GlyphShape::kCircle;
  Rgb color;
  double min_size = 0.2;  // fraction of the image side
  double max_size = 0.3;
  double color_jitter = 0.05;  // per-channel uniform half-width
};

struct ClassSpec {
  int id = 0;
  std::string name;
  GlyphStyle glyph;
  Domain domain = Domain::kSource;
  std::optional<int> confusion_group;
  std::optional<GlyphStyle> context_glyph;
};

struct Benchmark {
  std::vector<ClassSpec> source;
  std::vector<ClassSpec> target;
  std::size_t image_size = 64;
  double perturbation_radius = 0.03;
  // Gap between a context glyph's and its object's extents, in context glyph
  // widths.
  double context_gap_min = 1.0;
  double context_gap_max = 1.5;

  std::size_t num_source() const { return source.size(); }
  std::size_t num_target() const { return target.size(); }
  const ClassSpec& spec(int id) const;
  // Index within its own domain (0..C_s-1 or 0..C_t-1).
  int domain_index(int id) const;
  std::vector<int> source_ids() const;
  std::vector<int> target_ids() const;
};

// 12 source classes and 4 target classes in two confusion groups of two.
// Each target class co-occurs with a context glyph drawn in the style of a
// distinct source class; group members differ only by that context.
Benchmark default_benchmark();

struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> rgb;  // row-major H x W x 3 in [0, 1]

  float at(std::size_t y, std::size_t x, std::size_t c) const {
    return rgb[(y * width + x) * 3 + c];
  }
};

struct Annotation {
  Box box;
  int cls = 0;
};

struct PlacedGlyph {
  Box box;
  GlyphShape shape = GlyphShape::kCircle;
  int owner_class = -1;  // class whose context this glyph is, or -1 for clutter
};

struct Scene {
  Image image;
  std::vector<Annotation> objects;
  std::vector<PlacedGlyph> context;  // rendered, never annotated
  std::uint64_t seed = 0;
  Domain domain = Domain::kSource;
  int focus_class = -1;  // class a few-shot scene was sampled for

  std::vector<GroundTruth> ground_truth() const;
};

struct RenderOptions {
  bool draw_context = true;
  bool draw_clutter = true;
};

// Renders the requested annotated classes plus, for every distinct target
// class among them, one context glyph. Pure function of its arguments.
// Throws PlacementError if the objects cannot be placed with <= 80% overlap.
Scene render_scene(const Benchmark& bench, const std::vector<int>& class_draws,
                   std::uint64_t seed, const RenderOptions& options = {});

// Source-domain scene with 1-3 uniformly drawn source classes.
Scene source_scene(const Benchmark& bench, std::uint64_t seed);

// Scene with 1-2 instances of a single class (its context glyph included).
Scene single_class_scene(const Benchmark& bench, int cls, std::uint64_t seed,
                         const RenderOptions& options = {});

// Horizontally mirrored copy (image and boxes).
Scene flip_horizontal(const Scene& scene);

struct EpisodeSpec {
  std::size_t shots = 5;
  std::vector<int> classes;
  std::uint64_t seed = 0;
  std::uint64_t trial = 0;
};

struct Episode {
  std::vector<Scene> train;
  std::vector<Scene> test;
};

inline constexpr std::size_t kTestScenesPerTrial = 200;

// `shots` training scenes per class from a stream seeded by (seed, trial),
// and a test set that depends on neither seed nor trial.
Episode sample_episode(const Benchmark& bench, const EpisodeSpec& spec,
                       std::size_t test_scenes = kTestScenesPerTrial);

// Fixed held-out set of source-domain scenes.
std::vector<Scene> source_test_scenes(const Benchmark& bench, std::size_t count);

// Writes <dir>/<scene_id>.png for every scene and <dir>/annotations.jsonl.
void dump_scenes(const std::vector<Scene>& scenes, const std::filesystem::path& dir,
                 const std::string& prefix);

}  // namespace ctdet
