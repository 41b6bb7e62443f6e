#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ctdet/anchors.hpp"
#include "ctdet/detector.hpp"
#include "ctdet/synthdata.hpp"
#include "json.hpp"

namespace ctdet {

enum class Interpolation { kAllPoint, kElevenPoint };

// Single-class detection tagged with the image it came from.
struct ImageDetection {
  std::size_t image = 0;
  Box box;
  double score = 0;
};

struct ApResult {
  double ap = 0;
  bool skipped = false;  // no ground truth and no detections
  std::size_t num_gt = 0, tp = 0, fp = 0;
};

// VOC-style AP for one class. Detections are ranked by descending score
// (stable); each one greedily takes the best-overlapping unclaimed GT.
ApResult average_precision(const std::vector<ImageDetection>& detections,
                           const std::vector<std::vector<Box>>& gts_per_image,
                           double iou_threshold = 0.5,
                           Interpolation interpolation = Interpolation::kAllPoint);

struct ConfusionTriple {
  std::size_t correct = 0, confused = 0, missed = 0;
  std::size_t total() const { return correct + confused + missed; }
  double pct_correct() const;
  double pct_confused() const;
  double pct_missed() const;
};

inline constexpr double kConfusionScoreFloor = 0.3;

// Per GT class: the best-scoring detection of any class with IoU >= threshold
// and score >= floor decides correct / confused; none means missed.
std::map<int, ConfusionTriple> confusion_breakdown(
    const std::vector<std::vector<Detection>>& detections,
    const std::vector<std::vector<Annotation>>& gts, double iou_threshold = 0.5,
    double score_floor = kConfusionScoreFloor);

struct ClassReport {
  int cls = 0;
  std::string name;
  ApResult ap;
  ConfusionTriple confusion;
};

struct EvalReport {
  std::vector<ClassReport> classes;
  double map = 0;
  std::size_t num_scenes = 0;
  nlohmann::json metadata = nlohmann::json::object();

  nlohmann::json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
  bool operator==(const EvalReport& o) const;
};

using Predictor = std::function<std::vector<Detection>(const Scene&)>;

struct EvalOptions {
  double iou_threshold = 0.5;
  Interpolation interpolation = Interpolation::kAllPoint;
  double score_floor = kConfusionScoreFloor;
};

// mAP over `classes` (skipped classes excluded). Scenes are processed in
// order so the report is deterministic for a deterministic predictor.
EvalReport evaluate_model(const Predictor& predictor, const std::vector<Scene>& scenes,
                          const Benchmark& bench, const std::vector<int>& classes,
                          const EvalOptions& options = {});

// Plain-text table of per-class AP and confusion percentages.
std::string render_table(const EvalReport& report);

}  // namespace ctdet
