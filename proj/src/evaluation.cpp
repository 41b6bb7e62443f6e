#include "ctdet/evaluation.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "ctdet/errors.hpp"

namespace ctdet {

ApResult average_precision(const std::vector<ImageDetection>& detections,
                           const std::vector<std::vector<Box>>& gts_per_image,
                           double iou_threshold, Interpolation interpolation) {
  ApResult r;
  for (const auto& g : gts_per_image) r.num_gt += g.size();
  if (r.num_gt == 0) {
    r.skipped = detections.empty();
    r.fp = detections.size();
    return r;
  }
  std::vector<std::size_t> order(detections.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return detections[a].score > detections[b].score;
  });
  std::vector<std::vector<bool>> claimed(gts_per_image.size());
  for (std::size_t i = 0; i < gts_per_image.size(); ++i) claimed[i].assign(gts_per_image[i].size(), false);

  std::vector<double> precision, recall;
  std::size_t tp = 0, fp = 0;
  for (std::size_t idx : order) {
    const auto& d = detections[idx];
    if (d.image >= gts_per_image.size()) {
      throw InputError("average_precision: detection refers to image " + std::to_string(d.image));
    }
    const auto& gts = gts_per_image[d.image];
    // VOC protocol: the highest-overlap GT decides; a claimed GT makes it a false positive.
    double best = -1;
    std::size_t arg = gts.size();
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const double v = iou(d.box, gts[g]);
      if (v > best) best = v, arg = g;
    }
    if (arg < gts.size() && (best < iou_threshold || claimed[d.image][arg])) arg = gts.size();
    if (arg < gts.size()) {
      claimed[d.image][arg] = true;
      ++tp;
    } else {
      ++fp;
    }
    precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(r.num_gt));
  }
  r.tp = tp;
  r.fp = fp;

  if (interpolation == Interpolation::kElevenPoint) {
    double ap = 0;
    for (int t = 0; t <= 10; ++t) {
      const double thr = t / 10.0;
      double p = 0;
      for (std::size_t i = 0; i < recall.size(); ++i)
        if (recall[i] >= thr - 1e-12) p = std::max(p, precision[i]);
      ap += p / 11.0;
    }
    r.ap = ap;
    return r;
  }
  // All-point: area under the monotone precision envelope.
  std::vector<double> mrec{0.0}, mpre{0.0};
  mrec.insert(mrec.end(), recall.begin(), recall.end());
  mpre.insert(mpre.end(), precision.begin(), precision.end());
  mrec.push_back(1.0);
  mpre.push_back(0.0);
  for (std::size_t i = mpre.size() - 1; i > 0; --i) mpre[i - 1] = std::max(mpre[i - 1], mpre[i]);
  double ap = 0;
  for (std::size_t i = 1; i < mrec.size(); ++i) ap += (mrec[i] - mrec[i - 1]) * mpre[i];
  r.ap = ap;
  return r;
}

double ConfusionTriple::pct_correct() const {
  return total() ? 100.0 * static_cast<double>(correct) / static_cast<double>(total()) : 0.0;
}
double ConfusionTriple::pct_confused() const {
  return total() ? 100.0 * static_cast<double>(confused) / static_cast<double>(total()) : 0.0;
}
double ConfusionTriple::pct_missed() const {
  return total() ? 100.0 * static_cast<double>(missed) / static_cast<double>(total()) : 0.0;
}

std::map<int, ConfusionTriple> confusion_breakdown(
    const std::vector<std::vector<Detection>>& detections,
    const std::vector<std::vector<Annotation>>& gts, double iou_threshold, double score_floor) {
  if (detections.size() != gts.size()) {
    throw DimensionError("confusion_breakdown: " + std::to_string(detections.size()) +
                         " detection lists for " + std::to_string(gts.size()) + " images");
  }
  std::map<int, ConfusionTriple> out;
  for (std::size_t i = 0; i < gts.size(); ++i) {
    for (const auto& g : gts[i]) {
      const Detection* best = nullptr;
      for (const auto& d : detections[i]) {
        if (d.score < score_floor || iou(d.box, g.box) < iou_threshold) continue;
        if (!best || d.score > best->score) best = &d;
      }
      auto& t = out[g.cls];
      if (!best) {
        ++t.missed;
      } else if (best->cls == g.cls) {
        ++t.correct;
      } else {
        ++t.confused;
      }
    }
  }
  return out;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json cls = nlohmann::json::array();
  for (const auto& c : classes) {
    cls.push_back({{"class", c.cls},
                   {"name", c.name},
                   {"ap", c.ap.ap},
                   {"skipped", c.ap.skipped},
                   {"num_gt", c.ap.num_gt},
                   {"tp", c.ap.tp},
                   {"fp", c.ap.fp},
                   {"fn", c.ap.num_gt - c.ap.tp},
                   {"confusion",
                    {{"correct", c.confusion.correct},
                     {"confused", c.confusion.confused},
                     {"missed", c.confusion.missed}}}});
  }
  return {{"map", map}, {"num_scenes", num_scenes}, {"classes", cls}, {"metadata", metadata}};
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
  EvalReport r;
  r.map = j.at("map").get<double>();
  r.num_scenes = j.at("num_scenes").get<std::size_t>();
  r.metadata = j.value("metadata", nlohmann::json::object());
  for (const auto& c : j.at("classes")) {
    ClassReport cr;
    cr.cls = c.at("class").get<int>();
    cr.name = c.at("name").get<std::string>();
    cr.ap.ap = c.at("ap").get<double>();
    cr.ap.skipped = c.at("skipped").get<bool>();
    cr.ap.num_gt = c.at("num_gt").get<std::size_t>();
    cr.ap.tp = c.at("tp").get<std::size_t>();
    cr.ap.fp = c.at("fp").get<std::size_t>();
    const auto& cf = c.at("confusion");
    cr.confusion.correct = cf.at("correct").get<std::size_t>();
    cr.confusion.confused = cf.at("confused").get<std::size_t>();
    cr.confusion.missed = cf.at("missed").get<std::size_t>();
    r.classes.push_back(cr);
  }
  return r;
}

bool EvalReport::operator==(const EvalReport& o) const { return to_json() == o.to_json(); }

EvalReport evaluate_model(const Predictor& predictor, const std::vector<Scene>& scenes,
                          const Benchmark& bench, const std::vector<int>& classes,
                          const EvalOptions& options) {
  std::vector<std::vector<Detection>> dets;
  std::vector<std::vector<Annotation>> gts;
  dets.reserve(scenes.size());
  for (const auto& s : scenes) {
    dets.push_back(predictor(s));
    gts.push_back(s.objects);
  }
  EvalReport report;
  report.num_scenes = scenes.size();
  const auto confusion = confusion_breakdown(dets, gts, options.iou_threshold, options.score_floor);
  double sum = 0;
  std::size_t counted = 0;
  for (int cls : classes) {
    std::vector<ImageDetection> cd;
    std::vector<std::vector<Box>> cg(scenes.size());
    for (std::size_t i = 0; i < scenes.size(); ++i) {
      for (const auto& d : dets[i])
        if (d.cls == cls) cd.push_back({i, d.box, d.score});
      for (const auto& g : gts[i])
        if (g.cls == cls) cg[i].push_back(g.box);
    }
    ClassReport cr;
    cr.cls = cls;
    cr.name = bench.spec(cls).name;
    cr.ap = average_precision(cd, cg, options.iou_threshold, options.interpolation);
    if (auto it = confusion.find(cls); it != confusion.end()) cr.confusion = it->second;
    if (!cr.ap.skipped) {
      sum += cr.ap.ap;
      ++counted;
    }
    report.classes.push_back(cr);
  }
  report.map = counted ? sum / static_cast<double>(counted) : 0.0;
  return report;
}

std::string render_table(const EvalReport& report) {
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof line, "%-18s %7s %9s %9s %9s\n", "class", "AP", "correct%",
                "confused%", "missed%");
  os << line;
  for (const auto& c : report.classes) {
    std::snprintf(line, sizeof line, "%-18s %7.2f %9.1f %9.1f %9.1f%s\n", c.name.c_str(),
                  100.0 * c.ap.ap, c.confusion.pct_correct(), c.confusion.pct_confused(),
                  c.confusion.pct_missed(), c.ap.skipped ? "  (skipped)" : "");
    os << line;
  }
  std::snprintf(line, sizeof line, "%-18s %7.2f\n", "mAP", 100.0 * report.map);
  os << line;
  return os.str();
}

}  // namespace ctdet
