#include "ctdet/anchors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "ctdet/errors.hpp"

namespace ctdet {

std::vector<ScaleSpec> default_scale_specs() {
  const std::vector<double> ratios{1.0, 2.0, 0.5};
  return {ScaleSpec{8, 8, 0.2, ratios}, ScaleSpec{4, 4, 0.45, ratios},
          ScaleSpec{2, 2, 0.8, ratios}};
}

std::vector<ScaleSpec> reference_scale_specs() {
  const std::vector<double> four{1.0, 2.0, 0.5, 1.0};
  const std::vector<double> six{1.0, 2.0, 0.5, 3.0, 1.0 / 3.0, 1.0};
  return {ScaleSpec{38, 38, 0.1, four}, ScaleSpec{19, 19, 0.2, six},
          ScaleSpec{10, 10, 0.37, six}, ScaleSpec{5, 5, 0.54, six},
          ScaleSpec{3, 3, 0.71, four},  ScaleSpec{1, 1, 0.88, four}};
}

std::size_t count_priors(const std::vector<ScaleSpec>& scales) {
  std::size_t n = 0;
  for (const auto& s : scales) n += s.height * s.width * s.ratios.size();
  return n;
}

PriorBoxSet generate_priors(const std::vector<ScaleSpec>& scales) {
  if (scales.empty()) throw ParameterError("generate_priors: empty scale spec");
  PriorBoxSet set;
  set.scales = scales;
  set.boxes.reserve(count_priors(scales));
  for (std::size_t k = 0; k < scales.size(); ++k) {
    const auto& s = scales[k];
    if (s.height == 0 || s.width == 0 || s.ratios.empty() || !(s.base_size > 0)) {
      throw ParameterError("generate_priors: scale " + std::to_string(k) +
                           " has a nonpositive extent");
    }
    for (double r : s.ratios) {
      if (!(r > 0)) throw ParameterError("generate_priors: aspect ratios must be positive");
    }
    set.scale_offsets.push_back(set.boxes.size());
    for (std::size_t row = 0; row < s.height; ++row) {
      for (std::size_t col = 0; col < s.width; ++col) {
        for (std::size_t m = 0; m < s.ratios.size(); ++m) {
          const double sr = std::sqrt(s.ratios[m]);
          set.boxes.push_back(Box{(col + 0.5) / s.width, (row + 0.5) / s.height,
                                  s.base_size * sr, s.base_size / sr});
          set.provenance.push_back(GridProvenance{k, row, col, m});
        }
      }
    }
  }
  set.scale_offsets.push_back(set.boxes.size());
  return set;
}

double iou(const Box& a, const Box& b) {
  const double iw = std::min(a.xmax(), b.xmax()) - std::max(a.xmin(), b.xmin());
  const double ih = std::min(a.ymax(), b.ymax()) - std::max(a.ymin(), b.ymin());
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? std::clamp(inter / uni, 0.0, 1.0) : 0.0;
}

std::vector<int> match_priors(const std::vector<GroundTruth>& gts,
                              const PriorBoxSet& priors, double pos_threshold) {
  const std::size_t np = priors.size();
  if (np == 0) throw ParameterError("match_priors: no priors");
  std::vector<int> assign(np, -1);
  if (gts.empty()) return assign;
  for (const auto& g : gts) {
    if (!(g.box.w > 0) || !(g.box.h > 0)) {
      throw InputError("match_priors: ground truth with zero area");
    }
  }

  const std::size_t ng = gts.size();
  std::vector<double> overlaps(ng * np);
  for (std::size_t g = 0; g < ng; ++g)
    for (std::size_t p = 0; p < np; ++p) overlaps[g * np + p] = iou(gts[g].box, priors.boxes[p]);

  // Threshold pass: each prior goes to its best GT when that IoU clears the bar.
  for (std::size_t p = 0; p < np; ++p) {
    int best = -1;
    double best_iou = -1.0;
    for (std::size_t g = 0; g < ng; ++g) {
      if (overlaps[g * np + p] > best_iou) {
        best_iou = overlaps[g * np + p];
        best = static_cast<int>(g);
      }
    }
    if (best_iou > pos_threshold) assign[p] = best;
  }

  // Force-match: GTs ordered by their best IoU (descending, stable) each claim
  // their highest-IoU prior not yet claimed by another GT.
  std::vector<std::size_t> order(ng);
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> best_of(ng, 0.0);
  for (std::size_t g = 0; g < ng; ++g)
    best_of[g] = *std::max_element(overlaps.begin() + g * np, overlaps.begin() + (g + 1) * np);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return best_of[a] > best_of[b]; });
  std::vector<char> claimed(np, 0);
  for (std::size_t g : order) {
    std::size_t best = np;
    double best_iou = -1.0;
    for (std::size_t p = 0; p < np; ++p) {
      if (claimed[p]) continue;
      if (overlaps[g * np + p] > best_iou) {
        best_iou = overlaps[g * np + p];
        best = p;
      }
    }
    if (best == np) break;  // more GTs than priors
    claimed[best] = 1;
    assign[best] = static_cast<int>(g);
  }
  return assign;
}

std::array<double, 4> encode_offsets(const Box& gt, const Box& prior, BoxVariances var) {
  if (!(gt.w > 0) || !(gt.h > 0)) throw InputError("encode_offsets: nonpositive GT size");
  if (!(prior.w > 0) || !(prior.h > 0)) throw InputError("encode_offsets: nonpositive prior size");
  return {(gt.cx - prior.cx) / (prior.w * var.center),
          (gt.cy - prior.cy) / (prior.h * var.center),
          std::log(gt.w / prior.w) / var.size, std::log(gt.h / prior.h) / var.size};
}

Box decode_offsets_raw(const std::array<double, 4>& o, const Box& prior, BoxVariances var) {
  return Box{prior.cx + o[0] * var.center * prior.w, prior.cy + o[1] * var.center * prior.h,
             prior.w * std::exp(o[2] * var.size), prior.h * std::exp(o[3] * var.size)};
}

Box decode_offsets(const std::array<double, 4>& o, const Box& prior, BoxVariances var) {
  const Box raw = decode_offsets_raw(o, prior, var);
  const double x0 = std::clamp(raw.xmin(), 0.0, 1.0);
  const double x1 = std::clamp(raw.xmax(), 0.0, 1.0);
  const double y0 = std::clamp(raw.ymin(), 0.0, 1.0);
  const double y1 = std::clamp(raw.ymax(), 0.0, 1.0);
  constexpr double kMinSide = 1e-6;
  return Box::from_corners(x0, y0, std::max(x1, x0 + kMinSide), std::max(y1, y0 + kMinSide));
}

std::vector<std::size_t> nms(const std::vector<ScoredBox>& detections,
                             double iou_threshold, std::size_t top_k) {
  std::vector<std::size_t> order(detections.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return detections[a].score > detections[b].score;
  });
  std::vector<std::size_t> keep;
  for (std::size_t idx : order) {
    if (keep.size() >= top_k) break;
    bool suppressed = false;
    for (std::size_t k : keep) {
      if (iou(detections[idx].box, detections[k].box) > iou_threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) keep.push_back(idx);
  }
  return keep;
}

}  // namespace ctdet
