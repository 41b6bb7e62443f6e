#pragma once

#include <array>
#include <cstddef>
#include <vector>

namespace ctdet {

// Axis-aligned box in normalized image coordinates.
struct Box {
  double cx = 0, cy = 0, w = 0, h = 0;

  double xmin() const { return cx - w / 2; }
  double xmax() const { return cx + w / 2; }
  double ymin() const { return cy - h / 2; }
  double ymax() const { return cy + h / 2; }
  double area() const { return w * h; }

  static Box from_corners(double x0, double y0, double x1, double y1) {
    return Box{(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0};
  }
  bool operator==(const Box&) const = default;
};

struct ScaleSpec {
  std::size_t height = 1;
  std::size_t width = 1;
  double base_size = 0.2;        // fraction of the image side
  std::vector<double> ratios{1.0};  // aspect ratios w/h

  std::size_t num_ratios() const { return ratios.size(); }
  std::size_t num_priors() const { return height * width * ratios.size(); }
};

// Where a prior (or a context field) sits in the multi-scale layout.
struct GridProvenance {
  std::size_t scale = 0;
  std::size_t row = 0;
  std::size_t col = 0;
  std::size_t ratio = 0;
  bool operator==(const GridProvenance&) const = default;
};

// Boxes are flattened by ascending scale, then row-major cells, then ratio
// index. Detection heads and score matrices use the same order.
struct PriorBoxSet {
  std::vector<ScaleSpec> scales;
  std::vector<Box> boxes;
  std::vector<GridProvenance> provenance;
  std::vector<std::size_t> scale_offsets;  // first row of each scale, plus end

  std::size_t size() const { return boxes.size(); }
};

// Three scales (8x8, 4x4, 2x2), ratios {1, 2, 0.5}, base sizes {0.2, 0.45, 0.8}.
std::vector<ScaleSpec> default_scale_specs();

// Six-scale layout of the large reference detector (38..1 grids, 4/6 ratios).
std::vector<ScaleSpec> reference_scale_specs();

PriorBoxSet generate_priors(const std::vector<ScaleSpec>& scales);

// Closed form sum_k H_k * W_k * M_k.
std::size_t count_priors(const std::vector<ScaleSpec>& scales);

double iou(const Box& a, const Box& b);

struct GroundTruth {
  Box box;
  int cls = 0;
};

// Per prior: index of the assigned ground truth, or -1 for negative.
// Each GT is first given its best-IoU prior (next best if already claimed),
// then every remaining prior whose best IoU exceeds the threshold is assigned
// to that best GT.
std::vector<int> match_priors(const std::vector<GroundTruth>& gts,
                              const PriorBoxSet& priors,
                              double pos_threshold = 0.5);

struct BoxVariances {
  double center = 0.1;
  double size = 0.2;
};

std::array<double, 4> encode_offsets(const Box& gt, const Box& prior,
                                     BoxVariances var = {});

// Inverse of encode_offsets, without clamping.
Box decode_offsets_raw(const std::array<double, 4>& offsets, const Box& prior,
                       BoxVariances var = {});

// decode_offsets_raw followed by clamping the corners to [0, 1].
Box decode_offsets(const std::array<double, 4>& offsets, const Box& prior,
                   BoxVariances var = {});

struct ScoredBox {
  Box box;
  double score = 0;
};

// Greedy suppression in descending score order (ties by original index).
// Returns indices into `detections` of the kept boxes.
std::vector<std::size_t> nms(const std::vector<ScoredBox>& detections,
                             double iou_threshold = 0.45,
                             std::size_t top_k = 200);

}  // namespace ctdet
