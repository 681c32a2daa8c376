#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "d3etr/matching.hpp"

namespace d3etr::eval {

struct Detection {
  std::size_t image = 0;
  std::size_t cls = 0;
  double score = 0.0;
  box::BoxCxCyWH box;
};

// Half-open range of normalized box areas.
struct AreaRange {
  double lo = 0.0, hi = 1e300;
  bool contains(double a) const { return a >= lo && a < hi; }
};

struct EvalResult {
  double ap50 = 0.0;
  double ap75 = 0.0;
  double map = 0.0;  // mean over IoU 0.50:0.05:0.95
  double ap_small = 0.0, ap_medium = 0.0, ap_large = 0.0;
};

// Detections per (image, class) are ranked by score, ties by input order.
// Greedy matching per IoU threshold; 101-point interpolated AP. Returns
// nullopt when the class has no (non-ignored) ground truth.
std::optional<double> average_precision(std::span<const Detection> dets,
                                        std::span<const std::vector<match::GroundTruth>> gts,
                                        std::size_t cls, double iou_threshold,
                                        const AreaRange& area = {});

std::vector<double> iou_thresholds();

// Tercile cut points of all ground-truth areas.
std::pair<double, double> area_terciles(std::span<const std::vector<match::GroundTruth>> gts);

EvalResult evaluate_detections(std::span<const Detection> dets,
                               std::span<const std::vector<match::GroundTruth>> gts,
                               std::size_t n_classes);

std::string eval_csv_header();
std::string eval_csv_row(std::size_t epoch, const EvalResult& r);

}  // namespace d3etr::eval
