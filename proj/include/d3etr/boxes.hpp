#pragma once

#include <array>

#include "d3etr/grad.hpp"

namespace d3etr::box {

// Normalized center form.
struct BoxCxCyWH {
  double cx = 0, cy = 0, w = 0, h = 0;
  friend bool operator==(const BoxCxCyWH&, const BoxCxCyWH&) = default;
};

// Corner form, x1 <= x2 and y1 <= y2.
struct BoxXYXY {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
  double area() const { return (x2 - x1) * (y2 - y1); }
  friend bool operator==(const BoxXYXY&, const BoxXYXY&) = default;
};

inline constexpr double kL1Weight = 5.0;
inline constexpr double kGiouWeight = 2.0;

BoxXYXY cxcywh_to_xyxy(const BoxCxCyWH& b);
BoxCxCyWH xyxy_to_cxcywh(const BoxXYXY& b);

// 0 for disjoint or touching boxes and for a pair with zero union.
double iou(const BoxXYXY& a, const BoxXYXY& b);
// IoU minus the enclosure's uncovered fraction; 0 when the enclosure is empty.
double giou(const BoxXYXY& a, const BoxXYXY& b);

// 5 * L1 in center form + 2 * (1 - GIoU) in corner form.
double box_loss(const BoxCxCyWH& pred, const BoxCxCyWH& target,
                double l1_weight = kL1Weight, double giou_weight = kGiouWeight);

BoxCxCyWH box_from_row(std::span<const double> row);

// Differentiable counterparts over [n,4] arrays of (cx, cy, w, h) rows.
// Returns the [n,1] per-pair GIoU.
ad::DiffArray giou_pairs(const ad::DiffArray& pred, const ad::DiffArray& target);
// Sum over rows of the per-pair box loss.
ad::DiffArray box_loss_sum(const ad::DiffArray& pred, const ad::DiffArray& target,
                           double l1_weight = kL1Weight, double giou_weight = kGiouWeight);

}  // namespace d3etr::box
