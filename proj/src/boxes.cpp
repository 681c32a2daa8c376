#include "d3etr/boxes.hpp"

#include <algorithm>
#include <cmath>

namespace d3etr::box {

BoxXYXY cxcywh_to_xyxy(const BoxCxCyWH& b) {
  return {b.cx - 0.5 * b.w, b.cy - 0.5 * b.h, b.cx + 0.5 * b.w, b.cy + 0.5 * b.h};
}

BoxCxCyWH xyxy_to_cxcywh(const BoxXYXY& b) {
  return {0.5 * (b.x1 + b.x2), 0.5 * (b.y1 + b.y2), b.x2 - b.x1, b.y2 - b.y1};
}

namespace {

struct Overlap {
  double inter, uni, enclosure;
};

Overlap overlap(const BoxXYXY& a, const BoxXYXY& b) {
  const double iw = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double ih = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  const double ew = std::max(a.x2, b.x2) - std::min(a.x1, b.x1);
  const double eh = std::max(a.y2, b.y2) - std::min(a.y1, b.y1);
  return {inter, uni, ew * eh};
}

}  // namespace

double iou(const BoxXYXY& a, const BoxXYXY& b) {
  const Overlap o = overlap(a, b);
  return o.uni > 0.0 ? o.inter / o.uni : 0.0;
}

double giou(const BoxXYXY& a, const BoxXYXY& b) {
  const Overlap o = overlap(a, b);
  if (o.enclosure <= 0.0) return 0.0;
  const double i = o.uni > 0.0 ? o.inter / o.uni : 0.0;
  return i - (o.enclosure - o.uni) / o.enclosure;
}

double box_loss(const BoxCxCyWH& pred, const BoxCxCyWH& target, double l1_weight,
                double giou_weight) {
  const double l1 = std::fabs(pred.cx - target.cx) + std::fabs(pred.cy - target.cy) +
                    std::fabs(pred.w - target.w) + std::fabs(pred.h - target.h);
  const double g = giou(cxcywh_to_xyxy(pred), cxcywh_to_xyxy(target));
  return l1_weight * l1 + giou_weight * (1.0 - g);
}

BoxCxCyWH box_from_row(std::span<const double> row) {
  return {row[0], row[1], row[2], row[3]};
}

ad::DiffArray giou_pairs(const ad::DiffArray& pred, const ad::DiffArray& target) {
  using namespace ad;
  if (pred.rank() != 2 || pred.cols() != 4 || pred.shape() != target.shape()) {
    throw GradError("giou_pairs: expected matching [n,4] arrays, got " + shape_str(pred.shape()) +
                    " and " + shape_str(target.shape()));
  }
  auto corners = [](const DiffArray& b) {
    const DiffArray cx = slice_cols(b, 0, 1), cy = slice_cols(b, 1, 2);
    const DiffArray hw = scale(slice_cols(b, 2, 3), 0.5), hh = scale(slice_cols(b, 3, 4), 0.5);
    return std::array<DiffArray, 4>{sub(cx, hw), sub(cy, hh), add(cx, hw), add(cy, hh)};
  };
  const auto a = corners(pred);
  const auto b = corners(target);
  const DiffArray area_a = mul(sub(a[2], a[0]), sub(a[3], a[1]));
  const DiffArray area_b = mul(sub(b[2], b[0]), sub(b[3], b[1]));
  const DiffArray iw = relu(sub(minimum(a[2], b[2]), maximum(a[0], b[0])));
  const DiffArray ih = relu(sub(minimum(a[3], b[3]), maximum(a[1], b[1])));
  const DiffArray inter = mul(iw, ih);
  const DiffArray uni = sub(add(area_a, area_b), inter);
  const DiffArray ew = sub(maximum(a[2], b[2]), minimum(a[0], b[0]));
  const DiffArray eh = sub(maximum(a[3], b[3]), minimum(a[1], b[1]));
  const DiffArray enclosure = mul(ew, eh);
  const DiffArray iou_v = safe_div(inter, uni);
  // safe_div pins the empty-enclosure case: uncovered fraction 0 and IoU 0.
  return sub(iou_v, safe_div(sub(enclosure, uni), enclosure));
}

ad::DiffArray box_loss_sum(const ad::DiffArray& pred, const ad::DiffArray& target,
                           double l1_weight, double giou_weight) {
  using namespace ad;
  const std::size_t n = pred.rows();
  if (n == 0) return DiffArray::scalar(0.0);
  const DiffArray l1 = sum(abs(sub(pred, target)));
  const DiffArray g = sum(giou_pairs(pred, target));
  // giou_weight * (n - sum giou)
  return add(scale(l1, l1_weight), scale(add_scalar(neg(g), static_cast<double>(n)), giou_weight));
}

}  // namespace d3etr::box
