#include "d3etr/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>

namespace d3etr::eval {

std::vector<double> iou_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

std::optional<double> average_precision(std::span<const Detection> dets,
                                        std::span<const std::vector<match::GroundTruth>> gts,
                                        std::size_t cls, double iou_threshold,
                                        const AreaRange& area) {
  // Class detections by descending score; stable, so input order breaks ties.
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    if (dets[i].cls == cls) order.push_back(i);
  }
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });

  // Per image: class GTs with non-ignored ones first.
  struct Gt {
    box::BoxXYXY box;
    bool ignore;
  };
  std::vector<std::vector<Gt>> img_gts(gts.size());
  std::size_t n_pos = 0;
  for (std::size_t im = 0; im < gts.size(); ++im) {
    for (const auto& g : gts[im]) {
      if (g.cls != cls) continue;
      const bool ign = !area.contains(g.box.w * g.box.h);
      img_gts[im].push_back({box::cxcywh_to_xyxy(g.box), ign});
      n_pos += !ign;
    }
    std::stable_partition(img_gts[im].begin(), img_gts[im].end(), [](const Gt& g) { return !g.ignore; });
  }
  if (n_pos == 0) return std::nullopt;

  std::vector<std::vector<char>> used(gts.size());
  for (std::size_t im = 0; im < gts.size(); ++im) used[im].assign(img_gts[im].size(), 0);

  std::vector<double> tp_cum, fp_cum;
  double tp = 0, fp = 0;
  const double thr = std::min(iou_threshold, 1.0 - 1e-10);
  for (std::size_t di : order) {
    const Detection& d = dets[di];
    if (d.image >= gts.size()) continue;
    const auto& cand = img_gts[d.image];
    const box::BoxXYXY db = box::cxcywh_to_xyxy(d.box);
    double best = thr;
    std::ptrdiff_t m = -1;
    for (std::size_t g = 0; g < cand.size(); ++g) {
      if (used[d.image][g]) continue;
      if (m >= 0 && !cand[m].ignore && cand[g].ignore) break;
      const double v = box::iou(db, cand[g].box);
      if (v < best) continue;
      best = v;
      m = static_cast<std::ptrdiff_t>(g);
    }
    bool ignored;
    if (m >= 0) {
      used[d.image][m] = 1;
      ignored = cand[m].ignore;
      if (!ignored) tp += 1;
    } else {
      ignored = !area.contains(d.box.w * d.box.h);
      if (!ignored) fp += 1;
    }
    if (ignored) continue;
    tp_cum.push_back(tp);
    fp_cum.push_back(fp);
  }

  const std::size_t n = tp_cum.size();
  std::vector<double> rc(n), pr(n);
  for (std::size_t i = 0; i < n; ++i) {
    rc[i] = tp_cum[i] / static_cast<double>(n_pos);
    pr[i] = tp_cum[i] / (tp_cum[i] + fp_cum[i]);
  }
  for (std::size_t i = n; i-- > 1;) pr[i - 1] = std::max(pr[i - 1], pr[i]);
  double s = 0.0;
  for (int r = 0; r <= 100; ++r) {
    const double target = r / 100.0;
    const auto it = std::lower_bound(rc.begin(), rc.end(), target);
    if (it != rc.end()) s += pr[static_cast<std::size_t>(it - rc.begin())];
  }
  return s / 101.0;
}

std::pair<double, double> area_terciles(std::span<const std::vector<match::GroundTruth>> gts) {
  std::vector<double> areas;
  for (const auto& im : gts)
    for (const auto& g : im) areas.push_back(g.box.w * g.box.h);
  if (areas.empty()) return {0.0, 0.0};
  std::sort(areas.begin(), areas.end());
  return {areas[areas.size() / 3], areas[2 * areas.size() / 3]};
}

EvalResult evaluate_detections(std::span<const Detection> dets,
                               std::span<const std::vector<match::GroundTruth>> gts,
                               std::size_t n_classes) {
  auto mean_ap = [&](std::span<const double> thresholds, const AreaRange& range) {
    double s = 0.0;
    std::size_t n = 0;
    for (double t : thresholds) {
      for (std::size_t c = 0; c < n_classes; ++c) {
        if (auto ap = average_precision(dets, gts, c, t, range)) {
          s += *ap;
          ++n;
        }
      }
    }
    return n ? s / static_cast<double>(n) : 0.0;
  };
  const auto all = iou_thresholds();
  const double t50[] = {0.5}, t75[] = {0.75};
  const auto [q1, q2] = area_terciles(gts);
  EvalResult r;
  r.ap50 = mean_ap(t50, {});
  r.ap75 = mean_ap(t75, {});
  r.map = mean_ap(all, {});
  r.ap_small = mean_ap(all, {0.0, q1});
  r.ap_medium = mean_ap(all, {q1, q2});
  r.ap_large = mean_ap(all, {q2, 1e300});
  return r;
}

std::string eval_csv_header() { return "epoch,ap50,ap75,map,ap_small,ap_medium,ap_large"; }

std::string eval_csv_row(std::size_t epoch, const EvalResult& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g", epoch, r.ap50, r.ap75,
                r.map, r.ap_small, r.ap_medium, r.ap_large);
  return buf;
}

}  // namespace d3etr::eval
