#include "d3etr/matching.hpp"

#include <algorithm>
#include <cmath>

namespace d3etr::match {

namespace {

// Cost with an exact integer tie-breaker compared lexicographically.
struct TieCost {
  double c = 0.0;
  __int128 t = 0;

  TieCost operator+(const TieCost& o) const { return {c + o.c, t + o.t}; }
  TieCost operator-(const TieCost& o) const { return {c - o.c, t - o.t}; }
  TieCost& operator+=(const TieCost& o) { return *this = *this + o; }
  TieCost& operator-=(const TieCost& o) { return *this = *this - o; }
  bool operator<(const TieCost& o) const { return c < o.c || (c == o.c && t < o.t); }
};

constexpr std::size_t kMaxTieBreakSize = 24;

}  // namespace

Assignment hungarian(const CostMatrix& cost) {
  const std::size_t rows = cost.rows, cols = cost.cols;
  if (rows > cols) {
    throw MatchError("hungarian: " + std::to_string(rows) + " rows exceed " +
                     std::to_string(cols) + " columns");
  }
  if (cost.data.size() != rows * cols) throw MatchError("hungarian: malformed cost matrix");
  for (double v : cost.data) {
    if (!std::isfinite(v)) throw MatchError("hungarian: non-finite cost entry");
  }
  Assignment out;
  if (rows == 0) return out;

  // Pad to square; row i picking column j adds j * n^(n-1-i) to the tie
  // breaker so lexicographic order on the column sequence decides ties.
  const std::size_t n = cols;
  std::vector<__int128> weight(n, 0);
  if (n <= kMaxTieBreakSize) {
    __int128 w = 1;
    for (std::size_t i = n; i-- > 0;) {
      weight[i] = w;
      w *= static_cast<__int128>(n);
    }
  }
  auto a = [&](std::size_t i, std::size_t j) {
    const double c = i < rows ? cost(i, j) : kPadCost;
    return TieCost{c, weight[i] * static_cast<__int128>(j)};
  };

  // Shortest augmenting path with potentials, 1-based with a virtual column 0.
  const TieCost inf{std::numeric_limits<double>::infinity(), 0};
  std::vector<TieCost> u(n + 1), v(n + 1);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<TieCost> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      TieCost delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const TieCost cur = a(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  out.col_of_row.assign(rows, kUnassigned);
  for (std::size_t j = 1; j <= n; ++j) {
    if (p[j] != 0 && p[j] - 1 < rows) out.col_of_row[p[j] - 1] = j - 1;
  }
  for (std::size_t i = 0; i < rows; ++i) out.total_cost += cost(i, out.col_of_row[i]);
  return out;
}

double bce_soft_value(std::span<const double> p_student, std::span<const double> p_teacher) {
  if (p_student.size() != p_teacher.size() || p_student.empty()) {
    throw MatchError("bce_soft: probability vectors differ in length");
  }
  double s = 0.0;
  for (std::size_t c = 0; c < p_student.size(); ++c) {
    const double ps = std::clamp(p_student[c], kProbClamp, 1.0 - kProbClamp);
    const double pt = p_teacher[c];
    s -= pt * std::log(ps) + (1.0 - pt) * std::log(1.0 - ps);
  }
  return s / static_cast<double>(p_student.size());
}

CostMatrix gt_cost(const PredictionSet& preds, std::span<const GroundTruth> gts) {
  CostMatrix c(gts.size(), preds.n);
  for (std::size_t j = 0; j < gts.size(); ++j) {
    if (gts[j].cls >= preds.k) throw MatchError("gt_match: ground-truth class out of range");
    for (std::size_t i = 0; i < preds.n; ++i) {
      c(j, i) = -preds.probs[i * preds.k + gts[j].cls] + box::box_loss(preds.box(i), gts[j].box);
    }
  }
  return c;
}

GtAssignment gt_match(const PredictionSet& preds, std::span<const GroundTruth> gts) {
  if (gts.size() > preds.n) {
    throw MatchError("gt_match: " + std::to_string(gts.size()) + " ground truths exceed " +
                     std::to_string(preds.n) + " queries");
  }
  GtAssignment out;
  out.n_queries = preds.n;
  out.query_of_gt = hungarian(gt_cost(preds, gts)).col_of_row;
  return out;
}

std::vector<GtAssignment> gt_match_layers(std::span<const PredictionSet> layers,
                                          std::span<const GroundTruth> gts) {
  std::vector<GtAssignment> out;
  out.reserve(layers.size());
  for (const auto& l : layers) out.push_back(gt_match(l, gts));
  return out;
}

CostMatrix teacher_student_cost(const PredictionSet& student, const PredictionSet& teacher,
                                double mu_cls) {
  if (student.k != teacher.k) throw MatchError("adaptive_match: class counts differ");
  CostMatrix c(student.n, teacher.n);
  for (std::size_t i = 0; i < student.n; ++i) {
    const auto ps = student.prob_row(i);
    const auto bs = student.box(i);
    for (std::size_t j = 0; j < teacher.n; ++j) {
      c(i, j) = mu_cls * bce_soft_value(ps, teacher.prob_row(j)) + box::box_loss(bs, teacher.box(j));
    }
  }
  return c;
}

LayerMatchings adaptive_match(std::span<const PredictionSet> student_layers,
                              std::span<const PredictionSet> teacher_layers, double mu_cls) {
  if (student_layers.size() != teacher_layers.size()) {
    throw MatchError("adaptive_match: layer counts differ");
  }
  LayerMatchings out;
  out.reserve(student_layers.size());
  for (std::size_t k = 0; k < student_layers.size(); ++k) {
    if (student_layers[k].n > teacher_layers[k].n) {
      throw MatchError("adaptive_match: " + std::to_string(student_layers[k].n) +
                       " student queries exceed " + std::to_string(teacher_layers[k].n) +
                       " teacher queries");
    }
    out.push_back(hungarian(teacher_student_cost(student_layers[k], teacher_layers[k], mu_cls)));
  }
  return out;
}

LayerMatchings fixed_matchings(std::size_t n_layers, std::size_t n_queries) {
  Assignment id;
  id.col_of_row.resize(n_queries);
  for (std::size_t i = 0; i < n_queries; ++i) id.col_of_row[i] = i;
  return LayerMatchings(n_layers, id);
}

ConstraintMode parse_constraint_mode(const std::string& s) {
  if (s == "off") return ConstraintMode::kOff;
  if (s == "last-layer") return ConstraintMode::kLastLayer;
  if (s == "all-layers") return ConstraintMode::kAllLayers;
  throw MatchError("unknown constraint mode '" + s + "' (expected off|last-layer|all-layers)");
}

std::string to_string(ConstraintMode m) {
  switch (m) {
    case ConstraintMode::kOff: return "off";
    case ConstraintMode::kLastLayer: return "last-layer";
    case ConstraintMode::kAllLayers: return "all-layers";
  }
  return "off";
}

std::vector<GtAssignment> apply_fixed_constraint(std::vector<GtAssignment> aux_layers,
                                                 const GtAssignment& teacher_last,
                                                 ConstraintMode mode) {
  if (mode == ConstraintMode::kOff || aux_layers.empty()) return aux_layers;
  for (std::size_t q : teacher_last.query_of_gt) {
    for (const auto& l : aux_layers) {
      if (q >= l.n_queries) {
        throw MatchError("apply_fixed_constraint: teacher query " + std::to_string(q) +
                         " out of range for auxiliary group of " + std::to_string(l.n_queries));
      }
    }
  }
  const std::size_t first = mode == ConstraintMode::kLastLayer ? aux_layers.size() - 1 : 0;
  for (std::size_t k = first; k < aux_layers.size(); ++k) {
    aux_layers[k].query_of_gt = teacher_last.query_of_gt;
  }
  return aux_layers;
}

double instability_metric(const GtAssignment& now, const GtAssignment& before) {
  if (now.query_of_gt.size() != before.query_of_gt.size()) {
    throw MatchError("instability_metric: ground-truth counts differ");
  }
  if (now.query_of_gt.empty()) return 0.0;
  std::size_t changed = 0;
  for (std::size_t j = 0; j < now.query_of_gt.size(); ++j) {
    changed += now.query_of_gt[j] != before.query_of_gt[j];
  }
  return static_cast<double>(changed) / static_cast<double>(now.query_of_gt.size());
}

double instability_metric(const Assignment& now, const Assignment& before) {
  if (now.col_of_row.size() != before.col_of_row.size()) {
    throw MatchError("instability_metric: row counts differ");
  }
  if (now.col_of_row.empty()) return 0.0;
  std::size_t changed = 0;
  for (std::size_t i = 0; i < now.col_of_row.size(); ++i) {
    changed += now.col_of_row[i] != before.col_of_row[i];
  }
  return static_cast<double>(changed) / static_cast<double>(now.col_of_row.size());
}

}  // namespace d3etr::match
