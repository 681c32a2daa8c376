#pragma once

#include <cstddef>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "d3etr/boxes.hpp"

namespace d3etr::match {

class MatchError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr double kMuCls = 20.0;
inline constexpr double kPadCost = 1e6;
inline constexpr double kProbClamp = 1e-7;
inline constexpr std::size_t kUnassigned = std::numeric_limits<std::size_t>::max();

// Dense row-major cost matrix.
struct CostMatrix {
  std::size_t rows = 0, cols = 0;
  std::vector<double> data;

  CostMatrix() = default;
  CostMatrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}
  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
};

struct Assignment {
  std::vector<std::size_t> col_of_row;
  double total_cost = 0.0;
};

// Optimal injective row -> column assignment for rows <= cols. Among optimal
// assignments the lexicographically smallest column sequence wins (exact for
// up to 24 columns, beyond that ties resolve in solver order).
Assignment hungarian(const CostMatrix& cost);

// Values-only snapshot of one decoder layer's predictions for a query range.
struct PredictionSet {
  std::size_t n = 0, k = 0;
  std::vector<double> probs;  // n x k sigmoid probabilities
  std::vector<double> boxes;  // n x 4 (cx, cy, w, h)

  std::span<const double> prob_row(std::size_t i) const { return {probs.data() + i * k, k}; }
  box::BoxCxCyWH box(std::size_t i) const { return box::box_from_row({boxes.data() + i * 4, 4}); }
};

struct GroundTruth {
  std::size_t cls = 0;
  box::BoxCxCyWH box;
  friend bool operator==(const GroundTruth&, const GroundTruth&) = default;
};

// query_of_gt[j] is the query supervised by ground truth j; all other
// queries are "no object".
struct GtAssignment {
  std::size_t n_queries = 0;
  std::vector<std::size_t> query_of_gt;
  friend bool operator==(const GtAssignment&, const GtAssignment&) = default;
};

// Mean over classes of clamped binary cross-entropy of student against a soft
// teacher target.
double bce_soft_value(std::span<const double> p_student, std::span<const double> p_teacher);

CostMatrix gt_cost(const PredictionSet& preds, std::span<const GroundTruth> gts);
GtAssignment gt_match(const PredictionSet& preds, std::span<const GroundTruth> gts);
std::vector<GtAssignment> gt_match_layers(std::span<const PredictionSet> layers,
                                          std::span<const GroundTruth> gts);

// Student rows x teacher columns.
CostMatrix teacher_student_cost(const PredictionSet& student, const PredictionSet& teacher,
                                double mu_cls = kMuCls);

// One student -> teacher assignment per layer.
using LayerMatchings = std::vector<Assignment>;
LayerMatchings adaptive_match(std::span<const PredictionSet> student_layers,
                              std::span<const PredictionSet> teacher_layers,
                              double mu_cls = kMuCls);

// Identity correspondence for a group fed the teacher's own queries.
LayerMatchings fixed_matchings(std::size_t n_layers, std::size_t n_queries);

enum class ConstraintMode { kOff, kLastLayer, kAllLayers };
ConstraintMode parse_constraint_mode(const std::string& s);
std::string to_string(ConstraintMode m);

std::vector<GtAssignment> apply_fixed_constraint(std::vector<GtAssignment> aux_layers,
                                                 const GtAssignment& teacher_last,
                                                 ConstraintMode mode);

// Fraction of ground truths whose assigned query differs.
double instability_metric(const GtAssignment& now, const GtAssignment& before);
// Fraction of rows whose matched column differs.
double instability_metric(const Assignment& now, const Assignment& before);

}  // namespace d3etr::match
