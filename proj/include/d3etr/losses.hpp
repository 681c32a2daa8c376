#pragma once

#include <span>
#include <string>
#include <vector>

#include "d3etr/grad.hpp"
#include "d3etr/matching.hpp"
#include "d3etr/nn.hpp"

namespace d3etr::loss {

using ad::DiffArray;

struct LossConfig {
  double mu_cls = match::kMuCls;
  double l1_weight = box::kL1Weight;
  double giou_weight = box::kGiouWeight;
  double lambda_sa = 10000.0;
  double lambda_ca = 10000.0;
  match::ConstraintMode constraint_mode = match::ConstraintMode::kLastLayer;

  // Distillation terms.
  bool pred = true;
  bool self_attn = true;
  bool cross_attn = true;
  // Ground-truth supervision of auxiliary groups.
  bool aux_detection = true;

  // Teacher-student matching plan. adaptive_groups counts learned-query
  // groups matched adaptively (the student group is the first of them; 0
  // leaves it undistilled). fixed_groups counts auxiliary groups fed the
  // teacher's queries with identity correspondence.
  std::size_t adaptive_groups = 1;
  std::size_t fixed_groups = 1;

  bool adaptive() const { return adaptive_groups > 0; }
  bool fixed() const { return fixed_groups > 0; }
  bool any_distill() const { return (adaptive() || fixed()) && (pred || self_attn || cross_attn); }
  std::size_t extra_adaptive_groups() const { return adaptive_groups > 1 ? adaptive_groups - 1 : 0; }
  void validate() const;
};

// Baseline detector training: no teacher, no extra groups.
LossConfig detection_only();

struct LossReport {
  double detection = 0, l_pred = 0, l_sa = 0, l_ca = 0;
  double aux_detection = 0, aux_l_pred = 0, aux_l_sa = 0, aux_l_ca = 0;
  double total = 0;

  LossReport& operator+=(const LossReport& o);
  LossReport scaled(double s) const;
};

std::string loss_csv_header();
std::string loss_csv_row(std::size_t step, const LossReport& r);

// Per-head maps of one layer as plain values.
struct AttentionMaps {
  std::size_t rows = 0, cols = 0;
  std::vector<std::vector<double>> heads;
};

// Frozen teacher outputs for one decoder layer.
struct TeacherLayer {
  match::PredictionSet preds;
  AttentionMaps self_attn;
  AttentionMaps cross_attn;
};

// Differentiable outputs of one query group at one decoder layer.
struct GroupLayer {
  DiffArray logits, probs, boxes;
  std::vector<DiffArray> self_attn;   // per head, group x group block
  std::vector<DiffArray> cross_attn;  // per head, group rows x HW
};

std::vector<GroupLayer> slice_group(const nn::DecoderOutputs& out, const nn::GroupSlice& g);
match::PredictionSet prediction_values(const DiffArray& probs, const DiffArray& boxes);
std::vector<match::PredictionSet> prediction_values(std::span<const GroupLayer> layers);
TeacherLayer teacher_layer(const nn::DecoderOutputs& out, std::size_t layer);

// Sum over rows of the per-row mean (over classes) clamped BCE against a
// constant soft target.
DiffArray bce_soft(const DiffArray& p_student, const DiffArray& p_target);

// Per layer: class BCE against one-hot (matched) / all-zero (unmatched)
// targets over every query plus box loss on matched pairs; summed over layers.
DiffArray detection_loss(std::span<const GroupLayer> layers,
                         std::span<const match::GroundTruth> gts,
                         std::span<const match::GtAssignment> assignment, const LossConfig& cfg);

// Sum over layers and student queries of mu*bce + box loss against the
// matched teacher predictions.
DiffArray pred_distill(std::span<const GroupLayer> student, std::span<const TeacherLayer> teacher,
                       const match::LayerMatchings& matchings, const LossConfig& cfg);

// Value of pred_distill at student == matched teacher: mu * sum of clamped
// teacher self-entropies.
double entropy_floor(std::span<const TeacherLayer> teacher, const match::LayerMatchings& matchings,
                     double mu_cls);

// Teacher map restricted to the matched rows (and columns for square maps).
AttentionMaps gather_teacher_rows(const AttentionMaps& maps, std::span<const std::size_t> idx,
                                  bool gather_cols);

// lambda * sum_k mean over heads and entries of squared differences.
DiffArray attn_distill_self(std::span<const GroupLayer> student,
                            std::span<const TeacherLayer> teacher,
                            const match::LayerMatchings& matchings, double lambda);
DiffArray attn_distill_cross(std::span<const GroupLayer> student,
                             std::span<const TeacherLayer> teacher,
                             const match::LayerMatchings& matchings, double lambda);

// Components of one query group; undefined arrays mean "disabled".
struct GroupLosses {
  DiffArray detection, pred, sa, ca;
};

struct TotalLoss {
  DiffArray objective;
  LossReport report;
};

// Detection terms plus every enabled distillation term, student group and
// auxiliary groups alike.
TotalLoss total_distill(const GroupLosses& student, std::span<const GroupLosses> aux,
                        const LossConfig& cfg);

}  // namespace d3etr::loss
