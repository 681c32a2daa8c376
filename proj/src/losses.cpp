#include "d3etr/losses.hpp"

#include <cstdio>

namespace d3etr::loss {

using namespace ad;

void LossConfig::validate() const {
  for (double w : {mu_cls, l1_weight, giou_weight, lambda_sa, lambda_ca}) {
    if (w < 0.0) throw GradError("LossConfig: loss weights must be nonnegative");
  }
  if (adaptive_groups > 2 || fixed_groups > 2) {
    throw GradError("LossConfig: at most two groups per matching strategy");
  }
}

LossConfig detection_only() {
  LossConfig c;
  c.pred = c.self_attn = c.cross_attn = false;
  c.adaptive_groups = 0;
  c.fixed_groups = 0;
  c.constraint_mode = match::ConstraintMode::kOff;
  return c;
}

LossReport& LossReport::operator+=(const LossReport& o) {
  detection += o.detection;
  l_pred += o.l_pred;
  l_sa += o.l_sa;
  l_ca += o.l_ca;
  aux_detection += o.aux_detection;
  aux_l_pred += o.aux_l_pred;
  aux_l_sa += o.aux_l_sa;
  aux_l_ca += o.aux_l_ca;
  total += o.total;
  return *this;
}

LossReport LossReport::scaled(double s) const {
  LossReport r = *this;
  for (double* v : {&r.detection, &r.l_pred, &r.l_sa, &r.l_ca, &r.aux_detection, &r.aux_l_pred,
                    &r.aux_l_sa, &r.aux_l_ca, &r.total}) {
    *v *= s;
  }
  return r;
}

std::string loss_csv_header() {
  return "step,detection,l_pred,l_sa,l_ca,aux_detection,aux_l_pred,aux_l_sa,aux_l_ca,total";
}

std::string loss_csv_row(std::size_t step, const LossReport& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g", step,
                r.detection, r.l_pred, r.l_sa, r.l_ca, r.aux_detection, r.aux_l_pred, r.aux_l_sa,
                r.aux_l_ca, r.total);
  return buf;
}

std::vector<GroupLayer> slice_group(const nn::DecoderOutputs& out, const nn::GroupSlice& g) {
  std::vector<GroupLayer> layers;
  for (std::size_t l = 0; l < out.layers.size(); ++l) {
    const auto& lo = out.layers[l];
    const bool whole = g.begin == 0 && g.end == lo.logits.rows();
    auto rows = [&](const DiffArray& x) { return whole ? x : slice_rows(x, g.begin, g.end); };
    GroupLayer gl;
    gl.logits = rows(lo.logits);
    gl.probs = rows(lo.probs);
    gl.boxes = rows(lo.boxes);
    for (const auto& m : out.attention.self_attn[l]) {
      gl.self_attn.push_back(whole ? m : slice_cols(rows(m), g.begin, g.end));
    }
    for (const auto& m : out.attention.cross_attn[l]) gl.cross_attn.push_back(rows(m));
    layers.push_back(std::move(gl));
  }
  return layers;
}

match::PredictionSet prediction_values(const DiffArray& probs, const DiffArray& boxes) {
  match::PredictionSet p;
  p.n = probs.rows();
  p.k = probs.cols();
  p.probs.assign(probs.values().begin(), probs.values().end());
  p.boxes.assign(boxes.values().begin(), boxes.values().end());
  return p;
}

std::vector<match::PredictionSet> prediction_values(std::span<const GroupLayer> layers) {
  std::vector<match::PredictionSet> out;
  for (const auto& l : layers) out.push_back(prediction_values(l.probs, l.boxes));
  return out;
}

namespace {

AttentionMaps maps_of(const std::vector<DiffArray>& heads) {
  AttentionMaps m;
  m.rows = heads.at(0).rows();
  m.cols = heads.at(0).cols();
  for (const auto& h : heads) m.heads.emplace_back(h.values().begin(), h.values().end());
  return m;
}

DiffArray total_of(const std::vector<DiffArray>& terms) {
  if (terms.empty()) return DiffArray::scalar(0.0);
  DiffArray s = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) s = add(s, terms[i]);
  return s;
}

void require_layers(std::size_t student, std::size_t teacher, std::size_t matchings) {
  if (student != teacher || student != matchings) {
    throw GradError("distillation: layer counts differ (student " + std::to_string(student) +
                    ", teacher " + std::to_string(teacher) + ", matchings " +
                    std::to_string(matchings) + ")");
  }
}

DiffArray gathered_rows(const std::vector<double>& values, std::size_t cols,
                        std::span<const std::size_t> idx) {
  std::vector<double> out;
  out.reserve(idx.size() * cols);
  for (std::size_t i : idx) {
    if ((i + 1) * cols > values.size()) throw GradError("distillation: matched index out of range");
    out.insert(out.end(), values.begin() + i * cols, values.begin() + (i + 1) * cols);
  }
  return DiffArray::constant({idx.size(), cols}, std::move(out));
}

}  // namespace

TeacherLayer teacher_layer(const nn::DecoderOutputs& out, std::size_t layer) {
  const auto& lo = out.layers.at(layer);
  return {prediction_values(lo.probs, lo.boxes), maps_of(out.attention.self_attn.at(layer)),
          maps_of(out.attention.cross_attn.at(layer))};
}

DiffArray bce_soft(const DiffArray& p_student, const DiffArray& p_target) {
  if (p_student.shape() != p_target.shape()) {
    throw GradError("bce_soft: shape mismatch " + shape_str(p_student.shape()) + " vs " +
                    shape_str(p_target.shape()));
  }
  const DiffArray pc = clamp(p_student, match::kProbClamp, 1.0 - match::kProbClamp);
  const DiffArray t = p_target.detach();
  std::vector<double> one_minus(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) one_minus[i] = 1.0 - t.at(i);
  const DiffArray u = DiffArray::constant(t.shape(), std::move(one_minus));
  const DiffArray ll = add(mul(t, log(pc)), mul(u, log(add_scalar(neg(pc), 1.0))));
  return scale(sum(ll), -1.0 / static_cast<double>(p_student.cols()));
}

DiffArray detection_loss(std::span<const GroupLayer> layers,
                         std::span<const match::GroundTruth> gts,
                         std::span<const match::GtAssignment> assignment, const LossConfig& cfg) {
  if (layers.size() != assignment.size()) {
    throw GradError("detection_loss: one assignment per layer required");
  }
  std::vector<DiffArray> terms;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& gl = layers[l];
    const std::size_t n = gl.probs.rows(), k = gl.probs.cols();
    const auto& q_of_gt = assignment[l].query_of_gt;
    if (q_of_gt.size() != gts.size()) throw GradError("detection_loss: assignment/GT count mismatch");
    std::vector<double> target(n * k, 0.0);
    std::vector<double> gt_boxes;
    for (std::size_t j = 0; j < gts.size(); ++j) {
      if (q_of_gt[j] >= n || gts[j].cls >= k) throw GradError("detection_loss: index out of range");
      target[q_of_gt[j] * k + gts[j].cls] = 1.0;
      const auto& b = gts[j].box;
      gt_boxes.insert(gt_boxes.end(), {b.cx, b.cy, b.w, b.h});
    }
    terms.push_back(bce_soft(gl.probs, DiffArray::constant({n, k}, std::move(target))));
    if (!gts.empty()) {
      const DiffArray matched = gather(gl.boxes, 0, q_of_gt);
      terms.push_back(box::box_loss_sum(matched, DiffArray::constant({gts.size(), 4}, std::move(gt_boxes)),
                                        cfg.l1_weight, cfg.giou_weight));
    }
  }
  return total_of(terms);
}

DiffArray pred_distill(std::span<const GroupLayer> student, std::span<const TeacherLayer> teacher,
                       const match::LayerMatchings& matchings, const LossConfig& cfg) {
  require_layers(student.size(), teacher.size(), matchings.size());
  std::vector<DiffArray> terms;
  for (std::size_t l = 0; l < student.size(); ++l) {
    const auto& idx = matchings[l].col_of_row;
    const auto& tp = teacher[l].preds;
    if (idx.size() != student[l].probs.rows()) throw GradError("pred_distill: matching size mismatch");
    const DiffArray t_probs = gathered_rows(tp.probs, tp.k, idx);
    const DiffArray t_boxes = gathered_rows(tp.boxes, 4, idx);
    terms.push_back(scale(bce_soft(student[l].probs, t_probs), cfg.mu_cls));
    terms.push_back(box::box_loss_sum(student[l].boxes, t_boxes, cfg.l1_weight, cfg.giou_weight));
  }
  return total_of(terms);
}

double entropy_floor(std::span<const TeacherLayer> teacher, const match::LayerMatchings& matchings,
                     double mu_cls) {
  double s = 0.0;
  for (std::size_t l = 0; l < matchings.size(); ++l) {
    for (std::size_t j : matchings[l].col_of_row) {
      const auto p = teacher[l].preds.prob_row(j);
      std::vector<double> pc(p.begin(), p.end());
      for (double& x : pc) x = std::clamp(x, match::kProbClamp, 1.0 - match::kProbClamp);
      s += mu_cls * match::bce_soft_value(pc, p);
    }
  }
  return s;
}

AttentionMaps gather_teacher_rows(const AttentionMaps& maps, std::span<const std::size_t> idx,
                                  bool gather_cols) {
  AttentionMaps out;
  out.rows = idx.size();
  out.cols = gather_cols ? idx.size() : maps.cols;
  for (const auto& h : maps.heads) {
    std::vector<double> g;
    g.reserve(out.rows * out.cols);
    for (std::size_t i : idx) {
      if (i >= maps.rows) throw GradError("attention distillation: matched index out of range");
      if (gather_cols) {
        for (std::size_t j : idx) g.push_back(h[i * maps.cols + j]);
      } else {
        g.insert(g.end(), h.begin() + i * maps.cols, h.begin() + (i + 1) * maps.cols);
      }
    }
    out.heads.push_back(std::move(g));
  }
  return out;
}

namespace {

DiffArray attn_distill(std::span<const GroupLayer> student, std::span<const TeacherLayer> teacher,
                       const match::LayerMatchings& matchings, double lambda, bool self) {
  require_layers(student.size(), teacher.size(), matchings.size());
  std::vector<DiffArray> terms;
  for (std::size_t l = 0; l < student.size(); ++l) {
    const auto& s_maps = self ? student[l].self_attn : student[l].cross_attn;
    const auto& t_maps = self ? teacher[l].self_attn : teacher[l].cross_attn;
    if (s_maps.size() != t_maps.heads.size()) {
      throw GradError("attention distillation: head counts differ (student " +
                      std::to_string(s_maps.size()) + ", teacher " +
                      std::to_string(t_maps.heads.size()) + ")");
    }
    if (!self && s_maps.at(0).cols() != t_maps.cols) {
      throw GradError("attention distillation: teacher and student must share the token grid (HW " +
                      std::to_string(t_maps.cols) + " vs " + std::to_string(s_maps[0].cols()) + ")");
    }
    const AttentionMaps g = gather_teacher_rows(t_maps, matchings[l].col_of_row, self);
    std::vector<DiffArray> heads;
    for (std::size_t h = 0; h < s_maps.size(); ++h) {
      heads.push_back(mse(s_maps[h], DiffArray::constant(s_maps[h].shape(), g.heads[h])));
    }
    terms.push_back(scale(total_of(heads), 1.0 / static_cast<double>(heads.size())));
  }
  return scale(total_of(terms), lambda);
}

}  // namespace

DiffArray attn_distill_self(std::span<const GroupLayer> student,
                            std::span<const TeacherLayer> teacher,
                            const match::LayerMatchings& matchings, double lambda) {
  return attn_distill(student, teacher, matchings, lambda, true);
}

DiffArray attn_distill_cross(std::span<const GroupLayer> student,
                             std::span<const TeacherLayer> teacher,
                             const match::LayerMatchings& matchings, double lambda) {
  return attn_distill(student, teacher, matchings, lambda, false);
}

TotalLoss total_distill(const GroupLosses& student, std::span<const GroupLosses> aux,
                        const LossConfig& cfg) {
  TotalLoss out;
  std::vector<DiffArray> terms;
  auto take = [&](const DiffArray& t, bool enabled, double& slot) {
    if (!enabled || !t.defined()) return;
    slot += t.item();
    terms.push_back(t);
  };
  take(student.detection, true, out.report.detection);
  take(student.pred, cfg.pred, out.report.l_pred);
  take(student.sa, cfg.self_attn, out.report.l_sa);
  take(student.ca, cfg.cross_attn, out.report.l_ca);
  for (const auto& a : aux) {
    take(a.detection, cfg.aux_detection, out.report.aux_detection);
    take(a.pred, cfg.pred, out.report.aux_l_pred);
    take(a.sa, cfg.self_attn, out.report.aux_l_sa);
    take(a.ca, cfg.cross_attn, out.report.aux_l_ca);
  }
  out.objective = total_of(terms);
  out.report.total = out.objective.item();
  return out;
}

}  // namespace d3etr::loss
