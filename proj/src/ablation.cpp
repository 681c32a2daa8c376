#include <cstdio>
#include <fstream>

#include "d3etr/harness.hpp"

namespace d3etr {

namespace {

AblationEntry distill_entry(std::string name, loss::LossConfig l) {
  AblationEntry e;
  e.name = std::move(name);
  e.loss = l;
  return e;
}

loss::LossConfig with_groups(loss::LossConfig l, std::size_t adaptive, std::size_t fixed) {
  l.adaptive_groups = adaptive;
  l.fixed_groups = fixed;
  return l;
}

loss::LossConfig with_terms(loss::LossConfig l, bool pred, bool sa, bool ca) {
  l.pred = pred;
  l.self_attn = sa;
  l.cross_attn = ca;
  return l;
}

}  // namespace

std::vector<AblationEntry> matching_grid(const loss::LossConfig& base) {
  return {
      distill_entry("none", with_groups(base, 0, 0)),
      distill_entry("adaptive", with_groups(base, 1, 0)),
      distill_entry("fixed", with_groups(base, 0, 1)),
      distill_entry("adaptive_x2", with_groups(base, 2, 0)),
      distill_entry("fixed_x2", with_groups(base, 0, 2)),
      distill_entry("adaptive_fixed", with_groups(base, 1, 1)),
  };
}

std::vector<AblationEntry> term_grid(const loss::LossConfig& base) {
  const auto b = with_groups(base, 1, 0);
  return {
      distill_entry("pred", with_terms(b, true, false, false)),
      distill_entry("self_attn", with_terms(b, false, true, false)),
      distill_entry("cross_attn", with_terms(b, false, false, true)),
      distill_entry("pred_self_attn", with_terms(b, true, true, false)),
      distill_entry("pred_cross_attn", with_terms(b, true, false, true)),
      distill_entry("all_terms", with_terms(b, true, true, true)),
  };
}

std::vector<AblationEntry> constraint_grid(const loss::LossConfig& base) {
  std::vector<AblationEntry> g;
  for (auto mode : {match::ConstraintMode::kOff, match::ConstraintMode::kAllLayers,
                    match::ConstraintMode::kLastLayer}) {
    auto l = with_groups(base, 1, 1);
    l.constraint_mode = mode;
    g.push_back(distill_entry("constraint_" + match::to_string(mode), l));
  }
  return g;
}

std::vector<AblationEntry> depth_grid(std::size_t max_layers) {
  std::vector<AblationEntry> g;
  for (std::size_t l = 1; l <= max_layers; ++l) {
    AblationEntry e;
    e.name = "depth_" + std::to_string(l);
    e.kind = AblationEntry::Kind::kDetector;
    e.loss = loss::detection_only();
    e.inherit = false;
    e.n_dec_layers = l;
    g.push_back(e);
  }
  return g;
}

std::vector<AblationRow> run_ablation(const RunConfig& cfg, const nn::Detector* teacher,
                                      const std::vector<AblationEntry>& grid, const DataSource& data) {
  std::vector<AblationRow> rows;
  TrainHooks hooks;
  hooks.evaluate_each_epoch = false;
  for (const auto& e : grid) {
    if (e.kind == AblationEntry::Kind::kDetector) {
      auto mc = cfg.teacher;
      mc.n_dec_layers = e.n_dec_layers;
      const auto o = train_detector(mc, cfg, cfg.teacher_epochs, data, hooks);
      rows.push_back({e, evaluate_ap(o.model, data.spec, data.val)});
      continue;
    }
    RunConfig c = cfg;
    c.loss = e.loss;
    c.inherit = e.inherit;
    if (!teacher) throw TrainingError("ablation entry '" + e.name + "' needs a teacher checkpoint");
    const auto o = distill_student(c, *teacher, data, hooks);
    rows.push_back({e, evaluate_ap(o.model, data.spec, data.val)});
  }
  return rows;
}

std::string ablation_csv_header() {
  return "name,kind,adaptive_groups,fixed_groups,pred,self_attn,cross_attn,constraint_mode,inherit,"
         "n_dec_layers,ap50,ap75,map,ap_small,ap_medium,ap_large";
}

std::string ablation_csv_row(const AblationRow& r) {
  const auto& e = r.entry;
  const bool det = e.kind == AblationEntry::Kind::kDetector;
  char buf[512];
  std::snprintf(buf, sizeof buf, "%s,%s,%zu,%zu,%d,%d,%d,%s,%d,%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g",
                e.name.c_str(), det ? "detector" : "distill", e.loss.adaptive_groups, e.loss.fixed_groups,
                e.loss.pred, e.loss.self_attn, e.loss.cross_attn,
                match::to_string(e.loss.constraint_mode).c_str(), e.inherit, e.n_dec_layers, r.result.ap50,
                r.result.ap75, r.result.map, r.result.ap_small, r.result.ap_medium, r.result.ap_large);
  return buf;
}

void write_ablation_csv(const std::vector<AblationRow>& rows, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << ablation_csv_header() << '\n';
  for (const auto& r : rows) os << ablation_csv_row(r) << '\n';
}

}  // namespace d3etr
