#include <cmath>
#include <cstdio>
#include <fstream>

#include "d3etr/harness.hpp"
#include "d3etr/rng.hpp"

namespace d3etr {

using ad::DiffArray;

// ---- optimizer ----------------------------------------------------------------

void AdamW::step(ad::ParamStore& params, double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (auto& [name, p] : params) {
    if (!p.requires_grad()) continue;
    auto& m = m_[name];
    auto& v = v_[name];
    if (m.size() != p.size()) {
      m.assign(p.size(), 0.0);
      v.assign(p.size(), 0.0);
    }
    const auto g = p.grad();
    auto w = p.mutable_values();
    for (std::size_t i = 0; i < w.size(); ++i) {
      w[i] *= 1.0 - lr * cfg_.weight_decay;
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      w[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps);
    }
  }
}

double learning_rate(const OptimConfig& cfg, std::size_t epoch, std::size_t total_epochs) {
  const auto drop = static_cast<std::size_t>(std::floor(cfg.lr_drop_fraction * static_cast<double>(total_epochs)));
  return epoch >= drop ? cfg.lr * cfg.lr_drop_factor : cfg.lr;
}

namespace {

void clip_gradients(ad::ParamStore& params, double max_norm) {
  if (max_norm <= 0.0) return;
  double sq = 0.0;
  for (const auto& [_, p] : params)
    for (double g : p.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm <= max_norm) return;
  const double s = max_norm / (norm + 1e-6);
  for (auto& [_, p] : params)
    for (double& g : p.mutable_grad()) g *= s;
}

}  // namespace

// ---- teacher ------------------------------------------------------------------

Teacher::Teacher(const nn::Detector& model, std::size_t student_layers)
    : model_(model.frozen()), student_layers_(student_layers) {
  const std::size_t lt = model_.config().n_dec_layers;
  if (student_layers == 0 || student_layers > lt) {
    throw TrainingError("teacher has " + std::to_string(lt) + " decoder layers, student " +
                        std::to_string(student_layers) + "; need 1 <= L_s <= L_t");
  }
  offset_ = lt - student_layers;
  queries_ = model_.query_embed();
}

TeacherScene Teacher::compute(const scene::SceneSample& s) const {
  const auto out = model_.forward(scene_features(model_.config(), s));
  TeacherScene ts;
  for (std::size_t k = 0; k < student_layers_; ++k) ts.layers.push_back(loss::teacher_layer(out, offset_ + k));
  const auto& last = out.layers.back();
  ts.gt_last = match::gt_match(loss::prediction_values(last.probs, last.boxes), s.gts);
  return ts;
}

const TeacherScene& Teacher::scene(const scene::SceneSample& s) {
  const auto key = std::make_pair(s.dataset_seed, s.index);
  auto it = cache_.find(key);
  if (it == cache_.end()) it = cache_.emplace(key, compute(s)).first;
  return it->second;
}

// ---- per-scene objective ------------------------------------------------------

DiffArray scene_features(const nn::ModelConfig& cfg, const scene::SceneSample& s) {
  if (s.grid_h != cfg.grid_h * cfg.patch || s.grid_w != cfg.grid_w * cfg.patch || s.c_in != cfg.c_in) {
    throw TrainingError("scene grid " + std::to_string(s.grid_h) + "x" + std::to_string(s.grid_w) +
                        "x" + std::to_string(s.c_in) + " does not match model token grid " +
                        std::to_string(cfg.grid_h) + "x" + std::to_string(cfg.grid_w) + " with patch " +
                        std::to_string(cfg.patch));
  }
  return nn::patchify(s.grid, s.grid_h, s.grid_w, s.c_in, cfg.patch);
}

namespace {

loss::GroupLosses distill_terms(std::span<const loss::GroupLayer> layers, const TeacherScene& t,
                                const match::LayerMatchings& m, const loss::LossConfig& cfg) {
  loss::GroupLosses g;
  if (cfg.pred) g.pred = loss::pred_distill(layers, t.layers, m, cfg);
  if (cfg.self_attn) g.sa = loss::attn_distill_self(layers, t.layers, m, cfg.lambda_sa);
  if (cfg.cross_attn) g.ca = loss::attn_distill_cross(layers, t.layers, m, cfg.lambda_ca);
  return g;
}

}  // namespace

SceneObjective scene_objective(const nn::Detector& student, const TeacherScene* teacher,
                               const DiffArray* teacher_queries, const scene::SceneSample& s,
                               const loss::LossConfig& cfg) {
  const bool uses_teacher = cfg.adaptive() || cfg.fixed();
  if (uses_teacher && (!teacher || (cfg.fixed() && !teacher_queries))) {
    throw TrainingError("distillation configured but no teacher outputs supplied");
  }
  if (s.gts.size() > student.config().n_queries) {
    throw TrainingError("scene has more ground truths than student queries");
  }
  SceneObjective res;
  res.trace.scene = s.index;

  std::vector<DiffArray> groups{student.query_embed()};
  const std::size_t extra = cfg.extra_adaptive_groups();
  if (extra > 0) groups.push_back(student.params().get("aux_query_embed"));
  for (std::size_t f = 0; f < cfg.fixed_groups; ++f) groups.push_back(*teacher_queries);

  const auto out = student.decode(student.encode(scene_features(student.config(), s)), groups);

  // Student group.
  const auto layers = loss::slice_group(out, out.groups[0]);
  const auto preds = loss::prediction_values(layers);
  res.trace.student_gt = match::gt_match_layers(preds, s.gts);
  loss::GroupLosses student_losses;
  student_losses.detection = loss::detection_loss(layers, s.gts, res.trace.student_gt, cfg);
  if (cfg.adaptive()) {
    std::vector<match::PredictionSet> tp;
    for (const auto& l : teacher->layers) tp.push_back(l.preds);
    res.trace.adaptive = match::adaptive_match(preds, tp, cfg.mu_cls);
    const auto d = distill_terms(layers, *teacher, res.trace.adaptive, cfg);
    student_losses.pred = d.pred;
    student_losses.sa = d.sa;
    student_losses.ca = d.ca;
  }

  std::vector<loss::GroupLosses> aux;
  std::size_t g = 1;
  for (std::size_t e = 0; e < extra; ++e, ++g) {
    const auto al = loss::slice_group(out, out.groups[g]);
    const auto ap = loss::prediction_values(al);
    std::vector<match::PredictionSet> tp;
    for (const auto& l : teacher->layers) tp.push_back(l.preds);
    const auto m = match::adaptive_match(ap, tp, cfg.mu_cls);
    loss::GroupLosses gl = distill_terms(al, *teacher, m, cfg);
    gl.detection = loss::detection_loss(al, s.gts, match::gt_match_layers(ap, s.gts), cfg);
    aux.push_back(std::move(gl));
  }
  if (cfg.fixed_groups > 0) res.trace.teacher_gt_last = teacher->gt_last;
  for (std::size_t f = 0; f < cfg.fixed_groups; ++f, ++g) {
    const auto al = loss::slice_group(out, out.groups[g]);
    auto raw = match::gt_match_layers(loss::prediction_values(al), s.gts);
    auto constrained = match::apply_fixed_constraint(raw, teacher->gt_last, cfg.constraint_mode);
    const auto ident = match::fixed_matchings(al.size(), out.groups[g].size());
    loss::GroupLosses gl = distill_terms(al, *teacher, ident, cfg);
    gl.detection = loss::detection_loss(al, s.gts, constrained, cfg);
    aux.push_back(std::move(gl));
    res.trace.fixed_gt_raw.push_back(std::move(raw));
    res.trace.fixed_gt.push_back(std::move(constrained));
    res.trace.fixed_ts.push_back(ident);
  }

  res.loss = loss::total_distill(student_losses, aux, cfg);
  res.trace.report = res.loss.report;
  return res;
}

// ---- training -----------------------------------------------------------------

DataSource DataSource::from(const scene::DatasetSpec& spec, std::size_t max_train, std::size_t max_val) {
  const auto sp = scene::split(spec);
  DataSource d{spec, sp.train, sp.val};
  if (max_train > 0 && d.train.size() > max_train) d.train.resize(max_train);
  if (max_val > 0 && d.val.size() > max_val) d.val.resize(max_val);
  return d;
}

namespace {

struct LastLayerState {
  match::GtAssignment student_gt;
  std::optional<match::Assignment> adaptive;
  std::vector<match::GtAssignment> fixed_gt;
  std::vector<match::Assignment> fixed_ts;
};

class ChurnTracker {
 public:
  void observe(const StepTrace& t) {
    LastLayerState now;
    now.student_gt = t.student_gt.back();
    if (!t.adaptive.empty()) now.adaptive = t.adaptive.back();
    for (const auto& g : t.fixed_gt) now.fixed_gt.push_back(g.back());
    for (const auto& m : t.fixed_ts) now.fixed_ts.push_back(m.back());
    auto it = prev_.find(t.scene);
    if (it != prev_.end()) {
      const auto& before = it->second;
      if (!now.student_gt.query_of_gt.empty()) {
        add(student_gt_, match::instability_metric(now.student_gt, before.student_gt));
        for (std::size_t i = 0; i < now.fixed_gt.size(); ++i)
          add(fixed_gt_, match::instability_metric(now.fixed_gt[i], before.fixed_gt[i]));
      }
      if (now.adaptive && before.adaptive) add(adaptive_, match::instability_metric(*now.adaptive, *before.adaptive));
      for (std::size_t i = 0; i < now.fixed_ts.size(); ++i)
        add(fixed_ts_, match::instability_metric(now.fixed_ts[i], before.fixed_ts[i]));
    }
    prev_[t.scene] = std::move(now);
  }

  InstabilityRow finish_epoch(std::size_t epoch) {
    InstabilityRow r{epoch, mean(student_gt_), mean(adaptive_), mean(fixed_ts_), mean(fixed_gt_)};
    student_gt_ = adaptive_ = fixed_ts_ = fixed_gt_ = {};
    return r;
  }

 private:
  using Acc = std::pair<double, std::size_t>;
  static void add(Acc& a, double v) {
    a.first += v;
    ++a.second;
  }
  static double mean(const Acc& a) { return a.second ? a.first / static_cast<double>(a.second) : 0.0; }

  std::map<std::size_t, LastLayerState> prev_;
  Acc student_gt_{}, adaptive_{}, fixed_ts_{}, fixed_gt_{};
};

}  // namespace

TrainOutcome run_training(nn::Detector model, Teacher* teacher, const loss::LossConfig& loss_cfg,
                          const OptimConfig& optim, std::size_t epochs, std::uint64_t seed,
                          const DataSource& data, const TrainHooks& hooks) {
  loss_cfg.validate();
  const bool uses_teacher = loss_cfg.adaptive() || loss_cfg.fixed();
  if (uses_teacher && !teacher) throw TrainingError("distillation requires a teacher");
  if (loss_cfg.fixed() && teacher->model().config().d_model != model.config().d_model) {
    throw TrainingError("auxiliary group requires teacher and student d_model to match");
  }
  if (data.spec.max_objects > model.config().n_queries) {
    throw TrainingError("data spec allows more objects than the model has queries");
  }

  AdamW opt(optim);
  ChurnTracker churn;
  TrainOutcome res{std::move(model), {}, {}};
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    const double lr = learning_rate(optim, epoch, epochs);
    loss::LossReport epoch_sum;
    std::size_t epoch_scenes = 0;
    const auto batches =
        scene::batch_iter(data.train, optim.batch_size, SplitMix64::derive(seed, 1000 + epoch));
    for (const auto& batch : batches) {
      res.model.params().zero_grad();
      loss::LossReport batch_sum;
      const double inv_b = 1.0 / static_cast<double>(batch.size());
      for (std::size_t idx : batch) {
        const auto s = scene::generate_scene(data.spec, idx);
        const TeacherScene* ts = uses_teacher ? &teacher->scene(s) : nullptr;
        auto obj = scene_objective(res.model, ts, uses_teacher ? &teacher->queries() : nullptr, s, loss_cfg);
        if (!std::isfinite(obj.loss.report.total)) {
          throw TrainingError("non-finite loss at step " + std::to_string(step) + " (epoch " +
                              std::to_string(epoch) + ", scene " + std::to_string(idx) + ")");
        }
        ad::backward(ad::scale(obj.loss.objective, inv_b));
        batch_sum += obj.loss.report;
        obj.trace.epoch = epoch;
        obj.trace.step = step;
        churn.observe(obj.trace);
        if (hooks.on_scene) hooks.on_scene(obj.trace);
      }
      clip_gradients(res.model.params(), optim.grad_clip);
      opt.step(res.model.params(), lr);
      res.step_losses.push_back(batch_sum.scaled(inv_b));
      epoch_sum += batch_sum;
      epoch_scenes += batch.size();
      ++step;
    }
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.mean_loss = epoch_scenes ? epoch_sum.scaled(1.0 / static_cast<double>(epoch_scenes)) : epoch_sum;
    rec.instability = churn.finish_epoch(epoch + 1);
    if (hooks.evaluate_each_epoch) rec.eval = evaluate_ap(res.model, data.spec, data.val);
    if (hooks.on_epoch) hooks.on_epoch(rec);
    res.epochs.push_back(rec);
  }
  return res;
}

TrainOutcome train_detector(const nn::ModelConfig& model_cfg, const RunConfig& cfg, std::size_t epochs,
                            const DataSource& data, const TrainHooks& hooks) {
  auto model = nn::Detector::init(model_cfg, SplitMix64::derive(cfg.seed, 2));
  return run_training(std::move(model), nullptr, loss::detection_only(), cfg.optim, epochs, cfg.seed,
                      data, hooks);
}

TrainOutcome train_teacher(const RunConfig& cfg, const DataSource& data, const TrainHooks& hooks) {
  return train_detector(cfg.teacher, cfg, cfg.teacher_epochs, data, hooks);
}

void inherit_init(nn::Detector& student, const nn::Detector& teacher) {
  const auto& sc = student.config();
  const auto& tc = teacher.config();
  if (sc.d_model != tc.d_model) {
    throw TrainingError("inherit: d_model differs (student " + std::to_string(sc.d_model) +
                        ", teacher " + std::to_string(tc.d_model) + "); no projection is applied");
  }
  for (auto& [name, p] : student.params()) {
    if (name == "aux_query_embed") continue;
    if (!teacher.params().contains(name)) {
      throw TrainingError("inherit: teacher has no parameter '" + name + "'");
    }
    const auto& t = teacher.params().get(name);
    auto dst = p.mutable_values();
    if (name == "query_embed") {
      if (p.cols() != t.cols() || p.rows() > t.rows()) {
        throw TrainingError("inherit: query embeddings " + ad::shape_str(p.shape()) +
                            " cannot take a prefix of " + ad::shape_str(t.shape()));
      }
      std::copy_n(t.values().begin(), dst.size(), dst.begin());
      continue;
    }
    if (t.shape() != p.shape()) {
      throw TrainingError("inherit: shape mismatch for '" + name + "': student " +
                          ad::shape_str(p.shape()) + ", teacher " + ad::shape_str(t.shape()));
    }
    std::copy(t.values().begin(), t.values().end(), dst.begin());
  }
}

nn::Detector make_student(const RunConfig& cfg, const nn::Detector* teacher) {
  auto student = nn::Detector::init(cfg.student, SplitMix64::derive(cfg.seed, 2));
  if (cfg.loss.extra_adaptive_groups() > 0) {
    SplitMix64 rng(SplitMix64::derive(cfg.seed, 3));
    std::vector<double> q(cfg.student.n_queries * cfg.student.d_model);
    for (double& x : q) x = rng.normal();
    student.params().add("aux_query_embed",
                         ad::DiffArray::parameter({cfg.student.n_queries, cfg.student.d_model}, std::move(q)));
  }
  if (cfg.inherit) {
    if (!teacher) throw TrainingError("inheriting requires a teacher");
    inherit_init(student, *teacher);
  }
  return student;
}

TrainOutcome distill_student(const RunConfig& cfg, const nn::Detector& teacher, const DataSource& data,
                             const TrainHooks& hooks) {
  cfg.validate();
  if (cfg.loss.fixed() && teacher.config().n_queries != teacher.query_embed().rows()) {
    throw TrainingError("teacher query count differs from its configuration");
  }
  if (cfg.loss.fixed() && teacher.config().d_model != cfg.student.d_model) {
    throw TrainingError("auxiliary group requires teacher and student d_model to match");
  }
  auto student = make_student(cfg, &teacher);
  const bool uses_teacher = cfg.loss.adaptive() || cfg.loss.fixed();
  std::optional<Teacher> t;
  if (uses_teacher) t.emplace(teacher, cfg.student.n_dec_layers);
  return run_training(std::move(student), t ? &*t : nullptr, cfg.loss, cfg.optim, cfg.student_epochs,
                      cfg.seed, data, hooks);
}

// ---- evaluation -----------------------------------------------------------------

std::vector<eval::Detection> detect(const nn::Detector& model, const scene::SceneSample& s,
                                    std::size_t image_id) {
  const auto out = model.forward(scene_features(model.config(), s));
  const auto& last = out.layers.back();
  const std::size_t n = last.probs.rows(), k = last.probs.cols();
  std::vector<eval::Detection> dets;
  dets.reserve(n * k);
  for (std::size_t q = 0; q < n; ++q) {
    const auto b = box::box_from_row(last.boxes.values().subspan(q * 4, 4));
    for (std::size_t c = 0; c < k; ++c) dets.push_back({image_id, c, last.probs.at(q, c), b});
  }
  return dets;
}

eval::EvalResult evaluate_ap(const nn::Detector& model, const scene::DatasetSpec& spec,
                             std::span<const std::size_t> indices) {
  const nn::Detector frozen = model.frozen();
  std::vector<eval::Detection> dets;
  std::vector<std::vector<match::GroundTruth>> gts;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto s = scene::generate_scene(spec, indices[i]);
    auto d = detect(frozen, s, i);
    dets.insert(dets.end(), d.begin(), d.end());
    gts.push_back(s.gts);
  }
  return eval::evaluate_detections(dets, gts, model.config().n_classes);
}

// ---- outputs --------------------------------------------------------------------

void write_checkpoint(const nn::Detector& model, const std::filesystem::path& path) {
  model.params().save(path);
  save_model_config(model.config(), path);
}

nn::Detector read_checkpoint(const std::filesystem::path& path) {
  auto cfg = load_model_config(path);
  return nn::Detector(cfg, ad::ParamStore::load(path));
}

namespace {

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  return os;
}

}  // namespace

void write_metrics_csv(const std::vector<EpochRecord>& epochs, const std::filesystem::path& path) {
  auto os = open_out(path);
  os << eval::eval_csv_header() << '\n';
  for (const auto& e : epochs) os << eval::eval_csv_row(e.epoch, e.eval) << '\n';
}

void write_losses_csv(const std::vector<loss::LossReport>& steps, const std::filesystem::path& path) {
  auto os = open_out(path);
  os << loss::loss_csv_header() << '\n';
  for (std::size_t i = 0; i < steps.size(); ++i) os << loss::loss_csv_row(i, steps[i]) << '\n';
}

void write_instability_csv(const std::vector<EpochRecord>& epochs, const std::filesystem::path& path) {
  auto os = open_out(path);
  os << "epoch,student_gt_churn,adaptive_ts_churn,fixed_ts_churn,fixed_gt_churn\n";
  char buf[256];
  for (const auto& e : epochs) {
    const auto& r = e.instability;
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g\n", r.epoch, r.student_gt_churn,
                  r.adaptive_ts_churn, r.fixed_ts_churn, r.fixed_gt_churn);
    os << buf;
  }
}

void write_outcome(const TrainOutcome& o, const std::filesystem::path& dir, const std::string& name) {
  write_checkpoint(o.model, dir / (name + ".ckpt"));
  write_metrics_csv(o.epochs, dir / "metrics.csv");
  write_losses_csv(o.step_losses, dir / "losses.csv");
  write_instability_csv(o.epochs, dir / "instability.csv");
}

}  // namespace d3etr
