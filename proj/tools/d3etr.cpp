#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "d3etr/alloc.hpp"
#include "d3etr/harness.hpp"

using namespace d3etr;

namespace {

struct Common {
  std::string config, out, data_spec, teacher;
  std::optional<std::uint64_t> seed;
  std::optional<bool> inherit;
  std::optional<std::size_t> epochs, max_train, max_val;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "run configuration JSON");
  app->add_option("--seed", c.seed, "run seed");
  app->add_option("--out", c.out, "output directory");
  app->add_option("--data-spec", c.data_spec, "dataset spec JSON");
  app->add_option("--teacher", c.teacher, "teacher checkpoint");
  app->add_flag("--inherit,!--no-inherit", c.inherit, "initialize the student from the teacher");
  app->add_option("--epochs", c.epochs, "override the epoch count of this command");
  app->add_option("--max-train", c.max_train, "use at most this many training scenes");
  app->add_option("--max-val", c.max_val, "use at most this many validation scenes");
}

RunConfig resolve(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig{} : load_run_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  if (!c.out.empty()) cfg.out_dir = c.out;
  if (!c.data_spec.empty()) cfg.data_spec = c.data_spec;
  if (!c.teacher.empty()) cfg.teacher_ckpt = c.teacher;
  if (c.inherit) cfg.inherit = *c.inherit;
  if (c.max_train) cfg.max_train_scenes = *c.max_train;
  if (c.max_val) cfg.max_val_scenes = *c.max_val;
  return cfg;
}

scene::DatasetSpec dataset(const RunConfig& cfg) {
  return cfg.data_spec.empty() ? scene::DatasetSpec{} : scene::load_spec(cfg.data_spec);
}

DataSource data_source(const RunConfig& cfg) {
  return DataSource::from(dataset(cfg), cfg.max_train_scenes, cfg.max_val_scenes);
}

nn::Detector load_teacher(const RunConfig& cfg) {
  if (cfg.teacher_ckpt.empty()) throw std::runtime_error("--teacher <ckpt> is required");
  return read_checkpoint(cfg.teacher_ckpt);
}

TrainHooks progress_hooks() {
  TrainHooks h;
  h.on_epoch = [](const EpochRecord& e) {
    std::fprintf(stderr, "epoch %zu  loss %.4f  ap50 %.4f  map %.4f\n", e.epoch, e.mean_loss.total,
                 e.eval.ap50, e.eval.map);
  };
  return h;
}

void print_eval(const eval::EvalResult& r) {
  std::printf("ap50 %.4f  ap75 %.4f  map %.4f  small %.4f  medium %.4f  large %.4f\n", r.ap50, r.ap75,
              r.map, r.ap_small, r.ap_medium, r.ap_large);
}

int gen_data(const RunConfig& cfg) {
  const auto spec = dataset(cfg);
  const auto sp = scene::split(spec);
  const std::filesystem::path dir = cfg.out_dir;
  scene::save_spec(spec, dir / "data_spec.json");
  std::ofstream os(dir / "scenes.csv");
  os << "index,split,cls,cx,cy,w,h\n";
  auto dump = [&](const std::vector<std::size_t>& idx, const char* name) {
    for (std::size_t i : idx) {
      for (const auto& g : scene::generate_scene(spec, i).gts) {
        char buf[200];
        std::snprintf(buf, sizeof buf, "%zu,%s,%zu,%.17g,%.17g,%.17g,%.17g\n", i, name, g.cls, g.box.cx,
                      g.box.cy, g.box.w, g.box.h);
        os << buf;
      }
    }
  };
  dump(sp.train, "train");
  dump(sp.val, "val");
  std::printf("%zu train, %zu val scenes -> %s\n", sp.train.size(), sp.val.size(), dir.c_str());
  return 0;
}

int train_teacher_cmd(RunConfig cfg, const Common& c) {
  if (c.epochs) cfg.teacher_epochs = *c.epochs;
  cfg.validate();
  const auto o = train_teacher(cfg, data_source(cfg), progress_hooks());
  write_outcome(o, cfg.out_dir, "teacher");
  save_run_config(cfg, std::filesystem::path(cfg.out_dir) / "config.json");
  if (!o.epochs.empty()) print_eval(o.epochs.back().eval);
  return 0;
}

int train_student_cmd(RunConfig cfg, const Common& c) {
  if (c.epochs) cfg.student_epochs = *c.epochs;
  cfg.student.validate();
  const auto o = train_detector(cfg.student, cfg, cfg.student_epochs, data_source(cfg), progress_hooks());
  write_outcome(o, cfg.out_dir, "student");
  save_run_config(cfg, std::filesystem::path(cfg.out_dir) / "config.json");
  if (!o.epochs.empty()) print_eval(o.epochs.back().eval);
  return 0;
}

int distill_cmd(RunConfig cfg, const Common& c) {
  if (c.epochs) cfg.student_epochs = *c.epochs;
  const auto teacher = load_teacher(cfg);
  cfg.teacher = teacher.config();
  cfg.validate();
  const auto before = teacher.params().checksum();
  const auto o = distill_student(cfg, teacher, data_source(cfg), progress_hooks());
  if (teacher.params().checksum() != before) throw std::logic_error("teacher parameters changed");
  write_outcome(o, cfg.out_dir, "student");
  save_run_config(cfg, std::filesystem::path(cfg.out_dir) / "config.json");
  if (!o.epochs.empty()) print_eval(o.epochs.back().eval);
  return 0;
}

int eval_cmd(const RunConfig& cfg, const std::string& ckpt) {
  const auto model = read_checkpoint(ckpt);
  const auto data = data_source(cfg);
  EpochRecord rec;
  rec.eval = evaluate_ap(model, data.spec, data.val);
  write_metrics_csv({rec}, std::filesystem::path(cfg.out_dir) / "metrics.csv");
  print_eval(rec.eval);
  return 0;
}

int ablate_cmd(RunConfig cfg, const Common& c, const std::vector<std::string>& grids, std::size_t depth) {
  if (c.epochs) cfg.student_epochs = *c.epochs;
  std::optional<nn::Detector> teacher;
  std::vector<AblationEntry> grid;
  for (const auto& g : grids) {
    std::vector<AblationEntry> part;
    if (g == "matching") part = matching_grid(cfg.loss);
    else if (g == "terms") part = term_grid(cfg.loss);
    else if (g == "constraint") part = constraint_grid(cfg.loss);
    else if (g == "depth") part = depth_grid(depth);
    else throw std::invalid_argument("unknown grid '" + g + "'");
    grid.insert(grid.end(), part.begin(), part.end());
  }
  const bool needs_teacher = std::any_of(grid.begin(), grid.end(), [](const AblationEntry& e) {
    return e.kind == AblationEntry::Kind::kDistill;
  });
  if (needs_teacher) {
    teacher = load_teacher(cfg);
    cfg.teacher = teacher->config();
  }
  const auto data = data_source(cfg);
  std::vector<AblationRow> rows;
  for (const auto& e : grid) {
    auto r = run_ablation(cfg, teacher ? &*teacher : nullptr, {e}, data);
    std::fprintf(stderr, "%s  ap50 %.4f  map %.4f\n", e.name.c_str(), r[0].result.ap50, r[0].result.map);
    rows.push_back(r[0]);
  }
  write_ablation_csv(rows, std::filesystem::path(cfg.out_dir) / "ablation.csv");
  return 0;
}

int gradcheck_cmd(const Common& c, std::size_t trials, double tol, bool distill_off) {
  auto cfg = gradcheck_config();
  if (c.seed) cfg.seed = *c.seed;
  if (distill_off) cfg.loss = loss::detection_only();
  const auto t0 = std::chrono::steady_clock::now();
  const auto rep = gradcheck(cfg, gradcheck_data_spec(), trials, tol);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  for (const auto& [g, e] : rep.per_group) std::printf("%-24s %.3e\n", g.c_str(), e);
  std::printf("max rel err %.3e (%s), %zu refined, %zu kinks, %.1f s: %s\n", rep.max_rel_err,
              rep.worst_param.c_str(), rep.refined, rep.kinks, secs, rep.passed ? "PASS" : "FAIL");
  for (const auto& f : rep.failures) std::printf("  %s\n", f.c_str());
  return rep.passed ? 0 : 1;
}

int dump_attn_cmd(const RunConfig& cfg, const std::string& ckpt, std::size_t scene_idx) {
  const auto spec = dataset(cfg);
  const auto s = scene::generate_scene(spec, scene_idx);
  const std::filesystem::path dir = cfg.out_dir;
  std::size_t n = 0;
  if (!ckpt.empty()) n += dump_attention(read_checkpoint(ckpt), s, dir / "student").size();
  if (!cfg.teacher_ckpt.empty()) n += dump_attention(read_checkpoint(cfg.teacher_ckpt), s, dir / "teacher").size();
  if (n == 0) throw std::runtime_error("dump-attn needs --checkpoint and/or --teacher");
  std::printf("%zu files -> %s\n", n, dir.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  d3etr::retain_heap();
  CLI::App app{"Decoder distillation for a small DETR-style detector"};
  app.require_subcommand(1);

  Common common;
  std::string ckpt;
  std::vector<std::string> grids{"matching"};
  std::size_t depth = 4, trials = 3, scene_idx = 0;
  double tol = 1e-4;
  bool distill_off = false;

  auto* gen = app.add_subcommand("gen-data", "write the dataset spec and ground-truth table");
  auto* tt = app.add_subcommand("train-teacher", "train the teacher detector");
  auto* ts = app.add_subcommand("train-student", "train the student architecture without a teacher");
  auto* ds = app.add_subcommand("distill", "distill a student from a teacher checkpoint");
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on the validation split");
  auto* ab = app.add_subcommand("ablate", "run ablation grids");
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of the training objective");
  auto* da = app.add_subcommand("dump-attn", "write attention maps of one scene as CSV");
  for (auto* s : {gen, tt, ts, ds, ev, ab, gc, da}) add_common(s, common);
  ev->add_option("--checkpoint", ckpt, "checkpoint to evaluate")->required();
  da->add_option("--checkpoint", ckpt, "student checkpoint");
  da->add_option("--scene", scene_idx, "scene index");
  ab->add_option("--grid", grids, "matching, terms, constraint, depth");
  ab->add_option("--max-depth", depth, "largest decoder depth of the depth grid");
  gc->add_option("--trials", trials, "random models to check");
  gc->add_option("--tol", tol, "relative error tolerance");
  gc->add_flag("--detection-only", distill_off, "check the detection loss alone");

  CLI11_PARSE(app, argc, argv);
  try {
    const RunConfig cfg = resolve(common);
    if (*gen) return gen_data(cfg);
    if (*tt) return train_teacher_cmd(cfg, common);
    if (*ts) return train_student_cmd(cfg, common);
    if (*ds) return distill_cmd(cfg, common);
    if (*ev) return eval_cmd(cfg, ckpt);
    if (*ab) return ablate_cmd(cfg, common, grids, depth);
    if (*gc) return gradcheck_cmd(common, trials, tol, distill_off);
    if (*da) return dump_attn_cmd(cfg, ckpt, scene_idx);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
