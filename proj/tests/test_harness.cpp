#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "d3etr/harness.hpp"
#include "d3etr/rng.hpp"
#include "doctest.h"

using namespace d3etr;

namespace {

nn::ModelConfig tiny_model(std::size_t layers, std::size_t queries) {
  nn::ModelConfig m;
  m.d_model = 8;
  m.n_heads = 2;
  m.n_enc_layers = 1;
  m.n_dec_layers = layers;
  m.n_queries = queries;
  m.n_classes = 2;
  m.grid_h = 4;
  m.grid_w = 4;
  m.patch = 1;
  m.c_in = 3;
  m.ffn_dim = 16;
  return m;
}

RunConfig tiny_run() {
  RunConfig c;
  c.teacher = tiny_model(2, 4);
  c.student = tiny_model(1, 3);
  c.student_epochs = 2;
  c.teacher_epochs = 2;
  c.optim.batch_size = 4;
  c.seed = 3;
  return c;
}

scene::DatasetSpec tiny_data() {
  scene::DatasetSpec s;
  s.seed = 11;
  s.n_scenes = 40;
  s.grid_h = 4;
  s.grid_w = 4;
  s.n_classes = 2;
  s.max_objects = 2;
  s.min_size = 1;
  s.max_size = 2;
  s.min_gap = 0;
  return s;
}

DataSource tiny_source() { return DataSource::from(tiny_data(), 16, 4); }

bool same_params(const ad::ParamStore& a, const ad::ParamStore& b) {
  if (a.size() != b.size()) return false;
  auto ib = b.begin();
  for (const auto& [name, v] : a) {
    if (name != ib->first || v.shape() != ib->second.shape()) return false;
    const auto x = v.values(), y = ib->second.values();
    if (!std::equal(x.begin(), x.end(), y.begin())) return false;
    ++ib;
  }
  return true;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

double max_abs_diff(const ad::DiffArray& a, const ad::DiffArray& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.values()[i] - b.values()[i]));
  return m;
}

nn::Detector trained_teacher() {
  static const nn::Detector t = train_teacher(tiny_run(), tiny_source()).model;
  return t;
}

}  // namespace

TEST_CASE("learning rate schedule") {
  OptimConfig o;
  CHECK(learning_rate(o, 0, 10) == 1e-3);
  CHECK(learning_rate(o, 7, 10) == 1e-3);
  CHECK(learning_rate(o, 8, 10) == doctest::Approx(1e-4).epsilon(1e-15));
  CHECK(learning_rate(o, 11, 15) == 1e-3);
  CHECK(learning_rate(o, 12, 15) == doctest::Approx(1e-4).epsilon(1e-15));
}

TEST_CASE("adamw first step") {
  ad::ParamStore ps;
  ps.add("w", ad::DiffArray::parameter({2}, {1.0, -2.0}));
  ps.get("w").mutable_grad()[0] = 0.5;
  ps.get("w").mutable_grad()[1] = -3.0;
  OptimConfig o;
  AdamW opt(o);
  opt.step(ps, 0.1);
  // Bias-corrected moments give g / (|g| + eps) on the first step.
  const double w0 = 1.0 * (1 - 0.1 * 1e-4) - 0.1 * 0.5 / (0.5 + 1e-8);
  const double w1 = -2.0 * (1 - 0.1 * 1e-4) + 0.1 * 3.0 / (3.0 + 1e-8);
  CHECK(ps.get("w").values()[0] == doctest::Approx(w0).epsilon(1e-14));
  CHECK(ps.get("w").values()[1] == doctest::Approx(w1).epsilon(1e-14));
  CHECK(opt.steps() == 1);
}

TEST_CASE("inheriting initialization") {
  const auto teacher = nn::Detector::init(tiny_model(2, 4), 5);
  SUBCASE("equal architectures give an identical forward pass") {
    auto student = nn::Detector::init(tiny_model(2, 4), 6);
    inherit_init(student, teacher);
    const auto s = scene::generate_scene(tiny_data(), 0);
    const auto a = student.frozen().forward(scene_features(student.config(), s));
    const auto b = teacher.frozen().forward(scene_features(teacher.config(), s));
    for (std::size_t l = 0; l < 2; ++l) {
      CHECK(max_abs_diff(a.layers[l].logits, b.layers[l].logits) == 0.0);
      CHECK(max_abs_diff(a.layers[l].boxes, b.layers[l].boxes) == 0.0);
    }
  }
  SUBCASE("shallower student takes the prefix") {
    auto student = nn::Detector::init(tiny_model(1, 3), 6);
    inherit_init(student, teacher);
    for (const auto& [name, v] : student.params()) {
      const auto& t = teacher.params().get(name);
      if (name == "query_embed") {
        CHECK(std::equal(v.values().begin(), v.values().end(), t.values().begin()));
      } else {
        CHECK(v.shape() == t.shape());
        CHECK(std::equal(v.values().begin(), v.values().end(), t.values().begin()));
      }
    }
  }
  SUBCASE("mismatched width is an error") {
    auto m = tiny_model(1, 3);
    m.d_model = 12;
    auto student = nn::Detector::init(m, 6);
    CHECK_THROWS(inherit_init(student, teacher));
  }
  SUBCASE("more student queries than teacher queries is an error") {
    auto student = nn::Detector::init(tiny_model(1, 5), 6);
    CHECK_THROWS(inherit_init(student, teacher));
  }
}

TEST_CASE("zero epochs leave the initialization untouched") {
  auto cfg = tiny_run();
  const auto o = train_detector(cfg.student, cfg, 0, tiny_source());
  CHECK(o.epochs.empty());
  CHECK(same_params(o.model.params(), nn::Detector::init(cfg.student, SplitMix64::derive(cfg.seed, 2)).params()));
}

TEST_CASE("checkpoint round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "d3etr_test_ckpt";
  const auto m = nn::Detector::init(tiny_model(2, 4), 9);
  write_checkpoint(m, dir / "m.ckpt");
  const auto r = read_checkpoint(dir / "m.ckpt");
  CHECK(r.config() == m.config());
  CHECK(same_params(r.params(), m.params()));
  CHECK(r.params().checksum() == m.params().checksum());
  std::filesystem::remove_all(dir);
}

TEST_CASE("training is deterministic") {
  auto cfg = tiny_run();
  const auto teacher = trained_teacher();
  const auto a = distill_student(cfg, teacher, tiny_source());
  const auto b = distill_student(cfg, teacher, tiny_source());
  CHECK(same_params(a.model.params(), b.model.params()));
  REQUIRE(a.epochs.size() == 2);
  for (std::size_t e = 0; e < 2; ++e) {
    CHECK(eval::eval_csv_row(e, a.epochs[e].eval) == eval::eval_csv_row(e, b.epochs[e].eval));
    CHECK(a.epochs[e].mean_loss.total == b.epochs[e].mean_loss.total);
  }
  const auto dir = std::filesystem::temp_directory_path() / "d3etr_test_det";
  write_outcome(a, dir / "a", "student");
  write_outcome(b, dir / "b", "student");
  for (const char* f : {"metrics.csv", "losses.csv", "instability.csv"}) CHECK(slurp(dir / "a" / f) == slurp(dir / "b" / f));
  CHECK(slurp(dir / "a" / "metrics.csv").rfind("epoch,ap50", 0) == 0);
  std::filesystem::remove_all(dir);
}

TEST_CASE("distillation switched off reduces to plain training") {
  auto cfg = tiny_run();
  cfg.loss = loss::detection_only();
  cfg.inherit = false;
  const auto teacher = trained_teacher();
  const auto a = distill_student(cfg, teacher, tiny_source());
  const auto b = train_detector(cfg.student, cfg, cfg.student_epochs, tiny_source());
  CHECK(same_params(a.model.params(), b.model.params()));
}

TEST_CASE("teacher is never updated") {
  auto cfg = tiny_run();
  const auto teacher = trained_teacher();
  const auto before = teacher.params().checksum();
  const auto grads = ad::collect_grads(teacher.params());
  distill_student(cfg, teacher, tiny_source());
  CHECK(teacher.params().checksum() == before);
  CHECK(ad::collect_grads(teacher.params()) == grads);
}

TEST_CASE("self distillation of an exact copy") {
  auto cfg = tiny_run();
  cfg.student = cfg.teacher;
  const auto teacher_model = trained_teacher();
  Teacher teacher(teacher_model, cfg.student.n_dec_layers);
  auto student = make_student(cfg, &teacher_model);
  const auto data = tiny_data();
  for (std::size_t i = 0; i < 10; ++i) {
    const auto s = scene::generate_scene(data, i);
    const auto& ts = teacher.scene(s);
    const auto obj = scene_objective(student, &ts, &teacher.queries(), s, cfg.loss);
    const auto& r = obj.trace.report;
    CHECK(r.l_sa < 1e-10);
    CHECK(r.l_ca < 1e-10);
    CHECK(r.aux_l_sa < 1e-10);
    CHECK(r.aux_l_ca < 1e-10);
    CHECK(std::abs(r.l_pred - loss::entropy_floor(ts.layers, obj.trace.adaptive, cfg.loss.mu_cls)) < 1e-10);
    CHECK(std::abs(r.aux_l_pred - loss::entropy_floor(ts.layers, obj.trace.fixed_ts[0], cfg.loss.mu_cls)) < 1e-10);
    for (const auto& m : obj.trace.adaptive) CHECK(m.col_of_row == std::vector<std::size_t>{0, 1, 2, 3});
  }
}

TEST_CASE("fixed group follows the teacher assignment on the last layer") {
  auto cfg = tiny_run();
  cfg.loss.adaptive_groups = 0;
  cfg.loss.fixed_groups = 2;
  const auto teacher = trained_teacher();
  std::size_t seen = 0;
  TrainHooks hooks;
  hooks.evaluate_each_epoch = false;
  hooks.on_scene = [&](const StepTrace& t) {
    REQUIRE(t.teacher_gt_last.has_value());
    REQUIRE(t.fixed_gt.size() == 2);
    for (const auto& g : t.fixed_gt) CHECK(g.back() == *t.teacher_gt_last);
    for (const auto& m : t.fixed_ts)
      for (const auto& l : m) CHECK(l.col_of_row == std::vector<std::size_t>{0, 1, 2, 3});
    ++seen;
  };
  const auto o = distill_student(cfg, teacher, tiny_source(), hooks);
  CHECK(seen == 2 * 16);
  for (const auto& e : o.epochs) CHECK(e.instability.fixed_ts_churn == 0.0);
}

TEST_CASE("objective does not depend on ground truth order") {
  auto cfg = tiny_run();
  const auto teacher_model = trained_teacher();
  Teacher teacher(teacher_model, cfg.student.n_dec_layers);
  const auto student = make_student(cfg, &teacher_model);
  const auto data = tiny_data();
  std::size_t checked = 0;
  for (std::size_t i = 0; i < 20 && checked < 5; ++i) {
    auto s = scene::generate_scene(data, i);
    if (s.gts.size() < 2) continue;
    const auto& ts = teacher.scene(s);
    const double a = scene_objective(student, &ts, &teacher.queries(), s, cfg.loss).trace.report.total;
    std::reverse(s.gts.begin(), s.gts.end());
    const auto ts2 = teacher.compute(s);
    const double b = scene_objective(student, &ts2, &teacher.queries(), s, cfg.loss).trace.report.total;
    CHECK(a == doctest::Approx(b).epsilon(1e-12));
    ++checked;
  }
  CHECK(checked > 0);
}

TEST_CASE("ablation grids") {
  const loss::LossConfig base;
  const auto m = matching_grid(base);
  REQUIRE(m.size() == 6);
  CHECK(m[0].loss.adaptive_groups == 0);
  CHECK(m[5].loss.adaptive_groups == 1);
  CHECK(m[5].loss.fixed_groups == 1);
  CHECK(term_grid(base).size() == 6);
  CHECK(constraint_grid(base).size() == 3);
  CHECK(depth_grid(4).size() == 4);

  auto cfg = tiny_run();
  cfg.student_epochs = 1;
  const auto teacher = trained_teacher();
  const auto dir = std::filesystem::temp_directory_path() / "d3etr_test_ablation";
  write_ablation_csv(run_ablation(cfg, &teacher, {}, tiny_source()), dir / "empty.csv");
  CHECK(slurp(dir / "empty.csv") == ablation_csv_header() + "\n");
  const std::vector<AblationEntry> two{m[0], m[1]};
  const auto rows = run_ablation(cfg, &teacher, two, tiny_source());
  CHECK(rows.size() == 2);
  write_ablation_csv(rows, dir / "two.csv");
  const auto text = slurp(dir / "two.csv");
  CHECK(std::count(text.begin(), text.end(), '\n') == 3);
  CHECK_THROWS(run_ablation(cfg, nullptr, two, tiny_source()));
  std::filesystem::remove_all(dir);
}

TEST_CASE("gradient check on the detection objective alone") {
  auto cfg = gradcheck_config();
  cfg.loss = loss::detection_only();
  const auto r = gradcheck(cfg, gradcheck_data_spec(), 1);
  CHECK(r.passed);
  CHECK(r.max_rel_err < 1e-4);
  CHECK_FALSE(r.per_group.empty());
}

TEST_CASE("gradient check with a one-layer two-query student") {
  auto cfg = gradcheck_config();
  cfg.student.n_dec_layers = 1;
  cfg.student.n_queries = 2;
  const auto r = gradcheck(cfg, gradcheck_data_spec(), 1);
  CHECK(r.passed);
  CHECK(r.max_rel_err < 1e-4);
}

TEST_CASE("attention dumps") {
  auto m = tiny_model(2, 3);
  m.d_model = 16;
  m.n_heads = 4;
  const auto model = nn::Detector::init(m, 1);
  const auto dir = std::filesystem::temp_directory_path() / "d3etr_test_dump";
  const auto files = dump_attention(model, scene::generate_scene(tiny_data(), 2), dir);
  CHECK(files.size() == 16);
  for (const auto& f : files) {
    std::ifstream is(f);
    std::string line;
    std::size_t rows = 0;
    while (std::getline(is, line)) {
      std::stringstream ss(line);
      std::string cell;
      double sum = 0.0;
      while (std::getline(ss, cell, ',')) sum += std::stod(cell);
      CHECK(std::abs(sum - 1.0) < 1e-6);
      ++rows;
    }
    CHECK(rows == 3);
  }
  std::filesystem::remove_all(dir);
}
