// Acceptance suite: one PASS/FAIL line per criterion.
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "d3etr/alloc.hpp"
#include "d3etr/harness.hpp"
#include "d3etr/rng.hpp"
#include "oracles.hpp"

using namespace d3etr;
namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kSeeds[] = {0, 1, 2};

struct Result {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, ...) {
  char buf[1024];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

void info(const std::string& s) {
  std::printf("  %s\n", s.c_str());
  std::fflush(stdout);
}

double cpu_seconds() { return static_cast<double>(std::clock()) / CLOCKS_PER_SEC; }

double wall_seconds() {
  using namespace std::chrono;
  return duration<double>(steady_clock::now().time_since_epoch()).count();
}

double mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

std::string join(const std::vector<double>& v) {
  std::string s;
  for (double x : v) s += (s.empty() ? "" : " ") + fmt("%.4f", x);
  return s;
}

// Desk-scale experiments shared by criteria 6 to 8.
class Lab {
 public:
  explicit Lab(fs::path dir) : dir_(std::move(dir)), data_(DataSource::from(scene::DatasetSpec{})) {
    hooks_.evaluate_each_epoch = false;
  }

  const DataSource& data() const { return data_; }
  RunConfig config(std::uint64_t seed) const {
    RunConfig c;
    c.seed = seed;
    return c;
  }

  const nn::Detector& teacher() {
    if (!teacher_) {
      auto o = train_teacher(config(0), data_, hooks_);
      save(o, "teacher_s0", "teacher");
      info(fmt("teacher (4 layers, 30 epochs): ap50 %.4f", ap50(o.model)));
      depth_[{4, 0}] = ap50(o.model);
      teacher_ = std::move(o.model);
    }
    return *teacher_;
  }

  double baseline(std::uint64_t seed) {
    return memo(baseline_, seed, [&] {
      const auto c = config(seed);
      auto o = train_detector(c.student, c, c.student_epochs, data_, hooks_);
      save(o, fmt("baseline_s%llu", (unsigned long long)seed), "student");
      if (seed == 0) baseline_model_ = o.model;
      return ap50(o.model);
    });
  }

  // Distilled student; groups (adaptive, fixed) with every loss term on.
  double distilled(std::size_t adaptive, std::size_t fixed, std::uint64_t seed) {
    auto& table = distilled_[{adaptive, fixed}];
    return memo(table, seed, [&] {
      auto c = config(seed);
      c.loss.adaptive_groups = adaptive;
      c.loss.fixed_groups = fixed;
      auto o = distill_student(c, teacher(), data_, hooks_);
      save(o, fmt("distill_a%zu_f%zu_s%llu", adaptive, fixed, (unsigned long long)seed), "student");
      if (seed == 0 && adaptive == 1 && fixed == 1) distilled_model_ = o.model;
      return ap50(o.model);
    });
  }

  double depth(std::size_t layers, std::uint64_t seed) {
    if (layers == 4 && seed == 0) {
      teacher();
      return depth_.at({4, 0});
    }
    const auto key = std::make_pair(layers, seed);
    if (auto it = depth_.find(key); it != depth_.end()) return it->second;
    auto c = config(seed);
    auto m = c.teacher;
    m.n_dec_layers = layers;
    auto o = train_detector(m, c, c.teacher_epochs, data_, hooks_);
    save(o, fmt("depth_l%zu_s%llu", layers, (unsigned long long)seed), "detector");
    return depth_[key] = ap50(o.model);
  }

  const std::optional<nn::Detector>& baseline_model() const { return baseline_model_; }
  const std::optional<nn::Detector>& distilled_model() const { return distilled_model_; }

 private:
  double ap50(const nn::Detector& m) const { return evaluate_ap(m, data_.spec, data_.val).ap50; }

  void save(const TrainOutcome& o, const std::string& run, const std::string& name) const {
    write_outcome(o, dir_ / run, name);
    std::ofstream os(dir_ / run / "eval.csv");
    os << eval::eval_csv_header() << '\n'
       << eval::eval_csv_row(o.epochs.size(), evaluate_ap(o.model, data_.spec, data_.val)) << '\n';
  }

  template <class F>
  static double memo(std::map<std::uint64_t, double>& table, std::uint64_t seed, F&& run) {
    if (auto it = table.find(seed); it != table.end()) return it->second;
    return table[seed] = run();
  }

  fs::path dir_;
  DataSource data_;
  TrainHooks hooks_;
  std::optional<nn::Detector> teacher_, baseline_model_, distilled_model_;
  std::map<std::uint64_t, double> baseline_;
  std::map<std::pair<std::size_t, std::size_t>, std::map<std::uint64_t, double>> distilled_;
  std::map<std::pair<std::size_t, std::uint64_t>, double> depth_;
};

// Small teacher for the structural criteria.
nn::Detector quick_teacher() {
  RunConfig c;
  c.teacher_epochs = 3;
  TrainHooks h;
  h.evaluate_each_epoch = false;
  return train_teacher(c, DataSource::from(scene::DatasetSpec{}, 300, 20), h).model;
}

Result hungarian_oracle() {
  SplitMix64 rng(1);
  std::size_t mismatches = 0;
  double hung = 0.0;
  const double t0 = wall_seconds();
  for (int t = 0; t < 1000; ++t) {
    const std::size_t r = rng.uniform_int(1, 7), c = rng.uniform_int(r, 9);
    match::CostMatrix m(r, c);
    for (double& x : m.data) x = rng.uniform();
    const double h0 = wall_seconds();
    const auto a = match::hungarian(m);
    hung += wall_seconds() - h0;
    const double best = oracle::brute_force_assignment(m);
    if (oracle::assignment_cost(m, a.col_of_row) != best || a.total_cost != best) ++mismatches;
  }
  const double total = wall_seconds() - t0;
  return {mismatches == 0 && total < 10.0,
          fmt("1000 instances, %zu mismatches, solver %.3f s, total with enumeration %.2f s", mismatches, hung,
              total)};
}

Result gradient_suite() {
  const double t0 = wall_seconds();
  const auto r = gradcheck(gradcheck_config(), gradcheck_data_spec(), 3);
  const double dt = wall_seconds() - t0;
  for (const auto& [g, e] : r.per_group) info(fmt("%-24s %.3e", g.c_str(), e));
  for (const auto& f : r.failures) info(f);
  return {r.passed && r.max_rel_err < 1e-4 && dt < 60.0,
          fmt("max rel err %.3e at %s, %zu refined, %zu kinks, %.1f s", r.max_rel_err, r.worst_param.c_str(),
              r.refined, r.kinks, dt)};
}

bool distinct_boxes(const loss::TeacherLayer& l) {
  for (std::size_t i = 0; i < l.preds.n; ++i)
    for (std::size_t j = i + 1; j < l.preds.n; ++j)
      if (l.preds.box(i) == l.preds.box(j)) return false;
  return true;
}

Result self_distillation(const nn::Detector& teacher_model) {
  RunConfig cfg;
  cfg.student = cfg.teacher;
  Teacher teacher(teacher_model, cfg.student.n_dec_layers);
  const auto student = make_student(cfg, &teacher_model);
  const scene::DatasetSpec data;
  double attn = 0.0, pred = 0.0;
  std::size_t non_identity = 0, scenes = 0;
  for (std::size_t i = 0; i < 20; ++i) {
    const auto s = scene::generate_scene(data, i);
    const auto& ts = teacher.scene(s);
    bool distinct = true;
    for (const auto& l : ts.layers) distinct = distinct && distinct_boxes(l);
    if (!distinct) continue;
    ++scenes;
    const auto obj = scene_objective(student, &ts, &teacher.queries(), s, cfg.loss);
    const auto& r = obj.trace.report;
    attn = std::max({attn, r.l_sa, r.l_ca, r.aux_l_sa, r.aux_l_ca});
    pred = std::max(pred, std::abs(r.l_pred - loss::entropy_floor(ts.layers, obj.trace.adaptive, cfg.loss.mu_cls)));
    pred = std::max(pred, std::abs(r.aux_l_pred - loss::entropy_floor(ts.layers, obj.trace.fixed_ts[0], cfg.loss.mu_cls)));
    for (const auto& m : obj.trace.adaptive)
      for (std::size_t q = 0; q < m.col_of_row.size(); ++q) non_identity += m.col_of_row[q] != q;
  }
  return {scenes > 0 && attn < 1e-10 && pred < 1e-10 && non_identity == 0,
          fmt("%zu scenes, max attention loss %.2e, max pred loss above floor %.2e, %zu non-identity matches",
              scenes, attn, pred, non_identity)};
}

double slice_diff(const ad::DiffArray& a, const ad::DiffArray& b, std::size_t rows, std::size_t cols) {
  double m = 0.0;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) m = std::max(m, std::abs(a.at(r, c) - b.at(r, c)));
  return m;
}

Result group_isolation(const nn::Detector& teacher_model) {
  RunConfig cfg;
  const auto student = make_student(cfg, &teacher_model).frozen();
  const auto aux = ad::DiffArray::constant(teacher_model.query_embed().shape(),
                                           std::vector<double>(teacher_model.query_embed().values().begin(),
                                                               teacher_model.query_embed().values().end()));
  const std::size_t ns = cfg.student.n_queries;
  const std::size_t hw = cfg.student.tokens();
  const scene::DatasetSpec data;
  double worst = 0.0, leaked = 0.0;
  for (std::size_t i = 0; i < 20; ++i) {
    const auto s = scene::generate_scene(data, 100 + i);
    const auto enc = student.encode(scene_features(cfg.student, s));
    const auto alone = student.decode(enc, student.query_embed());
    const auto both = student.decode(enc, student.query_embed(), aux);
    for (std::size_t l = 0; l < alone.layers.size(); ++l) {
      worst = std::max(worst, slice_diff(alone.layers[l].logits, both.layers[l].logits, ns, cfg.student.n_classes));
      worst = std::max(worst, slice_diff(alone.layers[l].boxes, both.layers[l].boxes, ns, 4));
      for (std::size_t h = 0; h < alone.attention.self_attn[l].size(); ++h) {
        const auto& sa = both.attention.self_attn[l][h];
        worst = std::max(worst, slice_diff(alone.attention.self_attn[l][h], sa, ns, ns));
        worst = std::max(worst, slice_diff(alone.attention.cross_attn[l][h], both.attention.cross_attn[l][h], ns, hw));
        for (std::size_t r = 0; r < sa.rows(); ++r)
          for (std::size_t c = 0; c < sa.cols(); ++c)
            if ((r < ns) != (c < ns)) leaked = std::max(leaked, std::abs(sa.at(r, c)));
      }
    }
  }
  return {worst < 1e-12 && leaked == 0.0,
          fmt("20 scenes, max student-slice difference %.2e, max cross-group attention %.2e", worst, leaked)};
}

Result constraint_modes(const nn::Detector& teacher) {
  const auto data = DataSource::from(scene::DatasetSpec{}, 200, 20);
  bool ok = true;
  std::string detail;
  for (auto mode : {match::ConstraintMode::kLastLayer, match::ConstraintMode::kAllLayers, match::ConstraintMode::kOff}) {
    RunConfig cfg;
    cfg.student_epochs = 3;
    cfg.loss.constraint_mode = mode;
    std::size_t steps = 0, last_equal = 0, all_equal = 0;
    TrainHooks hooks;
    hooks.evaluate_each_epoch = false;
    hooks.on_scene = [&](const StepTrace& t) {
      ++steps;
      bool last = true, all = true;
      for (const auto& g : t.fixed_gt) {
        last = last && g.back() == *t.teacher_gt_last;
        for (const auto& l : g) all = all && l == *t.teacher_gt_last;
      }
      last_equal += last;
      all_equal += all;
    };
    const auto o = distill_student(cfg, teacher, data, hooks);
    std::string churn;
    for (const auto& e : o.epochs) churn += fmt(" %.3f", e.instability.fixed_gt_churn);
    info(fmt("%-10s steps %zu, last layer equal %zu, all layers equal %zu, fixed-group GT churn by epoch:%s",
             match::to_string(mode).c_str(), steps, last_equal, all_equal, churn.c_str()));
    if (mode == match::ConstraintMode::kLastLayer) {
      ok = ok && steps > 0 && last_equal == steps;
      detail = fmt("last-layer mode: %zu/%zu steps match the teacher exactly", last_equal, steps);
    }
    if (mode == match::ConstraintMode::kAllLayers) ok = ok && all_equal == steps;
  }
  return {ok, detail};
}

Result distillation_direction(Lab& lab) {
  const double c0 = cpu_seconds();
  lab.teacher();
  std::vector<double> base, dist;
  for (auto s : kSeeds) {
    base.push_back(lab.baseline(s));
    dist.push_back(lab.distilled(1, 1, s));
    info(fmt("seed %llu: baseline ap50 %.4f, distilled ap50 %.4f", (unsigned long long)s, base.back(), dist.back()));
  }
  const double minutes = (cpu_seconds() - c0) / 60.0;
  const double delta = mean(dist) - mean(base);
  return {delta >= 0.02 && minutes < 30.0,
          fmt("baseline %.4f, distilled %.4f, delta %+.4f (need >= 0.02), %.1f CPU-min (need < 30)", mean(base),
              mean(dist), delta, minutes)};
}

// Mean squared gap between student and teacher cross-attention rows over
// adaptively matched queries, averaged over scenes.
double cross_attention_gap(const nn::Detector& student, const nn::Detector& teacher_model, const DataSource& data) {
  Teacher teacher(teacher_model, student.config().n_dec_layers);
  const auto frozen = student.frozen();
  double sum = 0.0;
  for (std::size_t i : data.val) {
    const auto s = scene::generate_scene(data.spec, i);
    const auto ts = teacher.compute(s);
    const auto out = frozen.forward(scene_features(student.config(), s));
    const auto layers = loss::slice_group(out, out.groups[0]);
    const auto m = match::adaptive_match(loss::prediction_values(layers), [&] {
      std::vector<match::PredictionSet> p;
      for (const auto& l : ts.layers) p.push_back(l.preds);
      return p;
    }());
    sum += loss::attn_distill_cross(layers, ts.layers, m, 1.0).item();
  }
  return sum / static_cast<double>(data.val.size());
}

Result depth_sweep(Lab& lab) {
  std::vector<double> l1, l4;
  for (auto s : kSeeds) {
    l1.push_back(lab.depth(1, s));
    l4.push_back(lab.depth(4, s));
    info(fmt("seed %llu: L=1 ap50 %.4f, L=4 ap50 %.4f", (unsigned long long)s, l1.back(), l4.back()));
  }
  return {mean(l4) > mean(l1), fmt("mean ap50 L=1 %.4f, L=4 %.4f", mean(l1), mean(l4))};
}

Result matching_ablation(Lab& lab) {
  std::vector<double> both, adaptive, fixed;
  for (auto s : kSeeds) {
    both.push_back(lab.distilled(1, 1, s));
    adaptive.push_back(lab.distilled(1, 0, s));
    fixed.push_back(lab.distilled(0, 1, s));
  }
  info("adaptive+fixed " + join(both));
  info("adaptive only  " + join(adaptive));
  info("fixed only     " + join(fixed));
  const double b = mean(both), a = mean(adaptive), f = mean(fixed);
  return {b >= a - 0.01 && b >= f - 0.01,
          fmt("mean ap50 adaptive+fixed %.4f, adaptive %.4f, fixed %.4f", b, a, f)};
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

Result cli_determinism(const fs::path& cli, const fs::path& dir) {
  fs::create_directories(dir);
  const std::string small = " --max-train 150 --max-val 30 --seed 4";
  auto run = [&](const std::string& args) {
    const std::string cmd = "\"" + cli.string() + "\" " + args + small + " > \"" + (dir / "cli.log").string() + "\" 2>&1";
    return std::system(cmd.c_str()) == 0;
  };
  const auto t = dir / "teacher";
  if (!run("train-teacher --epochs 2 --out \"" + t.string() + "\"")) return {false, "train-teacher failed"};
  const std::string distill = "distill --epochs 2 --teacher \"" + (t / "teacher.ckpt").string() + "\" --out ";
  if (!run(distill + "\"" + (dir / "a").string() + "\"") || !run(distill + "\"" + (dir / "b").string() + "\"")) {
    return {false, "distill failed"};
  }
  std::size_t same = 0, total = 0;
  for (const char* f : {"metrics.csv", "losses.csv", "student.ckpt", "student.ckpt.json"}) {
    const auto a = slurp(dir / "a" / f), b = slurp(dir / "b" / f);
    ++total;
    same += !a.empty() && a == b;
  }
  return {same == total, fmt("%zu/%zu output files bit-identical across two runs", same, total)};
}

box::BoxCxCyWH random_box(SplitMix64& rng) {
  return {rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7), rng.uniform(0.1, 0.4), rng.uniform(0.1, 0.4)};
}

Result ap_oracle() {
  SplitMix64 rng(10);
  double worst = 0.0;
  std::size_t mismatched_presence = 0;
  for (int t = 0; t < 200; ++t) {
    std::vector<match::GroundTruth> g;
    const std::size_t n_gt = rng.uniform_int(1, 2), n_det = rng.uniform_int(0, 3);
    for (std::size_t i = 0; i < n_gt; ++i) g.push_back({0, random_box(rng)});
    std::vector<eval::Detection> d;
    for (std::size_t i = 0; i < n_det; ++i) {
      auto b = random_box(rng);
      if (rng.uniform() < 0.7) {
        const auto& src = g[rng.uniform_int(0, n_gt - 1)].box;
        b = {src.cx + rng.uniform(-0.05, 0.05), src.cy + rng.uniform(-0.05, 0.05), src.w * rng.uniform(0.8, 1.2),
             src.h * rng.uniform(0.8, 1.2)};
      }
      d.push_back({0, 0, std::round(rng.uniform() * 4) / 4, b});
    }
    const std::vector<std::vector<match::GroundTruth>> gts{g};
    double brute_mean = 0.0;
    for (double thr : eval::iou_thresholds()) {
      const auto a = eval::average_precision(d, gts, 0, thr);
      const auto b = oracle::brute_force_ap(d, g, thr);
      if (a.has_value() != b.has_value()) {
        ++mismatched_presence;
        continue;
      }
      worst = std::max(worst, std::abs(*a - *b));
      brute_mean += *b / 10.0;
    }
    const auto r = eval::evaluate_detections(d, gts, 1);
    worst = std::max(worst, std::abs(r.ap50 - *oracle::brute_force_ap(d, g, 0.5)));
    worst = std::max(worst, std::abs(r.map - brute_mean));
  }
  return {worst <= 1e-12 && mismatched_presence == 0,
          fmt("200 instances, max difference %.2e", worst)};
}

}  // namespace

int main(int argc, char** argv) {
  retain_heap();
  CLI::App app{"Acceptance suite"};
  std::vector<int> only;
  std::string work = "acceptance_runs";
  std::string cli;
  app.add_option("--only", only, "run only these criteria");
  app.add_option("--work-dir", work, "directory for experiment outputs");
  app.add_option("--cli", cli, "path to the d3etr executable")->required();
  CLI11_PARSE(app, argc, argv);

  const fs::path dir = fs::absolute(work);
  fs::create_directories(dir);
  const std::set<int> selected(only.begin(), only.end());
  auto wanted = [&](int c) { return selected.empty() || selected.count(c); };

  std::optional<nn::Detector> small_teacher;
  auto quick = [&]() -> const nn::Detector& {
    if (!small_teacher) small_teacher = quick_teacher();
    return *small_teacher;
  };
  Lab lab(dir / "lab");

  const std::vector<std::pair<const char*, std::function<Result()>>> criteria = {
      {"hungarian matches brute-force enumeration", hungarian_oracle},
      {"full objective gradient check", gradient_suite},
      {"self-distillation identity", [&] { return self_distillation(quick()); }},
      {"auxiliary group isolation", [&] { return group_isolation(quick()); }},
      {"fixed-group assignment constraint", [&] { return constraint_modes(quick()); }},
      {"distilled student beats baseline", [&] {
         auto r = distillation_direction(lab);
         if (lab.baseline_model() && lab.distilled_model()) {
           const auto& val = lab.data();
           info(fmt("cross-attention gap to teacher (seed 0): baseline %.3e, distilled %.3e",
                    cross_attention_gap(*lab.baseline_model(), lab.teacher(), val),
                    cross_attention_gap(*lab.distilled_model(), lab.teacher(), val)));
         }
         return r;
       }},
      {"deeper decoder is better", [&] { return depth_sweep(lab); }},
      {"adaptive plus fixed matching not worse than either", [&] { return matching_ablation(lab); }},
      {"cli distill is deterministic", [&] { return cli_determinism(cli, dir / "cli"); }},
      {"average precision matches brute force", ap_oracle},
  };

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!wanted(id)) continue;
    std::printf("criterion %d: %s\n", id, criteria[i].first);
    std::fflush(stdout);
    Result r;
    try {
      r = criteria[i].second();
    } catch (const std::exception& e) {
      r = {false, std::string("error: ") + e.what()};
    }
    std::printf("%s %2d %s: %s\n", r.pass ? "PASS" : "FAIL", id, criteria[i].first, r.detail.c_str());
    std::fflush(stdout);
    failed += !r.pass;
  }
  return failed == 0 ? 0 : 1;
}
