#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "d3etr/harness.hpp"
#include "d3etr/rng.hpp"

namespace d3etr {

RunConfig gradcheck_config() {
  RunConfig c;
  nn::ModelConfig m;
  m.d_model = 8;
  m.n_heads = 2;
  m.n_enc_layers = 1;
  m.n_dec_layers = 2;
  m.n_queries = 3;
  m.n_classes = 2;
  m.grid_h = 4;
  m.grid_w = 4;
  m.patch = 1;
  m.c_in = 3;
  m.ffn_dim = 8;
  c.teacher = m;
  c.student = m;
  c.student.n_queries = 2;
  c.inherit = false;
  c.loss = loss::LossConfig{};
  return c;
}

scene::DatasetSpec gradcheck_data_spec() {
  scene::DatasetSpec s;
  s.seed = 7;
  s.n_scenes = 64;
  s.grid_h = 4;
  s.grid_w = 4;
  s.n_classes = 2;
  s.max_objects = 2;
  s.min_size = 1;
  s.max_size = 2;
  s.min_gap = 0;
  return s;
}

namespace {

std::string group_of(const std::string& name) {
  const auto dot = name.rfind('.');
  return dot == std::string::npos ? name : name.substr(0, dot);
}

}  // namespace

GradcheckReport gradcheck(const RunConfig& cfg, const scene::DatasetSpec& data, std::size_t n_trials,
                          double tolerance, double h, double loss_floor) {
  if (cfg.student.n_queries > 3 || cfg.student.n_dec_layers > 2 || cfg.teacher.n_queries > 3 ||
      cfg.teacher.n_dec_layers > 2) {
    throw std::invalid_argument("gradcheck: configuration too large (at most 3 queries, 2 decoder layers)");
  }
  cfg.validate();
  GradcheckReport rep;
  for (std::size_t t = 0; t < n_trials; ++t) {
    RunConfig c = cfg;
    c.seed = SplitMix64::derive(cfg.seed, 500 + t);
    const auto teacher_model = nn::Detector::init(cfg.teacher, SplitMix64::derive(cfg.seed, 600 + t));
    auto student = make_student(c, &teacher_model);
    const auto s = scene::generate_scene(data, t % data.n_scenes);

    const bool uses_teacher = c.loss.adaptive() || c.loss.fixed();
    std::optional<Teacher> teacher;
    std::optional<TeacherScene> ts;
    if (uses_teacher) {
      teacher.emplace(teacher_model, c.student.n_dec_layers);
      ts = teacher->compute(s);
    }
    auto objective = [&]() {
      return scene_objective(student, ts ? &*ts : nullptr, teacher ? &teacher->queries() : nullptr, s,
                             c.loss);
    };

    student.params().zero_grad();
    const auto base = objective();
    ad::backward(base.loss.objective);
    const double floor = loss_floor * std::max(1.0, std::abs(base.loss.report.total));
    const auto analytic = ad::collect_grads(student.params());
    const auto numeric = ad::finite_diff_grad(
        [&](ad::ParamStore&) { return objective().loss.report.total; }, student.params(), h);
    auto central = [&](ad::DiffArray& p, std::size_t i, double step) {
      auto v = p.mutable_values();
      const double x = v[i];
      v[i] = x + step;
      const double fp = objective().loss.report.total;
      v[i] = x - step;
      const double fm = objective().loss.report.total;
      v[i] = x;
      return (fp - fm) / (2.0 * step);
    };
    auto one_sided = [&](ad::DiffArray& p, std::size_t i, double step) {
      auto v = p.mutable_values();
      const double x = v[i];
      const double f0 = objective().loss.report.total;
      v[i] = x + step;
      const double f1 = objective().loss.report.total;
      v[i] = x;
      return (f1 - f0) / step;
    };
    auto rel = [&](double a, double n) {
      return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
    };

    for (auto& [name, p] : student.params()) {
      const auto& a = analytic.at(name);
      const auto& n = numeric.at(name);
      double worst = 0.0;
      for (std::size_t i = 0; i < a.size(); ++i) {
        double err = rel(a[i], n[i]);
        // A stencil straddling a kink (relu, min/max, matching switch) is
        // retried with smaller steps.
        for (double step = h / 10; err >= tolerance && step >= h / 100; step /= 10) {
          err = std::min(err, rel(a[i], central(p, i, step)));
          ++rep.refined;
        }
        // Kink exactly at the evaluation point: the analytic value must lie
        // between the one-sided slopes.
        if (err >= tolerance) {
          const double lo = std::min(one_sided(p, i, -h), one_sided(p, i, h));
          const double hi = std::max(one_sided(p, i, -h), one_sided(p, i, h));
          const double dist = a[i] < lo ? lo - a[i] : (a[i] > hi ? a[i] - hi : 0.0);
          if (rel(hi, lo) >= tolerance) {
            err = dist / std::max({std::abs(a[i]), floor});
            ++rep.kinks;
          }
        }
        worst = std::max(worst, err);
      }
      auto& g = rep.per_group[group_of(name)];
      g = std::max(g, worst);
      if (worst >= tolerance) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "trial %zu: %s rel err %.3e", t, name.c_str(), worst);
        rep.failures.emplace_back(buf);
      }
      if (worst >= rep.max_rel_err) {
        rep.max_rel_err = worst;
        rep.worst_param = name;
      }
    }
  }
  rep.passed = rep.failures.empty();
  return rep;
}

std::vector<std::filesystem::path> dump_attention(const nn::Detector& model, const scene::SceneSample& s,
                                                  const std::filesystem::path& out_dir) {
  const auto out = model.frozen().forward(scene_features(model.config(), s));
  std::filesystem::create_directories(out_dir);
  std::vector<std::filesystem::path> files;
  auto write = [&](const char* kind, std::size_t l, std::size_t h, const ad::DiffArray& m) {
    const auto path = out_dir / ("attn_" + std::string(kind) + "_L" + std::to_string(l) + "_H" +
                                 std::to_string(h) + ".csv");
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    char buf[32];
    for (std::size_t r = 0; r < m.rows(); ++r) {
      for (std::size_t c = 0; c < m.cols(); ++c) {
        std::snprintf(buf, sizeof buf, "%.17g", m.at(r, c));
        os << (c ? "," : "") << buf;
      }
      os << '\n';
    }
    files.push_back(path);
  };
  const auto& a = out.attention;
  for (std::size_t l = 0; l < a.self_attn.size(); ++l) {
    for (std::size_t h = 0; h < a.self_attn[l].size(); ++h) write("self", l, h, a.self_attn[l][h]);
    for (std::size_t h = 0; h < a.cross_attn[l].size(); ++h) write("cross", l, h, a.cross_attn[l][h]);
  }
  return files;
}

}  // namespace d3etr
