#include "d3etr/config.hpp"

#include <fstream>
#include <stdexcept>

namespace d3etr {

using nlohmann::json;

namespace {

// Copies j[key] into dst when present; unknown keys are rejected by the caller.
template <class T>
void opt(const json& j, const char* key, T& dst) {
  if (j.contains(key)) j.at(key).get_to(dst);
}

void reject_unknown(const json& j, std::initializer_list<const char*> known, const char* what) {
  for (const auto& [k, _] : j.items()) {
    bool ok = false;
    for (const char* n : known) ok = ok || k == n;
    if (!ok) throw std::runtime_error(std::string(what) + ": unknown field '" + k + "'");
  }
}

}  // namespace

RunConfig::RunConfig() {
  teacher.n_dec_layers = 4;
  teacher.n_queries = 12;
  student.n_dec_layers = 2;
  student.n_queries = 8;
}

void RunConfig::validate() const {
  teacher.validate();
  student.validate();
  loss.validate();
  if (optim.batch_size == 0) throw std::invalid_argument("RunConfig: batch_size must be >= 1");
  const bool needs_match = loss.fixed() || inherit;
  if (needs_match && (teacher.d_model != student.d_model || teacher.n_heads != student.n_heads ||
                      teacher.tokens() != student.tokens())) {
    throw std::invalid_argument(
        "RunConfig: fixed matching and inheriting require equal d_model, n_heads and token grid");
  }
}

json to_json(const nn::ModelConfig& c) {
  return {{"d_model", c.d_model},     {"n_heads", c.n_heads},       {"n_enc_layers", c.n_enc_layers},
          {"n_dec_layers", c.n_dec_layers}, {"n_queries", c.n_queries}, {"n_classes", c.n_classes},
          {"grid_h", c.grid_h},       {"grid_w", c.grid_w},         {"patch", c.patch},
          {"c_in", c.c_in},           {"ffn_dim", c.ffn_dim}};
}

nn::ModelConfig model_config_from_json(const json& j) {
  reject_unknown(j,
                 {"d_model", "n_heads", "n_enc_layers", "n_dec_layers", "n_queries", "n_classes",
                  "grid_h", "grid_w", "patch", "c_in", "ffn_dim"},
                 "model config");
  nn::ModelConfig c;
  opt(j, "d_model", c.d_model);
  opt(j, "n_heads", c.n_heads);
  opt(j, "n_enc_layers", c.n_enc_layers);
  opt(j, "n_dec_layers", c.n_dec_layers);
  opt(j, "n_queries", c.n_queries);
  opt(j, "n_classes", c.n_classes);
  opt(j, "grid_h", c.grid_h);
  opt(j, "grid_w", c.grid_w);
  opt(j, "patch", c.patch);
  opt(j, "c_in", c.c_in);
  opt(j, "ffn_dim", c.ffn_dim);
  c.validate();
  return c;
}

json to_json(const loss::LossConfig& c) {
  return {{"mu_cls", c.mu_cls},
          {"l1_weight", c.l1_weight},
          {"giou_weight", c.giou_weight},
          {"lambda_sa", c.lambda_sa},
          {"lambda_ca", c.lambda_ca},
          {"constraint_mode", match::to_string(c.constraint_mode)},
          {"pred", c.pred},
          {"self_attn", c.self_attn},
          {"cross_attn", c.cross_attn},
          {"aux_detection", c.aux_detection},
          {"adaptive_groups", c.adaptive_groups},
          {"fixed_groups", c.fixed_groups}};
}

loss::LossConfig loss_config_from_json(const json& j) {
  reject_unknown(j,
                 {"mu_cls", "l1_weight", "giou_weight", "lambda_sa", "lambda_ca", "constraint_mode",
                  "pred", "self_attn", "cross_attn", "aux_detection", "adaptive_groups",
                  "fixed_groups"},
                 "loss config");
  loss::LossConfig c;
  opt(j, "mu_cls", c.mu_cls);
  opt(j, "l1_weight", c.l1_weight);
  opt(j, "giou_weight", c.giou_weight);
  opt(j, "lambda_sa", c.lambda_sa);
  opt(j, "lambda_ca", c.lambda_ca);
  if (j.contains("constraint_mode")) {
    c.constraint_mode = match::parse_constraint_mode(j.at("constraint_mode").get<std::string>());
  }
  opt(j, "pred", c.pred);
  opt(j, "self_attn", c.self_attn);
  opt(j, "cross_attn", c.cross_attn);
  opt(j, "aux_detection", c.aux_detection);
  opt(j, "adaptive_groups", c.adaptive_groups);
  opt(j, "fixed_groups", c.fixed_groups);
  c.validate();
  return c;
}

json to_json(const OptimConfig& c) {
  return {{"lr", c.lr},
          {"weight_decay", c.weight_decay},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"eps", c.eps},
          {"lr_drop_fraction", c.lr_drop_fraction},
          {"lr_drop_factor", c.lr_drop_factor},
          {"grad_clip", c.grad_clip},
          {"batch_size", c.batch_size}};
}

OptimConfig optim_config_from_json(const json& j) {
  reject_unknown(j,
                 {"lr", "weight_decay", "beta1", "beta2", "eps", "lr_drop_fraction",
                  "lr_drop_factor", "grad_clip", "batch_size"},
                 "optimizer config");
  OptimConfig c;
  opt(j, "lr", c.lr);
  opt(j, "weight_decay", c.weight_decay);
  opt(j, "beta1", c.beta1);
  opt(j, "beta2", c.beta2);
  opt(j, "eps", c.eps);
  opt(j, "lr_drop_fraction", c.lr_drop_fraction);
  opt(j, "lr_drop_factor", c.lr_drop_factor);
  opt(j, "grad_clip", c.grad_clip);
  opt(j, "batch_size", c.batch_size);
  return c;
}

json to_json(const RunConfig& c) {
  return {{"teacher", to_json(c.teacher)},
          {"student", to_json(c.student)},
          {"loss", to_json(c.loss)},
          {"optimizer", to_json(c.optim)},
          {"teacher_epochs", c.teacher_epochs},
          {"student_epochs", c.student_epochs},
          {"seed", c.seed},
          {"inherit", c.inherit},
          {"max_train_scenes", c.max_train_scenes},
          {"max_val_scenes", c.max_val_scenes},
          {"data_spec", c.data_spec},
          {"teacher_ckpt", c.teacher_ckpt},
          {"out_dir", c.out_dir}};
}

RunConfig run_config_from_json(const json& j) {
  reject_unknown(j,
                 {"teacher", "student", "loss", "optimizer", "teacher_epochs", "student_epochs",
                  "seed", "inherit", "max_train_scenes", "max_val_scenes", "data_spec",
                  "teacher_ckpt", "out_dir"},
                 "run config");
  RunConfig c;
  if (j.contains("teacher")) {
    json t = to_json(c.teacher);
    t.update(j.at("teacher"));
    c.teacher = model_config_from_json(t);
  }
  if (j.contains("student")) {
    json s = to_json(c.student);
    s.update(j.at("student"));
    c.student = model_config_from_json(s);
  }
  if (j.contains("loss")) c.loss = loss_config_from_json(j.at("loss"));
  if (j.contains("optimizer")) c.optim = optim_config_from_json(j.at("optimizer"));
  opt(j, "teacher_epochs", c.teacher_epochs);
  opt(j, "student_epochs", c.student_epochs);
  opt(j, "seed", c.seed);
  opt(j, "inherit", c.inherit);
  opt(j, "max_train_scenes", c.max_train_scenes);
  opt(j, "max_val_scenes", c.max_val_scenes);
  opt(j, "data_spec", c.data_spec);
  opt(j, "teacher_ckpt", c.teacher_ckpt);
  opt(j, "out_dir", c.out_dir);
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config " + path.string());
  return run_config_from_json(json::parse(is));
}

void save_run_config(const RunConfig& c, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write config " + path.string());
  os << to_json(c).dump(2) << '\n';
}

std::filesystem::path sidecar_path(const std::filesystem::path& ckpt) {
  return std::filesystem::path(ckpt.string() + ".json");
}

void save_model_config(const nn::ModelConfig& c, const std::filesystem::path& ckpt) {
  std::ofstream os(sidecar_path(ckpt));
  if (!os) throw std::runtime_error("cannot write " + sidecar_path(ckpt).string());
  os << to_json(c).dump(2) << '\n';
}

nn::ModelConfig load_model_config(const std::filesystem::path& ckpt) {
  std::ifstream is(sidecar_path(ckpt));
  if (!is) throw std::runtime_error("missing model config " + sidecar_path(ckpt).string());
  return model_config_from_json(json::parse(is));
}

}  // namespace d3etr
