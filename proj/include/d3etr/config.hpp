#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "d3etr/losses.hpp"
#include "d3etr/nn.hpp"
#include "json.hpp"

namespace d3etr {

struct OptimConfig {
  double lr = 1e-3;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Step size is multiplied by lr_drop_factor from epoch floor(fraction * E).
  double lr_drop_fraction = 0.8;
  double lr_drop_factor = 0.1;
  // Global gradient-norm clip; 0 disables.
  double grad_clip = 0.0;
  std::size_t batch_size = 8;
};

struct RunConfig {
  nn::ModelConfig teacher;
  nn::ModelConfig student;
  loss::LossConfig loss;
  OptimConfig optim;
  std::size_t teacher_epochs = 30;
  std::size_t student_epochs = 15;
  std::uint64_t seed = 0;
  bool inherit = true;
  // 0 keeps the whole split.
  std::size_t max_train_scenes = 0;
  std::size_t max_val_scenes = 0;
  std::string data_spec;
  std::string teacher_ckpt;
  std::string out_dir = "out";

  RunConfig();
  void validate() const;
};

nlohmann::json to_json(const nn::ModelConfig& c);
nn::ModelConfig model_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const loss::LossConfig& c);
loss::LossConfig loss_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const OptimConfig& c);
OptimConfig optim_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RunConfig& c);
RunConfig run_config_from_json(const nlohmann::json& j);

RunConfig load_run_config(const std::filesystem::path& path);
void save_run_config(const RunConfig& c, const std::filesystem::path& path);

// Model configuration stored next to a checkpoint ("<ckpt>.json").
std::filesystem::path sidecar_path(const std::filesystem::path& ckpt);
void save_model_config(const nn::ModelConfig& c, const std::filesystem::path& ckpt);
nn::ModelConfig load_model_config(const std::filesystem::path& ckpt);

}  // namespace d3etr
