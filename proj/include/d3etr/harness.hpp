#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "d3etr/config.hpp"
#include "d3etr/eval.hpp"
#include "d3etr/losses.hpp"
#include "d3etr/matching.hpp"
#include "d3etr/nn.hpp"
#include "d3etr/scenes.hpp"

namespace d3etr {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Decoupled weight decay Adam.
class AdamW {
 public:
  explicit AdamW(const OptimConfig& cfg) : cfg_(cfg) {}
  // Applies one update from the accumulated gradients at step size lr.
  void step(ad::ParamStore& params, double lr);
  std::size_t steps() const { return t_; }

 private:
  OptimConfig cfg_;
  std::size_t t_ = 0;
  std::map<std::string, std::vector<double>> m_, v_;
};

double learning_rate(const OptimConfig& cfg, std::size_t epoch, std::size_t total_epochs);

// ---- teacher side -------------------------------------------------------------

// Frozen teacher outputs for one scene, restricted to the decoder layers the
// student is paired with (student layer k <-> teacher layer k + L_t - L_s).
struct TeacherScene {
  std::vector<loss::TeacherLayer> layers;
  match::GtAssignment gt_last;  // teacher's own last-layer GT assignment
};

class Teacher {
 public:
  Teacher(const nn::Detector& model, std::size_t student_layers);
  const nn::Detector& model() const { return model_; }
  const ad::DiffArray& queries() const { return queries_; }
  std::size_t layer_offset() const { return offset_; }
  // Cached per scene index; teacher outputs never change.
  const TeacherScene& scene(const scene::SceneSample& s);
  TeacherScene compute(const scene::SceneSample& s) const;

 private:
  nn::Detector model_;
  ad::DiffArray queries_;
  std::size_t offset_;
  std::size_t student_layers_;
  std::map<std::pair<std::uint64_t, std::size_t>, TeacherScene> cache_;
};

// ---- per-scene objective ------------------------------------------------------

struct StepTrace {
  std::size_t epoch = 0, step = 0, scene = 0;
  std::vector<match::GtAssignment> student_gt;
  match::LayerMatchings adaptive;  // empty when adaptive matching is off
  std::vector<std::vector<match::GtAssignment>> fixed_gt;     // [group][layer], constrained
  std::vector<std::vector<match::GtAssignment>> fixed_gt_raw; // before the constraint
  std::vector<match::LayerMatchings> fixed_ts;                // identity per group
  std::optional<match::GtAssignment> teacher_gt_last;
  loss::LossReport report;
};

struct SceneObjective {
  loss::TotalLoss loss;
  StepTrace trace;
};

ad::DiffArray scene_features(const nn::ModelConfig& cfg, const scene::SceneSample& s);

// Full training objective of one scene: detection loss of every group plus
// the enabled distillation terms. teacher may be null for detection-only.
SceneObjective scene_objective(const nn::Detector& student, const TeacherScene* teacher,
                               const ad::DiffArray* teacher_queries, const scene::SceneSample& s,
                               const loss::LossConfig& cfg);

// ---- training -----------------------------------------------------------------

struct InstabilityRow {
  std::size_t epoch = 0;
  double student_gt_churn = 0;   // student group, last layer GT assignment
  double adaptive_ts_churn = 0;  // student group, last layer teacher-student matching
  double fixed_ts_churn = 0;     // auxiliary groups, teacher-student correspondence
  double fixed_gt_churn = 0;     // auxiliary groups, last layer GT assignment
};

struct EpochRecord {
  std::size_t epoch = 0;
  eval::EvalResult eval;
  loss::LossReport mean_loss;
  InstabilityRow instability;
};

struct TrainOutcome {
  nn::Detector model;
  std::vector<EpochRecord> epochs;
  std::vector<loss::LossReport> step_losses;
};

struct TrainHooks {
  std::function<void(const StepTrace&)> on_scene;
  std::function<void(const EpochRecord&)> on_epoch;
  bool evaluate_each_epoch = true;
};

struct DataSource {
  scene::DatasetSpec spec;
  std::vector<std::size_t> train, val;

  static DataSource from(const scene::DatasetSpec& spec, std::size_t max_train = 0,
                         std::size_t max_val = 0);
};

// Generic loop; teacher null means plain detection training.
TrainOutcome run_training(nn::Detector model, Teacher* teacher, const loss::LossConfig& loss_cfg,
                          const OptimConfig& optim, std::size_t epochs, std::uint64_t seed,
                          const DataSource& data, const TrainHooks& hooks = {});

// Detection-only training of a model with the given architecture.
TrainOutcome train_detector(const nn::ModelConfig& model_cfg, const RunConfig& cfg,
                            std::size_t epochs, const DataSource& data, const TrainHooks& hooks = {});

TrainOutcome train_teacher(const RunConfig& cfg, const DataSource& data, const TrainHooks& hooks = {});

// Copies encoder, the first L_s decoder layers, heads and the first N_s query
// embeddings from the teacher. Throws on any shape mismatch.
void inherit_init(nn::Detector& student, const nn::Detector& teacher);

// Student initialization as used by distillation: Xavier from the run seed,
// plus extra learned query groups, plus inheriting when enabled.
nn::Detector make_student(const RunConfig& cfg, const nn::Detector* teacher);

TrainOutcome distill_student(const RunConfig& cfg, const nn::Detector& teacher, const DataSource& data,
                             const TrainHooks& hooks = {});

// Last decoder layer, student group only, every (query, class) pair scored.
std::vector<eval::Detection> detect(const nn::Detector& model, const scene::SceneSample& s,
                                    std::size_t image_id);
eval::EvalResult evaluate_ap(const nn::Detector& model, const scene::DatasetSpec& spec,
                             std::span<const std::size_t> indices);

// ---- outputs ------------------------------------------------------------------

void write_checkpoint(const nn::Detector& model, const std::filesystem::path& path);
nn::Detector read_checkpoint(const std::filesystem::path& path);
void write_metrics_csv(const std::vector<EpochRecord>& epochs, const std::filesystem::path& path);
void write_losses_csv(const std::vector<loss::LossReport>& steps, const std::filesystem::path& path);
void write_instability_csv(const std::vector<EpochRecord>& epochs, const std::filesystem::path& path);
void write_outcome(const TrainOutcome& o, const std::filesystem::path& dir, const std::string& name);

// ---- ablations ----------------------------------------------------------------

struct AblationEntry {
  std::string name;
  enum class Kind { kDistill, kDetector } kind = Kind::kDistill;
  loss::LossConfig loss;             // kDistill
  bool inherit = true;               // kDistill
  std::size_t n_dec_layers = 0;      // kDetector: decoder depth of a teacher-architecture model
};

struct AblationRow {
  AblationEntry entry;
  eval::EvalResult result;
};

// Matching grid: none, adaptive, fixed, adaptive x2, fixed x2,
// adaptive + fixed.
std::vector<AblationEntry> matching_grid(const loss::LossConfig& base);
// Loss-term grid on top of adaptive matching.
std::vector<AblationEntry> term_grid(const loss::LossConfig& base);
// Constraint grid: off, all-layers, last-layer.
std::vector<AblationEntry> constraint_grid(const loss::LossConfig& base);
// Decoder depths 1..max_layers on the teacher architecture.
std::vector<AblationEntry> depth_grid(std::size_t max_layers);

std::vector<AblationRow> run_ablation(const RunConfig& cfg, const nn::Detector* teacher,
                                      const std::vector<AblationEntry>& grid, const DataSource& data);
std::string ablation_csv_header();
std::string ablation_csv_row(const AblationRow& r);
void write_ablation_csv(const std::vector<AblationRow>& rows, const std::filesystem::path& path);

// ---- diagnostics --------------------------------------------------------------

struct GradcheckReport {
  bool passed = false;
  double max_rel_err = 0.0;
  std::string worst_param;
  std::map<std::string, double> per_group;  // top-level name prefix -> max rel err
  std::vector<std::string> failures;
  std::size_t refined = 0;  // coordinates re-evaluated with a smaller step
  std::size_t kinks = 0;    // coordinates checked against one-sided slopes
};

// Tiny configuration used by the gradient check (2 decoder layers, 3
// queries, 2 classes, 4x4 token grid).
RunConfig gradcheck_config();
scene::DatasetSpec gradcheck_data_spec();

// Relative error is |a - n| / max(|a|, |n|, floor) with
// floor = loss_floor * max(1, |loss|), the scale below which central
// differences of the loss are dominated by rounding.
GradcheckReport gradcheck(const RunConfig& cfg, const scene::DatasetSpec& data, std::size_t n_trials,
                          double tolerance = 1e-4, double h = 1e-6, double loss_floor = 1e-5);

// Writes attn_{self|cross}_L{layer}_H{head}.csv for the student group.
std::vector<std::filesystem::path> dump_attention(const nn::Detector& model,
                                                  const scene::SceneSample& s,
                                                  const std::filesystem::path& out_dir);

}  // namespace d3etr
