#pragma once

// Training loop for the full pipeline: end-to-end, or the two-step baseline
// that first fits the segmenter to weak labels and then freezes it.

#include "end2reg/model.hpp"

#include <functional>
#include <string>

namespace end2reg {

enum class TrainMode { end_to_end, two_step };
enum class OptimizerKind { sgd_momentum, adam };

struct TrainConfig {
  double lr0 = 1e-4;
  std::size_t warmup_iters = 500;
  std::size_t total_iters = 5000;   // registration iterations (phase 2 in two_step)
  std::size_t phase1_iters = 1000;  // two_step segmentation pretraining
  double tau_start = 1.0;
  double tau_end = 0.1;
  bool tau_anneal = false;
  std::uint64_t seed = 0;
  TrainMode mode = TrainMode::end_to_end;
  OptimizerKind optimizer = OptimizerKind::sgd_momentum;
  double momentum = 0.9;
  double adam_beta2 = 0.999;
  double clip_norm = 10.0;
  std::size_t pose_variants = 4;    // extra re-posed copies of each preoperative cloud
  double weak_label_mm = 3.0;

  // Throws std::invalid_argument unless warmup < total and lr0 > 0.
  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);
std::string to_string(TrainMode m);
TrainMode parse_train_mode(const std::string& s);

// Linear warm-up 0 -> lr0, then cosine decay lr0 -> 0 at total.
double lr_at(std::size_t step, double lr0, std::size_t warmup, std::size_t total);
double lr_at(std::size_t step, const TrainConfig& cfg);

// One training sample with its cached geometry. Variant 0 is the sample as
// generated; the others re-pose the preoperative cloud with fresh poses.
struct TrainingExample {
  std::string id;
  PreparedCloud intra;
  std::vector<PreparedCloud> pre;
  std::vector<Supervision> supervision;
  std::vector<int> gt_mask;
  std::vector<int> weak_mask;
};

TrainingExample make_training_example(const std::string& id, const RegistrationSample& sample,
                                      const ModelConfig& model, const TrainConfig& train,
                                      std::size_t index);

struct StepReport {
  std::size_t step = 0;    // global step across phases
  int phase = 2;           // 1: segmentation pretraining, 2: registration
  std::string sample;
  std::size_t variant = 0;
  double total = 0, coarse = 0, fine = 0, seg_ce = 0;
  double lr = 0, tau = 0, grad_norm = 0;
  bool skipped = false;    // no positive superpoint pair
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, std::string sample, std::size_t step)
      : std::runtime_error(what), sample(std::move(sample)), step(step) {}
  std::string sample;
  std::size_t step;
};

class Trainer {
 public:
  Trainer(End2RegModel& model, std::vector<TrainingExample> data, TrainConfig config);

  const TrainConfig& config() const { return config_; }
  std::size_t step() const { return step_; }
  std::size_t total_steps() const;
  bool done() const { return step_ >= total_steps(); }
  const std::vector<StepReport>& curve() const { return curve_; }

  // Runs one iteration. Throws TrainingDiverged on a non-finite loss or
  // gradient; parameters are left as they were before the step.
  StepReport step_once();
  // Runs until done() or `steps` more iterations; calls on_step after each.
  void run(std::size_t steps, const std::function<void(const StepReport&)>& on_step = {});

  // Segmentation accuracy of the argmax mask against gt_mask over the data.
  double segmentation_accuracy() const;

  // Parameters, optimizer state, step counter and the full configuration.
  Checkpoint checkpoint() const;
  // Restores a checkpoint written by checkpoint(); the data must match.
  void restore(const Checkpoint& ckpt);

 private:
  int phase_of(std::size_t step) const;
  std::size_t example_at(std::size_t step) const;

  End2RegModel& model_;
  std::vector<TrainingExample> data_;
  TrainConfig config_;
  std::vector<std::string> names_;
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m1_, m2_;
  std::size_t seg_count_ = 0;  // leading entries of params_ that belong to the segmenter
  std::size_t step_ = 0;
  std::vector<StepReport> curve_;
};

// Writes the loss curve as CSV.
void write_curve_csv(const std::filesystem::path& path, const std::vector<StepReport>& curve);

}  // namespace end2reg
