#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "rdl/data.hpp"
#include "rdl/detector.hpp"
#include "rdl/losses.hpp"
#include "rdl/postprocess.hpp"

namespace rdl {

/// Bad configuration values or syntax.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct TrainConfig {
  std::string preset = "basic";
  int width = 72;
  int input_size = 320;
  int batch_size = 128;
  std::array<int, 3> phase_epochs{150, 50, 50};
  double schedule_scale = 1.0;
  std::array<double, 3> phase_lr{4e-3, 4e-4, 4e-5};
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double clip_norm = 10.0;
  LossHyper hyper;
  LossFlags flags;
  bool soft_nms = false;
  bool augment = true;
  double pos_threshold = 0.5;
  double neg_theta = 0.99;
  double ohem_ratio = 3.0;
  uint64_t seed = 0;

  void validate() const;
  /// Epochs per phase after schedule_scale (rounded, at least 1 for nonzero phases).
  std::array<int, 3> scaled_epochs() const;
  int total_epochs() const;
  double lr_at_epoch(int epoch) const;

  /// Canonical key=value text; parse_config(to_text()) reproduces the config.
  std::string to_text() const;
  /// FNV-1a over to_text(), hex.
  std::string hash() const;

  DetectionLossConfig loss_config(const ClassWeightTable& weights) const;
  PostprocessConfig postprocess_config() const;
};

/// Full-scale presets: "basic", "advanced", or an ablation row "c" .. "o".
TrainConfig make_preset(const std::string& name);
/// c=8 backbone, batch 8, schedule scaled to (15, 5, 5) epochs.
void apply_desk_scale(TrainConfig& config);
std::vector<std::string> preset_names();

/// Applies key=value lines ('#' comments) on top of the preset named by a
/// "preset" key (default basic). Throws ConfigError.
TrainConfig parse_config(const std::string& text);
TrainConfig load_config(const std::filesystem::path& path);
/// Applies one key=value override.
void set_config_value(TrainConfig& config, const std::string& key, const std::string& value);
std::vector<std::string> config_keys();

// ---- optimizer

struct UncertaintyState {
  UncertaintyParams params;
  std::array<double, 4> momentum{};
};

class Sgd {
 public:
  Sgd() = default;
  explicit Sgd(std::vector<Param*> params) : params_(std::move(params)) {}

  /// Global-norm clipping over all parameter and log-variance gradients, then
  /// momentum SGD. Weight decay skips parameters flagged decay=false and the
  /// log-variances. Returns the pre-clipping gradient norm.
  double step(double lr, double momentum, double weight_decay, double clip_norm, UncertaintyState* uncertainty,
              const std::array<double, 4>* d_log_var);

  std::vector<Tensor>& velocity() { return velocity_; }
  const std::vector<Tensor>& velocity() const { return velocity_; }

 private:
  std::vector<Param*> params_;
  std::vector<Tensor> velocity_;
};

// ---- checkpoint

struct Checkpoint {
  static constexpr uint32_t kVersion = 1;
  TrainConfig config;
  int num_classes = 0;
  std::vector<int64_t> category_ids;
  std::vector<std::string> class_names;
  ClassWeightTable class_weights;
  std::map<std::string, Tensor> params;
  std::map<std::string, Tensor> buffers;
  std::map<std::string, Tensor> velocity;
  UncertaintyState uncertainty;
  int epoch = 0;  // completed epochs; with config.seed this fixes all later randomness
  int64_t step = 0;
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
/// Throws std::runtime_error on version mismatch or a corrupted file.
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Builds a detector holding the checkpoint weights. Throws when the
/// checkpoint does not fit the architecture.
RefineDetLite model_from_checkpoint(const Checkpoint& ckpt);

// ---- training

struct EpochMetrics {
  int epoch = 0;
  double lr = 0.0;
  LossBreakdown loss;  // mean over batches
  std::array<double, 4> sigma2{1, 1, 1, 1};
  int64_t steps = 0;
  double grad_norm = 0.0;  // mean pre-clipping norm
  int odm_positives = 0;
};

std::string metrics_json(const EpochMetrics& m);

/// Raised when a batch produces a non-finite loss; the batch is dumped first.
class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Owns model, optimizer and data for one training run.
class Trainer {
 public:
  Trainer(const TrainConfig& config, const CocoDataset& dataset);
  /// Resumes from a checkpoint. The dataset must have the same classes.
  Trainer(const Checkpoint& ckpt, const CocoDataset& dataset);
  Trainer(const Trainer&) = delete;
  Trainer& operator=(const Trainer&) = delete;

  /// One optimization step on the given record indices and epoch (which
  /// seeds augmentation). Returns the breakdown with total filled.
  LossBreakdown train_step(const std::vector<size_t>& indices, int epoch);
  /// Loss on a batch without an update (training-mode forward).
  LossBreakdown batch_loss(const std::vector<size_t>& indices, int epoch);

  EpochMetrics train_epoch();
  /// Runs the remaining epochs. Metrics lines are appended to
  /// out_dir/metrics.jsonl; checkpoints go to out_dir/phase{1,2,3}.ckpt and
  /// out_dir/final.ckpt. The callback sees each epoch.
  void run(const std::filesystem::path& out_dir, const std::function<void(const EpochMetrics&)>& on_epoch = {});

  Checkpoint checkpoint() const;

  RefineDetLite& model() { return model_; }
  const TrainConfig& config() const { return config_; }
  const UncertaintyState& uncertainty() const { return uncertainty_; }
  const ClassWeightTable& class_weights() const { return weights_; }
  int epoch() const { return epoch_; }
  int64_t step_count() const { return step_; }
  /// Shuffled record order of an epoch.
  std::vector<size_t> epoch_order(int epoch) const;

 private:
  struct Batch {
    Tensor images;
    std::vector<ImageTargets> targets;
  };
  Batch make_batch(const std::vector<size_t>& indices, int epoch);
  const cv::Mat& image(size_t index);
  void init_optimizer();

  TrainConfig config_;
  const CocoDataset* dataset_;
  RefineDetLite model_;
  std::vector<Box> anchors_;
  ClassWeightTable weights_;
  DetectionLossConfig loss_config_;
  ParamCollector params_;
  Sgd sgd_;
  UncertaintyState uncertainty_;
  int epoch_ = 0;
  int64_t step_ = 0;
  double last_grad_norm_ = 0.0;
  int last_positives_ = 0;
  std::vector<cv::Mat> cache_;
  std::filesystem::path dump_dir_;
};

// ---- evaluation and benchmark

struct EvaluationOutput {
  EvalResult metrics;
  std::vector<EvalImage> images;  // pixel detections and gts per image
};

/// Decode, suppression (hard or soft per the flag) and COCO-style AP over a
/// dataset. Throws when the class count differs from the model's.
EvaluationOutput evaluate(RefineDetLite& model, const CocoDataset& dataset, const PostprocessConfig& post,
                          int batch_size = 8);

/// Detections for one BGR image, in its pixel coordinates.
std::vector<Detection> detect(RefineDetLite& model, const cv::Mat& bgr, const PostprocessConfig& post);

struct BenchmarkReport {
  int images = 0;
  int warmup = 0;
  int threads = 1;
  double forward_mean_ms = 0, forward_std_ms = 0;
  double end_to_end_mean_ms = 0, end_to_end_std_ms = 0;
  int64_t params = 0;
  int64_t macs = 0;
};

/// Parameters and multiply-adds of the whole detector for one image.
std::pair<int64_t, int64_t> detector_cost(RefineDetLite& model);

/// Single-thread timing per image over n images after `warmup` discarded runs.
/// End-to-end includes preprocessing and post-processing.
BenchmarkReport benchmark(RefineDetLite& model, const std::vector<cv::Mat>& images, int n,
                          const PostprocessConfig& post, int warmup = 10);

}  // namespace rdl
