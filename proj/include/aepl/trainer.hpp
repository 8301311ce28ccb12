#pragma once

#include <torch/torch.h>

#include <array>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "aepl/data.hpp"
#include "aepl/metrics.hpp"
#include "aepl/model.hpp"
#include "aepl/objectives.hpp"

namespace aepl {

enum class TrainPromptMode { Predicted, GroundTruth };
enum class EvalPromptMode { Predicted, Edited };

std::string_view to_string(TrainPromptMode m);
std::string_view to_string(EvalPromptMode m);
std::optional<EvalPromptMode> parse_eval_prompt_mode(std::string_view text);
std::optional<TrainPromptMode> parse_train_prompt_mode(std::string_view text);

/// Optimisation recipe. Defaults are the desk-scale budget; `paper_scale()`
/// returns the full recipe (1000 epochs, patch 96×160×160).
struct TrainConfig {
  int epochs = 50;
  int batch_size = 2;
  int iters_per_epoch = 50;
  double lr0 = 0.01;
  double lr_min = 1e-6;
  double poly_power = 0.9;
  double momentum = 0.99;
  double weight_decay = 3e-5;
  double alpha = 0.1;
  std::vector<double> ds_weights{1.0, 0.5, 0.25, 0.125, 0.0625};
  double dice_smooth = 1e-5;
  std::array<std::int64_t, 3> patch_size{32, 64, 64};
  std::uint64_t seed = 42;
  TrainPromptMode prompt_mode = TrainPromptMode::Predicted;
  EvalPromptMode eval_prompt_mode = EvalPromptMode::Predicted;
  double fg_prob = 0.5;
  bool augment = true;
  int num_threads = 1;

  static TrainConfig paper_scale();
  LossWeights loss_weights() const;
  void validate() const;
};

/// max(lr0 · (1 − epoch/epochs)^power, lr_min).
double lr_at(int epoch, const TrainConfig& cfg);

/// SGD with heavy-ball momentum and decoupled weight decay:
///   v ← μ·v + g;   p ← p − lr·v − lr·λ·p
class SgdMomentum {
 public:
  SgdMomentum(std::vector<torch::Tensor> params, double momentum, double weight_decay);

  void zero_grad();
  void step(double lr);

  std::vector<torch::Tensor>& momentum_buffers() { return buffers_; }
  const std::vector<torch::Tensor>& momentum_buffers() const { return buffers_; }

 private:
  std::vector<torch::Tensor> params_;
  std::vector<torch::Tensor> buffers_;
  double momentum_;
  double weight_decay_;
};

using NamedTensors = std::vector<std::pair<std::string, torch::Tensor>>;

/// Versioned training snapshot. `epoch` counts completed epochs.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  ModelConfig model_config;
  TrainConfig train_config;
  std::uint64_t config_hash = 0;
  int epoch = 0;
  double val_mean_dice = 0.0;
  double grade_accuracy = 0.0;
  double best_val_mean_dice = -1.0;
  int best_epoch = -1;
  std::string rng_state;
  NamedTensors parameters;  // parameters and buffers, deep copies
  std::vector<torch::Tensor> momentum;
};

/// Stable 64-bit FNV-1a over the canonical JSON of both configs.
std::uint64_t config_hash(const ModelConfig& model, const TrainConfig& train);

NamedTensors capture_state(const AeplNet& model);
void restore_state(AeplNet& model, const NamedTensors& state);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Seeds torch and builds a freshly initialised network.
AeplNet make_model(const ModelConfig& cfg, std::uint64_t seed);
/// Network with the checkpoint's weights, in eval mode.
AeplNet model_from_checkpoint(const Checkpoint& ckpt);

struct EpochLog {
  int epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  double seg_loss = 0.0;
  double cls_loss = 0.0;
  double val_mean_dice = 0.0;
  std::array<double, 3> val_dice{};
  double val_grade_accuracy = 0.0;
  bool best = false;

  std::string to_json_line() const;
};

struct TrainingData {
  std::vector<Case> train;
  std::vector<Case> val;
};

/// Owns the optimisation state for one run.
class Trainer {
 public:
  Trainer(AeplNet model, TrainConfig cfg, const TrainingData& data);

  /// Continues from a snapshot taken by `snapshot()` on an identically
  /// configured trainer.
  void restore(const Checkpoint& ckpt);

  EpochLog run_epoch();
  bool finished() const { return epoch_ >= cfg_.epochs; }
  int epoch() const { return epoch_; }

  Checkpoint snapshot() const;
  const Checkpoint& best() const { return best_; }
  const std::vector<EpochLog>& log() const { return log_; }
  AeplNet& model() { return model_; }

 private:
  AeplNet model_;
  TrainConfig cfg_;
  const TrainingData& data_;
  SgdMomentum optimizer_;
  Rng rng_;
  int epoch_ = 0;
  double last_val_dice_ = 0.0;
  double last_grade_acc_ = 0.0;
  Checkpoint best_;
  std::vector<EpochLog> log_;
};

struct TrainResult {
  Checkpoint best;
  Checkpoint last;
  std::vector<EpochLog> log;
};

struct TrainOutputs {
  std::optional<std::filesystem::path> dir;  // best.ckpt, last.ckpt, train_log.jsonl
  std::function<void(const EpochLog&)> on_epoch;
};

TrainResult train(AeplNet model, const TrainingData& data, const TrainConfig& cfg, const TrainOutputs& outputs = {});

// ------------------------------------------------------------- evaluation --

/// Forces the predicted grades of a case list down to a target accuracy by
/// flipping correct predictions in a seeded order.
struct GradeCorruption {
  double target_accuracy = 0.6;
  std::uint64_t seed = 0;
};

struct CaseGrading {
  std::string case_id;
  Grade truth = Grade::LGG;
  GradePrompt predicted;  // classifier output (after corruption, if any)
  GradePrompt used;       // prompt given to the decoder
};

struct EvalOptions {
  EvalPromptMode prompt_mode = EvalPromptMode::Predicted;
  std::optional<GradeCorruption> corruption;
  bool compute_hd95 = true;
};

struct EvalResult {
  std::vector<CaseReport> reports;
  AggregateTable table;
  double grade_accuracy = 0.0;
  std::vector<CaseGrading> gradings;
};

/// Sliding-window inference over `cases` followed by Dice/HD95 scoring.
EvalResult evaluate_model(const AeplNet& model, const std::vector<Case>& cases, const EvalOptions& opts = {});

// ---------------------------------------------------------------- ablation --

inline const std::vector<double> kDefaultAlphaValues{0, 0.01, 0.1, 1, 10};

struct SweepRow {
  double alpha = 0.0;
  std::string alpha_text;
  EvalResult eval;
  TrainResult run;
  bool from_cache = false;
};

struct SweepOptions {
  /// Per-α run directories; a run whose checkpoint hash matches is reused.
  std::optional<std::filesystem::path> run_dir;
  EvalOptions eval;
  std::function<void(const std::string&)> progress;
};

std::vector<SweepRow> alpha_sweep(const ModelConfig& model_cfg, const TrainConfig& base, const TrainingData& data,
                                  const std::vector<Case>& test, const std::vector<double>& values,
                                  const SweepOptions& opts = {});

/// Table 2 layout: α column followed by the six metric columns.
std::string format_sweep_table(const std::vector<SweepRow>& rows);

/// Exact text for an α value as it should be echoed ("0.01", "10").
std::string format_alpha(double alpha);

}  // namespace aepl
