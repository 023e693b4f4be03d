#pragma once

// Optimization loop: per-sample modality dropout, the weighted objective,
// Adam with cosine annealing, checkpoints, and the pruned inference export.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "cdseg/config.hpp"
#include "cdseg/evaluation.hpp"
#include "cdseg/losses.hpp"
#include "cdseg/model.hpp"
#include "cdseg/phantom.hpp"
#include "cdseg/rng.hpp"

namespace cdseg {

inline constexpr int kCheckpointSchema = 1;

/// Keeps each modality with probability 1 - p; an all-dropped draw is rejected and redrawn.
Availability sample_modality_mask(double p, Rng& rng);

struct StepReport {
  losses::LossBundle bundle;
  // share of the discrepancy-loss gradient norm landing on the causality map
  // (the rest lands on the bias branch); absent when the term is skipped
  std::optional<double> dis_causal_share;
  std::vector<Availability> masks;
};

class Trainer {
 public:
  Trainer(CausalDisenSeg model, TrainConfig config);

  /// Samples masks and eps, runs the forward pass, assembles the objective,
  /// backpropagates and steps the optimizer. Throws losses::NonFiniteLoss.
  StepReport train_step(const std::vector<const MultimodalSample*>& batch);

  /// Same as train_step with fixed masks (no mask sampling).
  StepReport train_step(const std::vector<const MultimodalSample*>& batch, const std::vector<Availability>& masks);

  void set_learning_rate(double lr);
  double learning_rate() const;

  CausalDisenSeg& model() { return model_; }
  torch::optim::Adam& optimizer() { return *optimizer_; }
  Rng& rng() { return rng_; }
  const TrainConfig& config() const { return config_; }

 private:
  CausalDisenSeg model_;
  TrainConfig config_;
  std::unique_ptr<torch::optim::Adam> optimizer_;
  Rng rng_;
};

/// Cosine-annealed learning rate for `epoch` of `epochs` (constant schedule returns lr).
double scheduled_learning_rate(const TrainConfig& config, int epoch);

struct CheckpointState {
  int epoch = 0;           // epochs completed
  std::int64_t step = 0;   // optimizer steps taken
  double best_metric = -1;
  std::string rng_state;
};

void save_checkpoint(const std::filesystem::path& path, CausalDisenSeg& model, const RunConfig& config,
                     const CheckpointState& state, torch::optim::Adam* optimizer = nullptr);

struct LoadedCheckpoint {
  RunConfig config;
  std::string kind;  // "full" or "inference"
  CheckpointState state;
  std::optional<CausalDisenSeg> model;  // full checkpoints only
  CausalStream stream{nullptr};         // always set
};

/// Reads a full or pruned checkpoint; throws std::runtime_error on schema mismatch.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

/// Restores optimizer state saved with the checkpoint (for resuming).
void load_optimizer_state(const std::filesystem::path& path, torch::optim::Adam& optimizer);

/// Writes a checkpoint holding only the causal stream (encoder, fusion, segmentation decoder).
void export_inference(const std::filesystem::path& checkpoint, const std::filesystem::path& out);

struct FitResult {
  std::filesystem::path final_checkpoint;
  std::filesystem::path best_checkpoint;
  double best_metric = -1;              // validation macro Dice over the 15 subsets
  std::vector<nlohmann::json> history;  // one entry per validation
  std::optional<SubsetGrid> last_validation;
};

struct FitOptions {
  std::optional<std::filesystem::path> resume;
  bool quiet = false;
};

/// Trains per `config` on the dataset at config.train.dataset_path and writes
/// train_log.jsonl plus checkpoints into `out`.
FitResult fit(const RunConfig& config, const std::filesystem::path& out, const FitOptions& options = {});

}  // namespace cdseg
