#pragma once

// Ablation ladder and one-at-a-time lambda sensitivity sweep. Each table
// entry trains from scratch per seed and scores the 15-subset grid on the
// test split; numbers are averaged over the seeds.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cdseg/config.hpp"
#include "cdseg/evaluation.hpp"

namespace cdseg {

struct RunScore {
  RegionDice dice;            // subset-grid column averages
  double avg = 0;             // macro over WT/TC/ET
  double val_full_wt = 0;     // WT Dice on the validation split, all modalities present
  double nde_probe_dice = 0;  // filled when probes are requested
  double bias_cluster_score = 0;
  double bias_cluster_score_untrained = 0;
};

struct AblationRow {
  std::string name;
  LossWeights lambdas;
  RunScore mean;                 // seed average
  std::vector<RunScore> per_seed;
};

struct AblationTable {
  std::vector<AblationRow> rows;
  std::string to_csv() const;
  std::string to_markdown() const;
  nlohmann::json to_json() const;
};

/// The six ladder configurations: baseline (seg only), then adding the
/// reconstruction, independence, region-causality, confusion and discrepancy
/// terms in that order; each added term takes its weight from `full`.
std::vector<std::pair<std::string, LossWeights>> ablation_ladder(const LossWeights& full);

struct ExperimentOptions {
  /// Restrict to these ladder row indices (0-based); empty = all six.
  std::vector<int> rows;
  bool probes = false;  // also run the NDE probe and bias clustering per run
  bool quiet = true;
};

/// Trains every selected configuration for each seed in config.eval.seeds;
/// runs live in `out/<row>/seed_<s>/`.
AblationTable ablate(const RunConfig& config, const std::filesystem::path& out,
                     const ExperimentOptions& options = {});

struct SweepRow {
  std::string coefficient;  // cvae, hsic, rc, conf, dis
  double value = 0;
  RunScore mean;
  bool is_default = false;
};

struct SweepTable {
  std::vector<SweepRow> rows;                               // 5 blocks x 3 values
  std::vector<std::pair<std::string, double>> ranges;       // max - min Avg per coefficient
  std::string to_csv() const;
  std::string to_markdown() const;
  nlohmann::json to_json() const;
};

/// Candidate values per coefficient of the sensitivity grid.
const std::vector<std::pair<std::string, std::vector<double>>>& sweep_grid();

SweepTable sweep_lambda(const RunConfig& config, const std::filesystem::path& out,
                        const ExperimentOptions& options = {});

/// Max - min of the Avg column within each coefficient block.
std::vector<std::pair<std::string, double>> sweep_ranges(const std::vector<SweepRow>& rows);

/// Trains one configuration for one seed and scores it on the test split.
RunScore train_and_score(const RunConfig& config, const std::filesystem::path& run_dir, bool probes, bool quiet);

}  // namespace cdseg
