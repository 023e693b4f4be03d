#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cdseg/types.hpp"

namespace cdseg {

/// Thrown for malformed or out-of-range configuration; the message names the field.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct PhantomConfig {
  int cases = 200;
  GridShape grid_shape{32, 32, 32};
  std::array<double, 3> split{0.7, 0.1, 0.2};  // train : val : test
  std::uint64_t master_seed = 1;
};

struct ModelConfig {
  int levels = 3;
  int base_width = 8;
  int bias_dim = 16;
  std::string bottleneck = "masked_mean_ca";
};

/// lambda_1..lambda_5 of the weighted objective.
struct LossWeights {
  double cvae = 0.1;
  double hsic = 0.1;
  double rc = 1.0;
  double conf = 0.5;
  double dis = 0.5;

  static LossWeights zeros() { return {0, 0, 0, 0, 0}; }
  std::array<double, 5> as_array() const { return {cvae, hsic, rc, conf, dis}; }
  bool operator==(const LossWeights&) const = default;
};

struct TrainConfig {
  LossWeights lambdas;
  double lambda_kl = 0.01;
  double learning_rate = 2e-4;
  double weight_decay = 1e-5;
  std::string schedule = "cosine";
  double dropout_p = 0.5;
  int epochs = 40;
  int batch_size = 4;
  std::uint64_t seed = 0;
  GridShape grid_shape{32, 32, 32};
  std::string dataset_path;
  int validate_every = 1;
  int checkpoint_every = 10;
  int max_val_cases = 0;  // 0 = whole validation split
  int threads = 1;
};

struct EvalConfig {
  int probe_epochs = 30;
  double probe_learning_rate = 1e-3;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  int heatmaps = 4;
};

struct RunConfig {
  PhantomConfig phantom;
  ModelConfig model;
  TrainConfig train;
  EvalConfig eval;
};

nlohmann::json to_json(const PhantomConfig& c);
nlohmann::json to_json(const ModelConfig& c);
nlohmann::json to_json(const LossWeights& c);
nlohmann::json to_json(const TrainConfig& c);
nlohmann::json to_json(const EvalConfig& c);
nlohmann::json to_json(const RunConfig& c);

/// Missing keys take defaults; unknown keys and invalid values throw ConfigError.
RunConfig run_config_from_json(const nlohmann::json& j);
PhantomConfig phantom_config_from_json(const nlohmann::json& j);
ModelConfig model_config_from_json(const nlohmann::json& j);
TrainConfig train_config_from_json(const nlohmann::json& j);

RunConfig load_run_config(const std::filesystem::path& path);

void validate(const PhantomConfig& c);
void validate(const ModelConfig& c);
void validate(const TrainConfig& c);
void validate(const EvalConfig& c);
void validate(const RunConfig& c);

}  // namespace cdseg
