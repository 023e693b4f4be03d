#include "testing.hpp"

#include <fstream>

#include "cdseg/config.hpp"

using namespace cdseg;
using nlohmann::json;

namespace {

std::string config_error(const json& j) {
  try {
    run_config_from_json(j);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("shipped defaults file equals the built-in defaults") {
  const RunConfig c = load_run_config(std::filesystem::path(CDSEG_SOURCE_DIR) / "configs" / "defaults.json");
  CHECK(to_json(c) == to_json(RunConfig{}));
}

TEST_CASE("defaults carry the published loss weights and optimizer settings") {
  const RunConfig c;
  CHECK(c.train.lambdas == LossWeights{0.1, 0.1, 1.0, 0.5, 0.5});
  CHECK(c.train.learning_rate == 2e-4);
  CHECK(c.train.weight_decay == 1e-5);
  CHECK(c.train.dropout_p == 0.5);
  CHECK(c.train.schedule == "cosine");
  CHECK(c.phantom.split == std::array<double, 3>{0.7, 0.1, 0.2});
}

TEST_CASE("json round trip and partial configs") {
  RunConfig c;
  c.train.lambdas.rc = 2.0;
  c.train.grid_shape = {1, 64, 64};
  c.phantom.grid_shape = {1, 64, 64};
  c.eval.seeds = {4, 5};
  CHECK(to_json(run_config_from_json(to_json(c))) == to_json(c));

  const RunConfig partial = run_config_from_json(json::parse(R"({"train": {"epochs": 3}})"));
  CHECK(partial.train.epochs == 3);
  CHECK(partial.train.batch_size == 4);
}

TEST_CASE("invalid configs name the offending field") {
  CHECK(config_error(json::parse(R"({"train": {"lambdas": {"rc": -1}}})")).find("train.lambdas.rc") !=
        std::string::npos);
  CHECK(config_error(json::parse(R"({"train": {"lambdas": {"rc": -1}}})")).find("lambda3") != std::string::npos);
  CHECK(config_error(json::parse(R"({"train": {"epoch": 3}})")).find("train.epoch") != std::string::npos);
  CHECK(config_error(json::parse(R"({"train": {"dropout_p": 1.0}})")).find("train.dropout_p") != std::string::npos);
  CHECK(config_error(json::parse(R"({"phantom": {"grid_shape": [8, 32, 32]}})")).find("phantom.grid_shape") !=
        std::string::npos);
  CHECK(config_error(json::parse(R"({"model": {"bottleneck": "max"}})")).find("model.bottleneck") !=
        std::string::npos);
  CHECK(config_error(json::parse(R"({"train": {"epochs": "many"}})")).find("train.epochs") != std::string::npos);
  CHECK_THROWS_AS(load_run_config("/nonexistent/config.json"), ConfigError);
}
