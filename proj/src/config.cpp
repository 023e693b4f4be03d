#include "cdseg/config.hpp"

#include <cmath>
#include <fstream>
#include <set>

namespace cdseg {
namespace {

using nlohmann::json;

json shape_json(GridShape s) { return json::array({s.d, s.h, s.w}); }

// Reads fields out of one JSON object, rejecting keys nobody asked for.
class FieldReader {
 public:
  FieldReader(const json& obj, std::string prefix) : obj_(obj), prefix_(std::move(prefix)) {
    if (!obj_.is_object()) throw ConfigError(where("") + " must be a JSON object");
  }

  template <typename T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    auto it = obj_.find(key);
    if (it == obj_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const json::exception&) {
      throw ConfigError(where(key) + " has the wrong type: " + it->dump());
    }
  }

  void read_shape(const char* key, GridShape& out) {
    seen_.insert(key);
    auto it = obj_.find(key);
    if (it == obj_.end()) return;
    if (!it->is_array() || (it->size() != 3 && it->size() != 2)) {
      throw ConfigError(where(key) + " must be [D,H,W] or [H,W]");
    }
    std::vector<std::int64_t> v;
    try {
      v = it->get<std::vector<std::int64_t>>();
    } catch (const json::exception&) {
      throw ConfigError(where(key) + " must contain integers");
    }
    for (auto x : v) {
      if (x <= 0) throw ConfigError(where(key) + " must contain positive integers");
    }
    out = v.size() == 2 ? GridShape{1, v[0], v[1]} : GridShape{v[0], v[1], v[2]};
  }

  const json* child(const char* key) {
    seen_.insert(key);
    auto it = obj_.find(key);
    return it == obj_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (auto it = obj_.begin(); it != obj_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError("unknown config field " + where(it.key()));
    }
  }

  std::string where(const std::string& key) const {
    if (key.empty()) return prefix_.empty() ? "config" : prefix_;
    return prefix_.empty() ? key : prefix_ + "." + key;
  }

 private:
  const json& obj_;
  std::string prefix_;
  std::set<std::string> seen_;
};

void require(bool ok, const std::string& field, const std::string& rule, const json& value) {
  if (!ok) throw ConfigError(field + " " + rule + ", got " + value.dump());
}

LossWeights lambdas_from_json(const json& j, const std::string& prefix) {
  LossWeights w;
  FieldReader r(j, prefix);
  r.read("cvae", w.cvae);
  r.read("hsic", w.hsic);
  r.read("rc", w.rc);
  r.read("conf", w.conf);
  r.read("dis", w.dis);
  r.finish();
  return w;
}

EvalConfig eval_config_from_json(const json& j) {
  EvalConfig c;
  FieldReader r(j, "eval");
  r.read("probe_epochs", c.probe_epochs);
  r.read("probe_learning_rate", c.probe_learning_rate);
  r.read("seeds", c.seeds);
  r.read("heatmaps", c.heatmaps);
  r.finish();
  return c;
}

}  // namespace

json to_json(const PhantomConfig& c) {
  return json{{"cases", c.cases},
              {"grid_shape", shape_json(c.grid_shape)},
              {"split", c.split},
              {"master_seed", c.master_seed}};
}

json to_json(const ModelConfig& c) {
  return json{{"levels", c.levels},
              {"base_width", c.base_width},
              {"bias_dim", c.bias_dim},
              {"bottleneck", c.bottleneck}};
}

json to_json(const LossWeights& c) {
  return json{{"cvae", c.cvae}, {"hsic", c.hsic}, {"rc", c.rc}, {"conf", c.conf}, {"dis", c.dis}};
}

json to_json(const TrainConfig& c) {
  return json{{"lambdas", to_json(c.lambdas)},
              {"lambda_kl", c.lambda_kl},
              {"learning_rate", c.learning_rate},
              {"weight_decay", c.weight_decay},
              {"schedule", c.schedule},
              {"dropout_p", c.dropout_p},
              {"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"seed", c.seed},
              {"grid_shape", shape_json(c.grid_shape)},
              {"dataset_path", c.dataset_path},
              {"validate_every", c.validate_every},
              {"checkpoint_every", c.checkpoint_every},
              {"max_val_cases", c.max_val_cases},
              {"threads", c.threads}};
}

json to_json(const EvalConfig& c) {
  return json{{"probe_epochs", c.probe_epochs},
              {"probe_learning_rate", c.probe_learning_rate},
              {"seeds", c.seeds},
              {"heatmaps", c.heatmaps}};
}

json to_json(const RunConfig& c) {
  return json{{"phantom", to_json(c.phantom)},
              {"model", to_json(c.model)},
              {"train", to_json(c.train)},
              {"eval", to_json(c.eval)}};
}

PhantomConfig phantom_config_from_json(const json& j) {
  PhantomConfig c;
  FieldReader r(j, "phantom");
  r.read("cases", c.cases);
  r.read_shape("grid_shape", c.grid_shape);
  r.read("split", c.split);
  r.read("master_seed", c.master_seed);
  r.finish();
  validate(c);
  return c;
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  FieldReader r(j, "model");
  r.read("levels", c.levels);
  r.read("base_width", c.base_width);
  r.read("bias_dim", c.bias_dim);
  r.read("bottleneck", c.bottleneck);
  r.finish();
  validate(c);
  return c;
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  FieldReader r(j, "train");
  if (const json* l = r.child("lambdas")) c.lambdas = lambdas_from_json(*l, "train.lambdas");
  r.read("lambda_kl", c.lambda_kl);
  r.read("learning_rate", c.learning_rate);
  r.read("weight_decay", c.weight_decay);
  r.read("schedule", c.schedule);
  r.read("dropout_p", c.dropout_p);
  r.read("epochs", c.epochs);
  r.read("batch_size", c.batch_size);
  r.read("seed", c.seed);
  r.read_shape("grid_shape", c.grid_shape);
  r.read("dataset_path", c.dataset_path);
  r.read("validate_every", c.validate_every);
  r.read("checkpoint_every", c.checkpoint_every);
  r.read("max_val_cases", c.max_val_cases);
  r.read("threads", c.threads);
  r.finish();
  validate(c);
  return c;
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  FieldReader r(j, "");
  if (const json* p = r.child("phantom")) c.phantom = phantom_config_from_json(*p);
  if (const json* m = r.child("model")) c.model = model_config_from_json(*m);
  if (const json* t = r.child("train")) c.train = train_config_from_json(*t);
  if (const json* e = r.child("eval")) c.eval = eval_config_from_json(*e);
  r.finish();
  validate(c);
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw ConfigError("malformed JSON in " + path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

void validate(const PhantomConfig& c) {
  require(c.cases > 0, "phantom.cases", "must be > 0", c.cases);
  double total = 0.0;
  for (double f : c.split) {
    require(std::isfinite(f) && f >= 0.0, "phantom.split", "entries must be finite and >= 0", c.split);
    total += f;
  }
  require(total > 0.0, "phantom.split", "must not be all zero", c.split);
  const auto s = c.grid_shape;
  const bool ok = s.planar() ? (s.h >= 16 && s.w >= 16) : (s.d >= 16 && s.h >= 16 && s.w >= 16);
  require(ok, "phantom.grid_shape", "dimensions must be >= 16 (depth 1 for planar)",
          shape_json(s));
}

void validate(const ModelConfig& c) {
  require(c.levels >= 1 && c.levels <= 5, "model.levels", "must be in [1,5]", c.levels);
  require(c.base_width >= 1, "model.base_width", "must be >= 1", c.base_width);
  require(c.bias_dim >= 1, "model.bias_dim", "must be >= 1", c.bias_dim);
  require(c.bottleneck == "masked_mean_ca", "model.bottleneck",
          "must be one of [\"masked_mean_ca\"]", c.bottleneck);
}

void validate(const TrainConfig& c) {
  const auto lam = c.lambdas.as_array();
  static constexpr std::array<const char*, 5> names = {"cvae", "hsic", "rc", "conf", "dis"};
  for (std::size_t i = 0; i < lam.size(); ++i) {
    require(std::isfinite(lam[i]) && lam[i] >= 0.0,
            std::string("train.lambdas.") + names[i] + " (lambda" + std::to_string(i + 1) + ")",
            "must be finite and >= 0", lam[i]);
  }
  require(std::isfinite(c.lambda_kl) && c.lambda_kl >= 0.0, "train.lambda_kl", "must be >= 0",
          c.lambda_kl);
  require(std::isfinite(c.learning_rate) && c.learning_rate > 0.0, "train.learning_rate",
          "must be > 0", c.learning_rate);
  require(std::isfinite(c.weight_decay) && c.weight_decay >= 0.0, "train.weight_decay",
          "must be >= 0", c.weight_decay);
  require(c.schedule == "cosine" || c.schedule == "constant", "train.schedule",
          "must be \"cosine\" or \"constant\"", c.schedule);
  require(c.dropout_p >= 0.0 && c.dropout_p < 1.0, "train.dropout_p", "must be in [0,1)",
          c.dropout_p);
  require(c.epochs >= 0, "train.epochs", "must be >= 0", c.epochs);
  require(c.batch_size >= 1, "train.batch_size", "must be >= 1", c.batch_size);
  require(c.validate_every >= 1, "train.validate_every", "must be >= 1", c.validate_every);
  require(c.checkpoint_every >= 1, "train.checkpoint_every", "must be >= 1", c.checkpoint_every);
  require(c.max_val_cases >= 0, "train.max_val_cases", "must be >= 0", c.max_val_cases);
  require(c.threads >= 1, "train.threads", "must be >= 1", c.threads);
}

void validate(const EvalConfig& c) {
  require(c.probe_epochs >= 1, "eval.probe_epochs", "must be >= 1", c.probe_epochs);
  require(std::isfinite(c.probe_learning_rate) && c.probe_learning_rate > 0.0,
          "eval.probe_learning_rate", "must be > 0", c.probe_learning_rate);
  require(!c.seeds.empty(), "eval.seeds", "must not be empty", c.seeds);
  require(c.heatmaps >= 0, "eval.heatmaps", "must be >= 0", c.heatmaps);
}

void validate(const RunConfig& c) {
  validate(c.phantom);
  validate(c.model);
  validate(c.train);
  validate(c.eval);
  require(c.train.grid_shape == c.phantom.grid_shape, "train.grid_shape",
          "must equal phantom.grid_shape", shape_json(c.train.grid_shape));
  const std::int64_t div = std::int64_t{1} << c.model.levels;
  const auto s = c.train.grid_shape;
  const bool divisible = (s.planar() || s.d % div == 0) && s.h % div == 0 && s.w % div == 0;
  require(divisible, "train.grid_shape",
          "must be divisible by 2^model.levels = " + std::to_string(div), shape_json(s));
}

}  // namespace cdseg
