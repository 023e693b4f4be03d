#include "cdseg/training.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numbers>
#include <sstream>

#include "cdseg/dataset.hpp"

namespace cdseg {

namespace fs = std::filesystem;
using torch::Tensor;
using nlohmann::json;

namespace {

constexpr std::uint64_t kTrainStream = 0x7EA1;

std::string epoch_name(int epoch) {
  std::ostringstream os;
  os << "epoch_" << std::setw(3) << std::setfill('0') << epoch << ".pt";
  return os.str();
}

std::vector<std::string> mask_names(const std::vector<Availability>& masks) {
  std::vector<std::string> out;
  for (const auto& m : masks) out.push_back(m.str());
  return out;
}

}  // namespace

Availability sample_modality_mask(double p, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw std::invalid_argument("dropout probability must be in [0, 1)");
  // Rejecting the all-dropped mask inflates the keep rate (8/15 at p = 0.5),
  // so each draw keeps with q where q / (1 - (1 - q)^4) = 1 - p; the
  // accepted masks then keep each modality with probability exactly 1 - p.
  static thread_local std::pair<double, double> cached{-1.0, 1.0};
  if (cached.first != p) {
    const double target = 1.0 - p;
    const double n = static_cast<double>(kAllModalities.size());
    double lo = 0.0, hi = 1.0;
    for (int i = 0; i < 200; ++i) {
      const double q = 0.5 * (lo + hi);
      (q / (1.0 - std::pow(1.0 - q, n)) < target ? lo : hi) = q;
    }
    cached = {p, p == 0.0 ? 1.0 : 0.5 * (lo + hi)};
  }
  const double drop = 1.0 - cached.second;
  for (;;) {
    Availability a;
    for (Modality m : kAllModalities) a.set(m, !rng.bernoulli(drop));
    if (!a.empty()) return a;
  }
}

Trainer::Trainer(CausalDisenSeg model, TrainConfig config)
    : model_(std::move(model)), config_(std::move(config)), rng_(derive_seed(config_.seed, kTrainStream)) {
  validate(config_);
  optimizer_ = std::make_unique<torch::optim::Adam>(
      model_->parameters(), torch::optim::AdamOptions(config_.learning_rate).weight_decay(config_.weight_decay));
}

void Trainer::set_learning_rate(double lr) {
  for (auto& group : optimizer_->param_groups()) {
    static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
  }
}

double Trainer::learning_rate() const {
  return static_cast<const torch::optim::AdamOptions&>(optimizer_->param_groups().front().options()).lr();
}

StepReport Trainer::train_step(const std::vector<const MultimodalSample*>& batch) {
  std::vector<Availability> masks;
  for (std::size_t i = 0; i < batch.size(); ++i) masks.push_back(sample_modality_mask(config_.dropout_p, rng_));
  return train_step(batch, masks);
}

StepReport Trainer::train_step(const std::vector<const MultimodalSample*>& batch,
                               const std::vector<Availability>& masks) {
  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
  model_->train();
  const LossWeights& l = config_.lambdas;
  const HeadSelection heads = HeadSelection::for_weights(l);
  const Tensor volumes = stack_volumes(batch, masks);
  const Tensor labels = stack_labels(batch);
  const auto rows = rows_for(masks);

  Tensor eps;
  if (heads.bias) {
    const int dim = model_->geometry().config.bias_dim;
    std::vector<float> draws(rows.size() * static_cast<std::size_t>(dim));
    for (auto& v : draws) v = static_cast<float>(rng_.normal());
    eps = torch::tensor(draws, torch::kFloat).reshape({static_cast<int64_t>(rows.size()), dim});
  }

  const TrainOutputs out = model_->forward(volumes, masks, eps, heads);
  losses::LossComponents parts;
  parts.seg = losses::seg_loss(out.seg_logits, labels);
  if (l.cvae > 0) {
    parts.cvae = losses::cvae_loss(out.inputs, out.reconstruction, out.posterior->mean, out.posterior->log_variance,
                                   config_.lambda_kl);
  }
  if (l.hsic > 0 && rows.size() >= 2) parts.hsic = losses::hsic(out.causal_vectors, out.posterior->sample);
  Tensor a_causal;
  if (heads.causality) a_causal = out.causality.squeeze(1);
  if (l.rc > 0) parts.rc = losses::rc_loss(a_causal, labels);
  if (l.conf > 0) parts.conf = losses::confusion_loss(out.counterfactual->logits);

  StepReport report;
  report.masks = masks;
  if (l.dis > 0) {
    const Tensor& y_bias = out.counterfactual->foreground;
    parts.dis = losses::discrepancy_loss(a_causal, y_bias);
    const auto g = torch::autograd::grad({parts.dis}, {a_causal, y_bias}, {}, /*retain_graph=*/true);
    const double ga = g[0].norm().item<double>(), gb = g[1].norm().item<double>();
    report.dis_causal_share = ga + gb > 0 ? ga / (ga + gb) : 0.5;
  }

  losses::TotalLoss total = losses::total_loss(parts, l);
  optimizer_->zero_grad();
  total.total.backward();
  optimizer_->step();
  report.bundle = std::move(total.bundle);
  return report;
}

double scheduled_learning_rate(const TrainConfig& c, int epoch) {
  if (c.schedule == "constant" || c.epochs <= 0) return c.learning_rate;
  return 0.5 * c.learning_rate * (1.0 + std::cos(std::numbers::pi * epoch / c.epochs));
}

void save_checkpoint(const fs::path& path, CausalDisenSeg& model, const RunConfig& config,
                     const CheckpointState& state, torch::optim::Adam* optimizer) {
  torch::serialize::OutputArchive ar;
  ar.write("schema_version", c10::IValue(int64_t{kCheckpointSchema}));
  ar.write("kind", c10::IValue(std::string("full")));
  ar.write("config", c10::IValue(to_json(config).dump()));
  ar.write("epoch", c10::IValue(int64_t{state.epoch}));
  ar.write("step", c10::IValue(state.step));
  ar.write("best_metric", c10::IValue(state.best_metric));
  ar.write("rng_state", c10::IValue(state.rng_state));
  torch::serialize::OutputArchive m;
  model->save(m);
  ar.write("model", m);
  if (optimizer) {
    torch::serialize::OutputArchive o;
    optimizer->save(o);
    ar.write("optimizer", o);
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  ar.save_to(tmp.string());
  fs::rename(tmp, path);
}

LoadedCheckpoint load_checkpoint(const fs::path& path) {
  if (!fs::exists(path)) throw std::invalid_argument("checkpoint not found: " + path.string());
  torch::serialize::InputArchive ar;
  ar.load_from(path.string());
  c10::IValue v;
  if (!ar.try_read("schema_version", v) || !v.isInt() || v.toInt() != kCheckpointSchema) {
    throw std::runtime_error(path.string() + ": checkpoint schema mismatch (expected version " +
                             std::to_string(kCheckpointSchema) + ")");
  }
  LoadedCheckpoint out;
  ar.read("kind", v);
  out.kind = v.toStringRef();
  ar.read("config", v);
  out.config = run_config_from_json(json::parse(v.toStringRef()));
  if (ar.try_read("epoch", v)) out.state.epoch = static_cast<int>(v.toInt());
  if (ar.try_read("step", v)) out.state.step = v.toInt();
  if (ar.try_read("best_metric", v)) out.state.best_metric = v.toDouble();
  if (ar.try_read("rng_state", v)) out.state.rng_state = v.toStringRef();
  const Geometry g{out.config.train.grid_shape, out.config.model};
  if (out.kind == "full") {
    CausalDisenSeg model(g.grid, g.config);
    torch::serialize::InputArchive m;
    ar.read("model", m);
    model->load(m);
    out.stream = model->causal();
    out.model = model;
  } else if (out.kind == "inference") {
    out.stream = CausalStream(g);
    torch::serialize::InputArchive c;
    ar.read("causal", c);
    out.stream->load(c);
  } else {
    throw std::runtime_error(path.string() + ": unknown checkpoint kind '" + out.kind + "'");
  }
  return out;
}

void load_optimizer_state(const fs::path& path, torch::optim::Adam& optimizer) {
  torch::serialize::InputArchive ar;
  ar.load_from(path.string());
  torch::serialize::InputArchive o;
  if (!ar.try_read("optimizer", o)) throw std::runtime_error(path.string() + " holds no optimizer state");
  optimizer.load(o);
}

void export_inference(const fs::path& checkpoint, const fs::path& out) {
  LoadedCheckpoint full = load_checkpoint(checkpoint);
  if (full.kind != "full") {
    throw std::runtime_error(checkpoint.string() + ": checkpoint schema mismatch (expected a full checkpoint, found '" +
                             full.kind + "')");
  }
  torch::serialize::OutputArchive ar;
  ar.write("schema_version", c10::IValue(int64_t{kCheckpointSchema}));
  ar.write("kind", c10::IValue(std::string("inference")));
  ar.write("config", c10::IValue(to_json(full.config).dump()));
  torch::serialize::OutputArchive c;
  full.stream->save(c);
  ar.write("causal", c);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  ar.save_to(out.string());
}

FitResult fit(const RunConfig& config, const fs::path& out, const FitOptions& options) {
  validate(config);
  const TrainConfig& tc = config.train;
  if (tc.dataset_path.empty()) throw std::invalid_argument("train.dataset_path is empty (pass --data)");
  if (!fs::exists(fs::path(tc.dataset_path) / "manifest.json")) {
    throw std::invalid_argument("dataset missing: no manifest.json under " + tc.dataset_path);
  }
  const DatasetManifest manifest = load_manifest(tc.dataset_path);
  if (!(manifest.grid_shape == tc.grid_shape)) {
    throw std::invalid_argument("dataset grid " + manifest.grid_shape.str() + " differs from train.grid_shape " +
                                tc.grid_shape.str());
  }
  torch::set_num_threads(tc.threads);
  const auto train = load_split(manifest, "train");
  const auto val = load_split(manifest, "val", tc.max_val_cases);
  if (train.empty()) throw std::invalid_argument("dataset has an empty train split");

  fs::create_directories(out);
  Trainer trainer(initialize_model(config), tc);
  CheckpointState state;
  FitResult result;
  if (options.resume) {
    LoadedCheckpoint ck = load_checkpoint(*options.resume);
    if (!ck.model) throw std::runtime_error("cannot resume from an inference checkpoint");
    torch::NoGradGuard no_grad;
    auto dst = trainer.model()->named_parameters();
    for (const auto& p : (*ck.model)->named_parameters()) dst[p.key()].copy_(p.value());
    load_optimizer_state(*options.resume, trainer.optimizer());
    state = ck.state;
    if (!state.rng_state.empty()) trainer.rng().restore(state.rng_state);
  }
  result.best_metric = state.best_metric;

  std::ofstream log(out / "train_log.jsonl", options.resume ? std::ios::app : std::ios::trunc);
  if (!log) throw std::runtime_error("cannot write " + (out / "train_log.jsonl").string());

  if (!options.resume) {
    state.rng_state = trainer.rng().state();
    save_checkpoint(out / "init.pt", trainer.model(), config, state);
    result.final_checkpoint = result.best_checkpoint = out / "init.pt";
  }
  if (tc.epochs == 0) return result;

  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = state.epoch; epoch < tc.epochs; ++epoch) {
    const double lr = scheduled_learning_rate(tc, epoch);
    trainer.set_learning_rate(lr);
    std::vector<std::size_t> perm = order;
    trainer.rng().shuffle(perm.begin(), perm.end());
    double seg_sum = 0;
    int steps = 0;
    for (std::size_t from = 0; from < perm.size(); from += static_cast<std::size_t>(tc.batch_size)) {
      std::vector<const MultimodalSample*> batch;
      for (std::size_t i = from; i < std::min(perm.size(), from + static_cast<std::size_t>(tc.batch_size)); ++i) {
        batch.push_back(&train[perm[i]]);
      }
      const StepReport r = trainer.train_step(batch);
      ++state.step;
      json line = r.bundle.to_json();
      line["step"] = state.step;
      line["epoch"] = epoch;
      line["lr"] = lr;
      line["masks"] = mask_names(r.masks);
      if (r.dis_causal_share) line["dis_causal_share"] = *r.dis_causal_share;
      log << line.dump() << '\n';
      seg_sum += r.bundle.seg;
      ++steps;
    }
    log.flush();
    state.epoch = epoch + 1;

    const bool last = state.epoch == tc.epochs;
    std::optional<double> metric;
    if (!val.empty() && (last || state.epoch % tc.validate_every == 0)) {
      SubsetGrid grid = evaluate_subsets(trainer.model()->causal(), val);
      metric = grid.macro();
      json entry{{"epoch", state.epoch}, {"validation", grid.to_json()}};
      log << entry.dump() << '\n';
      log.flush();
      result.history.push_back(entry);
      result.last_validation = std::move(grid);
      if (*metric > state.best_metric) {
        state.best_metric = *metric;
        state.rng_state = trainer.rng().state();
        save_checkpoint(out / "best.pt", trainer.model(), config, state);
      }
    }
    state.rng_state = trainer.rng().state();
    if (tc.checkpoint_every > 0 && state.epoch % tc.checkpoint_every == 0) {
      save_checkpoint(out / epoch_name(state.epoch), trainer.model(), config, state);
    }
    save_checkpoint(out / "last.pt", trainer.model(), config, state, &trainer.optimizer());
    if (!options.quiet) {
      std::cerr << "epoch " << state.epoch << "/" << tc.epochs << "  lr " << lr << "  seg " << seg_sum / steps;
      if (metric) std::cerr << "  val macro Dice " << *metric;
      std::cerr << '\n';
    }
  }
  result.final_checkpoint = out / "last.pt";
  result.best_metric = state.best_metric;
  result.best_checkpoint = fs::exists(out / "best.pt") ? out / "best.pt" : result.final_checkpoint;
  return result;
}

}  // namespace cdseg
