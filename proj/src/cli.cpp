#include "cdseg/cli.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <optional>
#include <sstream>

#include "cdseg/config.hpp"
#include "cdseg/dataset.hpp"
#include "cdseg/evaluation.hpp"
#include "cdseg/experiments.hpp"
#include "cdseg/report.hpp"
#include "cdseg/training.hpp"

namespace cdseg {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Options {
  std::string config;
  std::string out;
  std::string data;
  std::string checkpoint;
  std::optional<std::uint64_t> seed;
  bool overwrite = false;
  std::string grid_shape;
  std::optional<int> epochs;
  std::vector<int> rows;
  bool probes = false;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

RunConfig resolve_config(const Options& o) {
  RunConfig c;
  if (!o.config.empty()) {
    if (!fs::exists(o.config)) throw std::invalid_argument("config file not found: " + o.config);
    c = load_run_config(o.config);
  }
  if (!o.grid_shape.empty()) {
    const GridShape g = parse_grid_shape(o.grid_shape);
    c.phantom.grid_shape = g;
    c.train.grid_shape = g;
  }
  if (o.epochs) c.train.epochs = *o.epochs;
  if (!o.data.empty()) c.train.dataset_path = fs::absolute(o.data).lexically_normal().string();
  return c;
}

void require_dataset(const std::string& data) {
  if (data.empty()) throw std::invalid_argument("--data is required");
  if (!fs::exists(fs::path(data) / "manifest.json")) {
    throw std::invalid_argument("dataset missing: no manifest.json under " + data);
  }
}

// Empties `out` (with --overwrite) or refuses a non-empty one.
void prepare_out(const Options& o) {
  if (o.out.empty()) throw std::invalid_argument("--out is required");
  const fs::path out(o.out);
  if (fs::exists(out) && !fs::is_directory(out)) {
    throw std::invalid_argument("output path " + o.out + " exists and is not a directory");
  }
  if (!o.data.empty() && fs::exists(out) && fs::equivalent(out, o.data)) {
    throw std::invalid_argument("--out must differ from the dataset directory");
  }
  if (fs::exists(out) && !fs::is_empty(out)) {
    if (!o.overwrite) {
      throw std::invalid_argument("output directory " + o.out + " is not empty (pass --overwrite to replace it)");
    }
    for (const auto& e : fs::directory_iterator(out)) fs::remove_all(e.path());
  }
  fs::create_directories(out);
}

RunManifest start_manifest(const std::string& command, const RunConfig& c, std::uint64_t seed,
                           const std::string& data) {
  RunManifest m;
  m.command = command;
  m.config = to_json(c);
  m.seed = seed;
  if (!data.empty()) m.dataset_hash = dataset_hash(data);
  m.started = utc_timestamp();
  return m;
}

void finish_manifest(RunManifest& m, const fs::path& out, const std::vector<std::string>& outputs) {
  m.finished = utc_timestamp();
  m.outputs = outputs;
  m.write(out);
}

int cmd_generate(const Options& o, std::ostream& out) {
  RunConfig c = resolve_config(o);
  if (o.seed) c.phantom.master_seed = *o.seed;
  validate(c.phantom);
  prepare_out(o);
  RunManifest m = start_manifest("generate", c, c.phantom.master_seed, "");
  m.write(o.out);
  const DatasetManifest dm = generate_dataset(c.phantom, o.out, true);
  m.dataset_hash = dataset_hash(o.out);
  finish_manifest(m, o.out, {"manifest.json", "cases/"});
  out << "generated " << c.phantom.cases << " cases (" << dm.train.size() << " train / " << dm.val.size()
      << " val / " << dm.test.size() << " test) in " << o.out << "\ndataset hash " << m.dataset_hash << '\n';
  return kExitOk;
}

int cmd_train(const Options& o, std::ostream& out) {
  RunConfig c = resolve_config(o);
  if (o.seed) c.train.seed = *o.seed;
  validate(c);
  require_dataset(c.train.dataset_path);
  std::optional<fs::path> resume;
  if (!o.checkpoint.empty()) {
    if (!fs::exists(o.checkpoint)) throw std::invalid_argument("checkpoint not found: " + o.checkpoint);
    resume = fs::absolute(o.checkpoint);
    if (o.out.empty()) throw std::invalid_argument("--out is required");
    fs::create_directories(o.out);  // resuming continues in place
  } else {
    prepare_out(o);
  }
  torch::set_num_threads(c.train.threads);
  RunManifest m = start_manifest("train", c, c.train.seed, c.train.dataset_path);
  m.write(o.out);
  FitOptions fo;
  fo.resume = resume;
  const FitResult r = fit(c, o.out, fo);
  export_inference(r.best_checkpoint, fs::path(o.out) / "inference.pt");
  std::vector<std::string> outputs;
  for (const auto& e : fs::directory_iterator(o.out)) {
    if (e.path().filename() != kRunManifestFile) outputs.push_back(e.path().filename().string());
  }
  std::sort(outputs.begin(), outputs.end());
  finish_manifest(m, o.out, outputs);
  out << "best checkpoint " << r.best_checkpoint.string() << " (validation macro Dice " << r.best_metric << ")\n";
  return kExitOk;
}

int cmd_eval(const Options& o, std::ostream& out, std::ostream& err) {
  if (o.checkpoint.empty()) throw std::invalid_argument("--checkpoint is required");
  require_dataset(o.data);
  LoadedCheckpoint ck = load_checkpoint(o.checkpoint);
  RunConfig c = ck.config;
  if (!o.config.empty()) c.eval = resolve_config(o).eval;
  if (o.seed) c.train.seed = *o.seed;
  c.train.dataset_path = fs::absolute(o.data).lexically_normal().string();
  const DatasetManifest dm = load_manifest(o.data);
  if (!(dm.grid_shape == c.train.grid_shape)) {
    throw std::invalid_argument("dataset grid " + dm.grid_shape.str() + " differs from the checkpoint grid " +
                                c.train.grid_shape.str());
  }
  prepare_out(o);
  torch::set_num_threads(c.train.threads);
  RunManifest m = start_manifest("eval", c, c.train.seed, o.data);
  m.write(o.out);
  const fs::path dir(o.out);
  const auto test = load_split(dm, "test");
  const SubsetGrid grid = evaluate_subsets(ck.stream, test);
  write_text(dir / "subset_grid.csv", grid.to_csv());
  write_text(dir / kSubsetGridFile, grid.to_markdown());
  write_text(dir / "subset_grid.json", grid.to_json().dump(2) + "\n");
  std::vector<std::string> outputs{"subset_grid.csv", kSubsetGridFile, "subset_grid.json"};
  out << grid.to_markdown();
  if (ck.model) {
    const auto train = load_split(dm, "train");
    const DisentanglementReport rep = disentanglement_report(*ck.model, c, train, test);
    write_text(dir / kDisentanglementFile, rep.to_json().dump(2) + "\n");
    export_heatmaps(*ck.model, test, c.eval.heatmaps, dir / kHeatmapDir);
    outputs.emplace_back(kDisentanglementFile);
    outputs.emplace_back(std::string(kHeatmapDir) + "/");
    out << rep.to_json().dump(2) << '\n';
  } else {
    err << "note: inference checkpoint has no bias stream; disentanglement diagnostics skipped\n";
  }
  finish_manifest(m, o.out, outputs);
  return kExitOk;
}

RunConfig experiment_config(const Options& o) {
  RunConfig c = resolve_config(o);
  if (o.seed) {
    for (std::size_t i = 0; i < c.eval.seeds.size(); ++i) c.eval.seeds[i] = *o.seed + i;
  }
  validate(c);
  require_dataset(c.train.dataset_path);
  return c;
}

int cmd_ablate(const Options& o, std::ostream& out) {
  const RunConfig c = experiment_config(o);
  prepare_out(o);
  torch::set_num_threads(c.train.threads);
  RunManifest m = start_manifest("ablate", c, c.eval.seeds.front(), c.train.dataset_path);
  m.write(o.out);
  ExperimentOptions eo;
  eo.rows = o.rows;
  eo.probes = o.probes;
  eo.quiet = false;
  const AblationTable t = ablate(c, fs::path(o.out) / "runs", eo);
  const fs::path dir(o.out);
  write_text(dir / "ablation.csv", t.to_csv());
  write_text(dir / kAblationFile, t.to_markdown());
  write_text(dir / "ablation.json", t.to_json().dump(2) + "\n");
  finish_manifest(m, o.out, {"ablation.csv", kAblationFile, "ablation.json", "runs/"});
  out << t.to_markdown();
  return kExitOk;
}

int cmd_sweep(const Options& o, std::ostream& out) {
  const RunConfig c = experiment_config(o);
  prepare_out(o);
  torch::set_num_threads(c.train.threads);
  RunManifest m = start_manifest("sweep", c, c.eval.seeds.front(), c.train.dataset_path);
  m.write(o.out);
  ExperimentOptions eo;
  eo.probes = o.probes;
  eo.quiet = false;
  const SweepTable t = sweep_lambda(c, fs::path(o.out) / "runs", eo);
  const fs::path dir(o.out);
  write_text(dir / "sweep.csv", t.to_csv());
  write_text(dir / kSweepFile, t.to_markdown());
  write_text(dir / "sweep.json", t.to_json().dump(2) + "\n");
  finish_manifest(m, o.out, {"sweep.csv", kSweepFile, "sweep.json", "runs/"});
  out << t.to_markdown();
  return kExitOk;
}

int cmd_report(const Options& o, std::ostream& out, std::ostream& err) {
  if (o.out.empty()) throw std::invalid_argument("--out (the run directory) is required");
  const Report r = render_report(o.out);
  write_text(fs::path(o.out) / kReportFile, r.markdown);
  for (const auto& m : r.missing) err << "missing artifact: " << m << '\n';
  out << (fs::path(o.out) / kReportFile).string() << '\n';
  return kExitOk;
}

}  // namespace

int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Causality-guided disentanglement for missing-modality segmentation on synthetic phantoms", "cdseg"};
  app.require_subcommand(1);
  Options o;
  std::uint64_t seed = 0;
  int epochs = 0;

  auto common = [&](CLI::App* sub, bool with_data) {
    sub->add_option("--config", o.config, "JSON run configuration (missing keys take defaults)");
    sub->add_option("--out", o.out, "Output directory");
    if (with_data) sub->add_option("--data", o.data, "Dataset directory written by `generate`");
    sub->add_option("--seed", seed, "Seed all randomness of the command derives from");
    sub->add_flag("--overwrite", o.overwrite, "Replace a non-empty output directory");
    sub->add_option("--grid-shape", o.grid_shape, "Voxel grid, e.g. 32x32x32 or 96x96 (planar)");
  };
  CLI::App* gen = app.add_subcommand("generate", "Generate a phantom dataset");
  common(gen, false);
  CLI::App* train = app.add_subcommand("train", "Train a model");
  common(train, true);
  train->add_option("--epochs", epochs, "Override train.epochs");
  train->add_option("--checkpoint", o.checkpoint, "Resume from this checkpoint (last.pt)");
  CLI::App* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
  common(eval, true);
  eval->add_option("--checkpoint", o.checkpoint, "Full or inference checkpoint");
  CLI::App* abl = app.add_subcommand("ablate", "Train and score the ablation ladder");
  common(abl, true);
  abl->add_option("--epochs", epochs, "Override train.epochs");
  abl->add_option("--rows", o.rows, "Ladder rows to run (0-5); default all");
  abl->add_flag("--probes", o.probes, "Also run the NDE probe and bias clustering per run");
  CLI::App* swp = app.add_subcommand("sweep", "Train and score the loss-weight sensitivity grid");
  common(swp, true);
  swp->add_option("--epochs", epochs, "Override train.epochs");
  CLI::App* rep = app.add_subcommand("report", "Render report.md for a run directory");
  rep->add_option("--out", o.out, "Run directory")->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  if (!reversed.empty()) reversed.pop_back();  // program name
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    const auto subs = app.get_subcommands();
    out << (subs.empty() ? app.help() : subs.front()->help());
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  }
  for (CLI::App* sub : app.get_subcommands()) {
    if (sub->get_option_no_throw("--seed") && sub->count("--seed")) o.seed = seed;
    if (sub->get_option_no_throw("--epochs") && sub->count("--epochs")) o.epochs = epochs;
  }

  try {
    if (gen->parsed()) return cmd_generate(o, out);
    if (train->parsed()) return cmd_train(o, out);
    if (eval->parsed()) return cmd_eval(o, out, err);
    if (abl->parsed()) return cmd_ablate(o, out);
    if (swp->parsed()) return cmd_sweep(o, out);
    if (rep->parsed()) return cmd_report(o, out, err);
    err << "error: no command given\n";
    return kExitValidation;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const nlohmann::json::exception& e) {
    err << "error: malformed JSON: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "runtime failure: " << e.what() << '\n';
    return kExitRuntime;
  }
}

}  // namespace cdseg
