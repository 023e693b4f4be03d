#include "cdseg/experiments.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include "cdseg/dataset.hpp"
#include "cdseg/training.hpp"

namespace cdseg {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fmt(double v, int precision = 2) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << v;
  return os.str();
}

// Value formatting for sweep labels: "0.05", "1", "0.7".
std::string short_value(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

RunScore average(const std::vector<RunScore>& runs) {
  RunScore m;
  for (const auto& r : runs) {
    m.dice.wt += r.dice.wt;
    m.dice.tc += r.dice.tc;
    m.dice.et += r.dice.et;
    m.avg += r.avg;
    m.val_full_wt += r.val_full_wt;
    m.nde_probe_dice += r.nde_probe_dice;
    m.bias_cluster_score += r.bias_cluster_score;
    m.bias_cluster_score_untrained += r.bias_cluster_score_untrained;
  }
  const double n = static_cast<double>(runs.size());
  m.dice = {m.dice.wt / n, m.dice.tc / n, m.dice.et / n};
  m.avg /= n;
  m.val_full_wt /= n;
  m.nde_probe_dice /= n;
  m.bias_cluster_score /= n;
  m.bias_cluster_score_untrained /= n;
  return m;
}

json score_json(const RunScore& s) {
  return {{"wt", s.dice.wt},
          {"tc", s.dice.tc},
          {"et", s.dice.et},
          {"avg", s.avg},
          {"val_full_wt", s.val_full_wt},
          {"nde_probe_dice", s.nde_probe_dice},
          {"bias_cluster_score", s.bias_cluster_score},
          {"bias_cluster_score_untrained", s.bias_cluster_score_untrained}};
}

double& coefficient(LossWeights& l, const std::string& name) {
  if (name == "cvae") return l.cvae;
  if (name == "hsic") return l.hsic;
  if (name == "rc") return l.rc;
  if (name == "conf") return l.conf;
  if (name == "dis") return l.dis;
  throw std::invalid_argument("unknown loss coefficient '" + name + "'");
}

std::vector<RunScore> run_seeds(const RunConfig& base, const LossWeights& lambdas, const fs::path& dir,
                                const ExperimentOptions& options) {
  std::vector<RunScore> out;
  for (std::uint64_t seed : base.eval.seeds) {
    RunConfig c = base;
    c.train.lambdas = lambdas;
    c.train.seed = seed;
    out.push_back(train_and_score(c, dir / ("seed_" + std::to_string(seed)), options.probes, options.quiet));
    if (!options.quiet) {
      std::cerr << dir.filename().string() << " seed " << seed << ": Avg " << out.back().avg << '\n';
    }
  }
  return out;
}

}  // namespace

namespace {

RunScore score_from_json(const json& j) {
  RunScore s;
  s.dice = {j.at("wt").get<double>(), j.at("tc").get<double>(), j.at("et").get<double>()};
  s.avg = j.at("avg").get<double>();
  s.val_full_wt = j.at("val_full_wt").get<double>();
  s.nde_probe_dice = j.at("nde_probe_dice").get<double>();
  s.bias_cluster_score = j.at("bias_cluster_score").get<double>();
  s.bias_cluster_score_untrained = j.at("bias_cluster_score_untrained").get<double>();
  return s;
}

}  // namespace

RunScore train_and_score(const RunConfig& config, const fs::path& run_dir, bool probes, bool quiet) {
  // a finished run leaves score.json; rerunning with the same config reuses it
  const fs::path cache = run_dir / "score.json";
  if (fs::exists(cache)) {
    std::ifstream in(cache);
    const json j = json::parse(in, nullptr, false);
    if (!j.is_discarded() && j.value("config", json()) == cdseg::to_json(config) && j.value("probes", false) >= probes) {
      return score_from_json(j.at("score"));
    }
  }
  FitOptions fo;
  fo.quiet = quiet;
  const FitResult fit_result = fit(config, run_dir, fo);
  LoadedCheckpoint ck = load_checkpoint(fit_result.best_checkpoint);
  const DatasetManifest manifest = load_manifest(config.train.dataset_path);
  const auto test = load_split(manifest, "test");
  const SubsetGrid grid = evaluate_subsets(ck.stream, test);
  RunScore s;
  s.dice = grid.average;
  s.avg = grid.macro();
  s.val_full_wt = evaluate_subsets(ck.stream, load_split(manifest, "val")).row(Availability::all()).dice.wt;
  if (probes) {
    const auto train = load_split(manifest, "train");
    ProbeOptions po;
    po.epochs = config.eval.probe_epochs;
    po.learning_rate = config.eval.probe_learning_rate;
    po.seed = config.train.seed;
    s.nde_probe_dice = nde_probe(*ck.model, train, test, po);
    s.bias_cluster_score = bias_cluster_score(*ck.model, test);
    CausalDisenSeg untrained = initialize_model(config);
    s.bias_cluster_score_untrained = bias_cluster_score(untrained, test);
  }
  std::ofstream(cache) << json{{"config", cdseg::to_json(config)}, {"probes", probes}, {"score", score_json(s)}}.dump(2)
                       << '\n';
  return s;
}

std::vector<std::pair<std::string, LossWeights>> ablation_ladder(const LossWeights& full) {
  std::vector<std::pair<std::string, LossWeights>> rows;
  LossWeights l = LossWeights::zeros();
  rows.emplace_back("Baseline (L_seg only)", l);
  l.cvae = full.cvae;
  rows.emplace_back("+ L_CVAE", l);
  l.hsic = full.hsic;
  rows.emplace_back("+ L_HSIC", l);
  l.rc = full.rc;
  rows.emplace_back("+ L_RC", l);
  l.conf = full.conf;
  rows.emplace_back("+ L_conf", l);
  l.dis = full.dis;
  rows.emplace_back("+ L_dis (full)", l);
  return rows;
}

AblationTable ablate(const RunConfig& config, const fs::path& out, const ExperimentOptions& options) {
  validate(config);
  const auto ladder = ablation_ladder(config.train.lambdas);
  std::vector<int> selected = options.rows;
  if (selected.empty()) selected = {0, 1, 2, 3, 4, 5};
  AblationTable table;
  for (int i : selected) {
    if (i < 0 || i >= static_cast<int>(ladder.size())) {
      throw std::invalid_argument("ablation row " + std::to_string(i) + " out of range");
    }
    AblationRow row;
    row.name = ladder[static_cast<std::size_t>(i)].first;
    row.lambdas = ladder[static_cast<std::size_t>(i)].second;
    row.per_seed = run_seeds(config, row.lambdas, out / ("row_" + std::to_string(i)), options);
    row.mean = average(row.per_seed);
    table.rows.push_back(std::move(row));
  }
  return table;
}

std::string AblationTable::to_csv() const {
  std::ostringstream os;
  os << "setting,lambda_cvae,lambda_hsic,lambda_rc,lambda_conf,lambda_dis,WT,TC,ET,Avg\n";
  for (const auto& r : rows) {
    os << '"' << r.name << '"' << ',' << r.lambdas.cvae << ',' << r.lambdas.hsic << ',' << r.lambdas.rc << ','
       << r.lambdas.conf << ',' << r.lambdas.dis << ',' << fmt(r.mean.dice.wt, 4) << ',' << fmt(r.mean.dice.tc, 4)
       << ',' << fmt(r.mean.dice.et, 4) << ',' << fmt(r.mean.avg, 4) << '\n';
  }
  return os.str();
}

std::string AblationTable::to_markdown() const {
  std::ostringstream os;
  os << "| Setting | L_CVAE | L_HSIC | L_RC | L_conf | L_dis |    WT |    TC |    ET |   Avg |\n";
  os << "|:--------|:------:|:------:|:----:|:------:|:-----:|------:|------:|------:|------:|\n";
  auto on = [](double w) { return w > 0 ? "✓" : "×"; };
  for (const auto& r : rows) {
    os << "| " << r.name << " | " << on(r.lambdas.cvae) << " | " << on(r.lambdas.hsic) << " | " << on(r.lambdas.rc)
       << " | " << on(r.lambdas.conf) << " | " << on(r.lambdas.dis) << " | " << std::setw(5) << fmt(r.mean.dice.wt)
       << " | " << std::setw(5) << fmt(r.mean.dice.tc) << " | " << std::setw(5) << fmt(r.mean.dice.et) << " | "
       << std::setw(5) << fmt(r.mean.avg) << " |\n";
  }
  return os.str();
}

json AblationTable::to_json() const {
  json rs = json::array();
  for (const auto& r : rows) {
    json seeds = json::array();
    for (const auto& s : r.per_seed) seeds.push_back(score_json(s));
    rs.push_back({{"setting", r.name}, {"lambdas", cdseg::to_json(r.lambdas)}, {"mean", score_json(r.mean)},
                  {"per_seed", seeds}});
  }
  return {{"rows", rs}};
}

const std::vector<std::pair<std::string, std::vector<double>>>& sweep_grid() {
  static const std::vector<std::pair<std::string, std::vector<double>>> grid{
      {"cvae", {0.05, 0.1, 0.2}}, {"hsic", {0.05, 0.1, 0.2}}, {"rc", {0.5, 1.0, 2.0}},
      {"conf", {0.3, 0.5, 0.7}},  {"dis", {0.3, 0.5, 0.7}},
  };
  return grid;
}

std::vector<std::pair<std::string, double>> sweep_ranges(const std::vector<SweepRow>& rows) {
  std::vector<std::pair<std::string, double>> out;
  std::map<std::string, std::pair<double, double>> mm;
  for (const auto& r : rows) {
    auto it = mm.find(r.coefficient);
    if (it == mm.end()) {
      mm.emplace(r.coefficient, std::make_pair(r.mean.avg, r.mean.avg));
      out.emplace_back(r.coefficient, 0.0);
    } else {
      it->second.first = std::min(it->second.first, r.mean.avg);
      it->second.second = std::max(it->second.second, r.mean.avg);
    }
  }
  for (auto& [name, range] : out) range = mm[name].second - mm[name].first;
  return out;
}

SweepTable sweep_lambda(const RunConfig& config, const fs::path& out, const ExperimentOptions& options) {
  validate(config);
  std::map<std::array<double, 5>, RunScore> cache;
  SweepTable table;
  for (const auto& [name, values] : sweep_grid()) {
    for (double v : values) {
      LossWeights l = config.train.lambdas;
      const bool is_default = coefficient(l, name) == v;
      coefficient(l, name) = v;
      const auto key = l.as_array();
      auto it = cache.find(key);
      if (it == cache.end()) {
        const auto runs = run_seeds(config, l, out / (name + "_" + short_value(v)), options);
        it = cache.emplace(key, average(runs)).first;
      }
      table.rows.push_back({name, v, it->second, is_default});
    }
  }
  table.ranges = sweep_ranges(table.rows);
  return table;
}

std::string SweepTable::to_csv() const {
  std::ostringstream os;
  os << "coefficient,value,default,WT,TC,ET,Avg\n";
  for (const auto& r : rows) {
    os << r.coefficient << ',' << r.value << ',' << (r.is_default ? 1 : 0) << ',' << fmt(r.mean.dice.wt, 4) << ','
       << fmt(r.mean.dice.tc, 4) << ',' << fmt(r.mean.dice.et, 4) << ',' << fmt(r.mean.avg, 4) << '\n';
  }
  return os.str();
}

std::string SweepTable::to_markdown() const {
  std::ostringstream os;
  os << "| Coefficient | Value |    WT |    TC |    ET |   Avg | Range (max−min Avg) |\n";
  os << "|:------------|------:|------:|------:|------:|------:|--------------------:|\n";
  std::map<std::string, double> range(ranges.begin(), ranges.end());
  std::string last;
  for (const auto& r : rows) {
    const bool first = r.coefficient != last;
    last = r.coefficient;
    os << "| " << (first ? "λ " + r.coefficient : std::string()) << " | " << short_value(r.value)
       << (r.is_default ? "*" : "") << " | " << std::setw(5) << fmt(r.mean.dice.wt) << " | " << std::setw(5)
       << fmt(r.mean.dice.tc) << " | " << std::setw(5) << fmt(r.mean.dice.et) << " | " << std::setw(5)
       << fmt(r.mean.avg) << " | " << (first ? fmt(range[r.coefficient]) : std::string()) << " |\n";
  }
  return os.str();
}

json SweepTable::to_json() const {
  json rs = json::array();
  for (const auto& r : rows) {
    rs.push_back({{"coefficient", r.coefficient}, {"value", r.value}, {"default", r.is_default},
                  {"mean", score_json(r.mean)}});
  }
  json rg = json::object();
  for (const auto& [name, v] : ranges) rg[name] = v;
  return {{"rows", rs}, {"ranges", rg}};
}

}  // namespace cdseg
