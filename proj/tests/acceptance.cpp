// Acceptance checks, one PASS/FAIL line per criterion.
//   acceptance --fast            criteria 1-7, 9, 10 (minutes)
//   acceptance --training <dir>  criterion 8: the end-to-end phantom study
//                                (hours on one CPU; finished runs are reused)

#include <algorithm>
#include <array>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cdseg/config.hpp"
#include "cdseg/dataset.hpp"
#include "cdseg/evaluation.hpp"
#include "cdseg/experiments.hpp"
#include "cdseg/losses.hpp"
#include "cdseg/model.hpp"
#include "cdseg/report.hpp"
#include "cdseg/training.hpp"
#include "helpers.hpp"
#include "oracles.hpp"

using namespace cdseg;
using namespace cdseg::losses;
namespace fs = std::filesystem;
using nlohmann::json;
using torch::Tensor;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
  std::vector<std::string> failed_parts;  // e.g. "8b"
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

std::string num(double v) {
  std::ostringstream os;
  os << std::setprecision(4) << v;
  return os.str();
}

double val(const Tensor& t) { return t.item<double>(); }

double max_abs(const Tensor& a, const Tensor& b) { return (a - b).abs().max().item<double>(); }

// Every file under root, in path order, folded into one git-style blob hash.
std::string tree_checksum(const fs::path& root) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) files.push_back(fs::relative(e.path(), root));
  }
  std::sort(files.begin(), files.end());
  std::string listing;
  for (const auto& f : files) {
    std::ifstream in(root / f, std::ios::binary);
    listing += f.generic_string() + ' ' + git_blob_sha1({std::istreambuf_iterator<char>(in), {}}) + '\n';
  }
  return git_blob_sha1(listing);
}

std::vector<json> read_log(const fs::path& p) {
  std::ifstream in(p);
  std::vector<json> out;
  for (std::string line; std::getline(in, line);) out.push_back(json::parse(line));
  return out;
}

// Small corpus and full-size network at 16^3 for the fast training checks.
RunConfig small_run(const fs::path& data) {
  RunConfig c;
  c.phantom.cases = 25;
  c.phantom.grid_shape = {16, 16, 16};
  c.phantom.split = {20, 3, 2};
  c.train.grid_shape = c.phantom.grid_shape;
  c.train.learning_rate = 2e-3;
  c.train.batch_size = 4;
  c.train.dataset_path = data.string();
  c.train.threads = 1;
  return c;
}

fs::path fresh_dir(const fs::path& p) {
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// ---- 1: loss oracles ----

Outcome loss_oracles() {
  const auto t0 = Clock::now();
  double seg = 0, cvae = 0, hsic_err = 0, rc = 0, conf = 0, dis = 0;
  for (std::uint64_t s = 0; s < 5; ++s) {
    const std::uint64_t k = 1000 + 10 * s;
    const Tensor z = testutil::normal_tensor({2, 4, 4, 4, 4}, k, 2.0);
    const Tensor y = testutil::label_tensor({2, 4, 4, 4}, k + 1);
    seg = std::max(seg, std::fabs(val(seg_loss(z, y)) - oracle::oracle_seg(z, y)));

    const Tensor x = testutil::normal_tensor({3, 1, 4, 4, 4}, k + 2);
    const Tensor xh = testutil::normal_tensor({3, 1, 4, 4, 4}, k + 3);
    const Tensor mu = testutil::normal_tensor({3, 6}, k + 4);
    const Tensor lv = testutil::normal_tensor({3, 6}, k + 5, 0.5);
    cvae = std::max(cvae, std::fabs(val(cvae_loss(x, xh, mu, lv, 0.01)) - oracle::oracle_cvae(x, xh, mu, lv, 0.01)));

    const Tensor c = testutil::normal_tensor({9 + static_cast<int64_t>(s), 5}, k + 6);
    const Tensor b = testutil::normal_tensor({9 + static_cast<int64_t>(s), 3}, k + 7) + 0.3 * c.slice(1, 0, 3);
    hsic_err = std::max(hsic_err, std::fabs(val(hsic(c, b)) - oracle::oracle_hsic(c, b)));

    const Tensor a = testutil::uniform_tensor({2, 4, 4, 4}, k + 8, 0.01, 0.99);
    rc = std::max(rc, std::fabs(val(rc_loss(a, y)) - oracle::oracle_rc(a, y)));
    conf = std::max(conf, std::fabs(val(confusion_loss(z)) - oracle::oracle_conf(z)));
    const Tensor yb = testutil::uniform_tensor({2, 4, 4, 4}, k + 9, 0.0, 1.0);
    dis = std::max(dis, std::fabs(val(discrepancy_loss(a, yb)) - oracle::oracle_dis(a, yb)));
  }
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = seg < 1e-6 && cvae < 1e-6 && rc < 1e-6 && conf < 1e-6 && dis < 1e-6 && hsic_err < 1e-8 && secs < 60;
  o.detail = "max |err| seg " + num(seg) + ", cvae " + num(cvae) + ", rc " + num(rc) + ", conf " + num(conf) +
             ", dis " + num(dis) + " (tol 1e-6); hsic " + num(hsic_err) + " (tol 1e-8); " + num(secs) + " s (< 60)";
  return o;
}

// ---- 2: finite-difference gradients ----

Outcome gradients() {
  const auto t0 = Clock::now();
  using testutil::grad_error;
  std::vector<std::pair<std::string, double>> errs;
  {
    const Tensor y = testutil::label_tensor({2, 3, 3, 3}, 81);
    errs.emplace_back("seg", grad_error([&](const Tensor& z) { return seg_loss(z, y); },
                                        testutil::normal_tensor({2, 4, 3, 3, 3}, 82)));
  }
  {
    const Tensor x = testutil::uniform_tensor({2, 1, 3, 3, 3}, 83, 1.0, 2.0);
    const Tensor xh = testutil::uniform_tensor({2, 1, 3, 3, 3}, 84, -2.0, -1.0);
    const Tensor mu = testutil::normal_tensor({2, 5}, 85);
    const Tensor lv = testutil::normal_tensor({2, 5}, 86, 0.5);
    double e = grad_error([&](const Tensor& t) { return cvae_loss(t, xh, mu, lv, 0.3); }, x);
    e = std::max(e, grad_error([&](const Tensor& t) { return cvae_loss(x, t, mu, lv, 0.3); }, xh));
    e = std::max(e, grad_error([&](const Tensor& t) { return cvae_loss(x, xh, t, lv, 0.3); }, mu));
    e = std::max(e, grad_error([&](const Tensor& t) { return cvae_loss(x, xh, mu, t, 0.3); }, lv));
    errs.emplace_back("cvae", e);
  }
  {
    const Tensor c = testutil::normal_tensor({10, 4}, 87);
    const Tensor b = testutil::normal_tensor({10, 3}, 88) + 0.5 * c.slice(1, 0, 3);
    const Bandwidths bw{median_bandwidth(c), median_bandwidth(b)};
    errs.emplace_back("hsic", std::max(grad_error([&](const Tensor& t) { return hsic(t, b, bw); }, c),
                                       grad_error([&](const Tensor& t) { return hsic(c, t, bw); }, b)));
  }
  {
    const Tensor y = testutil::label_tensor({2, 3, 3, 3}, 89);
    errs.emplace_back("rc", grad_error([&](const Tensor& a) { return rc_loss(a, y); },
                                       testutil::uniform_tensor({2, 3, 3, 3}, 90, 0.05, 0.95)));
  }
  errs.emplace_back("conf", grad_error([](const Tensor& z) { return confusion_loss(z); },
                                       testutil::normal_tensor({2, 4, 3, 3, 3}, 91)));
  {
    const Tensor a = testutil::uniform_tensor({2, 3, 3, 3}, 92, 0.1, 1.0);
    const Tensor y = testutil::uniform_tensor({2, 3, 3, 3}, 93, 0.1, 1.0);
    errs.emplace_back("dis", std::max(grad_error([&](const Tensor& t) { return discrepancy_loss(t, y); }, a),
                                      grad_error([&](const Tensor& t) { return discrepancy_loss(a, t); }, y)));
  }
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = secs < 300;
  for (const auto& [name, e] : errs) {
    o.pass = o.pass && e < 1e-4;
    o.detail += name + " " + num(e) + ", ";
  }
  o.detail = "relative error " + o.detail + "(tol 1e-4); " + num(secs) + " s (< 300)";
  return o;
}

// ---- 3: HSIC behaviour ----

Outcome hsic_behaviour() {
  const auto t0 = Clock::now();
  const Tensor c = testutil::normal_tensor({64, 8}, 41);
  const Tensor b = testutil::normal_tensor({64, 8}, 42);
  const double constant = val(hsic(torch::full({64, 8}, 0.3, torch::kDouble), b));
  const Tensor c1 = testutil::normal_tensor({64, 1}, 41);
  const Tensor b1 = testutil::normal_tensor({64, 1}, 42);
  const double ratio = val(hsic(c1, c1)) / val(hsic(c1, b1));
  const bool symmetric = val(hsic(c, b)) == val(hsic(b, c));
  std::vector<int64_t> perm(64);
  for (int64_t i = 0; i < 64; ++i) perm[static_cast<std::size_t>(i)] = i;
  Rng rng(5);
  rng.shuffle(perm.begin(), perm.end());
  const Tensor idx = torch::tensor(perm, torch::kLong);
  const bool invariant = val(hsic(c.index_select(0, idx), b.index_select(0, idx))) == val(hsic(c, b));
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = constant == 0.0 && ratio >= 10.0 && symmetric && invariant && secs < 60;
  o.detail = "constant " + num(constant) + " (== 0), dependent/independent " + num(ratio) +
             " (>= 10, N=64, d=1), symmetric " + (symmetric ? "exact" : "NO") + ", paired permutation " +
             (invariant ? "exact" : "NO") + "; " + num(secs) + " s (< 60)";
  return o;
}

// ---- 4 and 5: logged additivity over a 50-step run, then pruning parity ----

Outcome additivity(const RunConfig& c, const fs::path& run) {
  int steps = 0, exact = 0;
  for (const auto& line : read_log(run / "train_log.jsonl")) {
    if (!line.contains("step")) continue;
    ++steps;
    const auto bundle = LossBundle::from_json(line);
    exact += bundle.total ==
             weighted_sum(bundle.seg, bundle.cvae, bundle.hsic, bundle.rc, bundle.conf, bundle.dis, c.train.lambdas);
  }
  Outcome o;
  o.pass = steps == 50 && exact == steps;
  o.detail = std::to_string(exact) + " of " + std::to_string(steps) + " logged steps bit-exact (need 50 of 50)";
  return o;
}

Outcome pruning(const fs::path& run, GridShape g) {
  export_inference(run / "best.pt", run / "inference.pt");
  auto full = load_checkpoint(run / "best.pt");
  auto pruned = load_checkpoint(run / "inference.pt");
  full.stream->eval();
  pruned.stream->eval();
  torch::NoGradGuard no_grad;
  Rng rng(2024);
  double worst = 0;
  for (int i = 0; i < 20; ++i) {
    torch::manual_seed(500 + static_cast<std::uint64_t>(i));
    const Tensor v = torch::randn({2, kNumModalities, g.d, g.h, g.w});
    const std::vector<Availability> av{sample_modality_mask(0.5, rng), sample_modality_mask(0.5, rng)};
    worst = std::max(worst, max_abs(full.stream->forward(v, av), pruned.stream->forward(v, av)));
  }
  Outcome o;
  o.pass = worst == 0.0 && pruned.kind == "inference" && !pruned.model;
  o.detail = "max |full - pruned| over 20 random inputs/masks = " + num(worst) + " (== 0); inference file " +
             std::to_string(fs::file_size(run / "inference.pt")) + " B vs full " +
             std::to_string(fs::file_size(run / "best.pt")) + " B";
  return o;
}

// ---- 6: sentinel independence ----

Outcome sentinels() {
  const GridShape g{16, 16, 16};
  torch::manual_seed(61);
  ModelConfig mc;
  CausalDisenSeg model(g, mc);
  model->eval();
  const Tensor v = torch::randn({2, kNumModalities, g.d, g.h, g.w});
  const std::vector<Availability> av{Availability::of({Modality::T1ce, Modality::FLAIR}), Availability::all()};
  const auto rows = rows_for(av);
  const auto n = static_cast<int64_t>(rows.size());
  const Tensor eps0 = torch::zeros({n, mc.bias_dim});
  const auto base = model->forward(v, av, eps0);

  double seg_moved = 0;  // by any b_m
  for (int64_t r = 0; r < n; ++r) {
    Tensor eps = eps0.clone();
    eps[r] = 1e3;
    seg_moved = std::max(seg_moved, max_abs(model->forward(v, av, eps).seg_logits, base.seg_logits));
  }
  double cf_moved = 0;  // by the causal encoder
  double seg_changed = 0;
  {
    CausalDisenSeg perturbed(g, mc);
    torch::NoGradGuard no_grad;
    const auto src = model->named_parameters();
    for (auto& p : perturbed->named_parameters()) p.value().copy_(src[p.key()]);
    for (auto& p : perturbed->bias_stream_parameters()) p.add_(torch::randn_like(p));
    seg_moved = std::max(seg_moved, max_abs(perturbed->forward(v, av, eps0).seg_logits, base.seg_logits));
    for (auto& p : perturbed->named_parameters()) p.value().copy_(src[p.key()]);
    for (auto& p : perturbed->causal()->parameters()) p.add_(torch::randn_like(p));
    const auto moved = perturbed->forward(v, av, eps0);
    cf_moved = max_abs(moved.counterfactual->logits, base.counterfactual->logits);
    seg_changed = max_abs(moved.seg_logits, base.seg_logits);
  }
  // structural check: no autograd path across the streams
  model->train();
  const auto out = model->forward(v, av, torch::randn({n, mc.bias_dim}));
  bool seg_path = false, cf_path = false;
  for (const auto& gr : torch::autograd::grad({out.seg_logits.sum()}, model->bias_stream_parameters(), {}, true,
                                              false, true)) {
    seg_path = seg_path || gr.defined();
  }
  for (const auto& gr : torch::autograd::grad({out.counterfactual->logits.sum()}, model->causal()->parameters(), {},
                                              true, false, true)) {
    cf_path = cf_path || gr.defined();
  }
  Outcome o;
  o.pass = seg_moved == 0.0 && cf_moved == 0.0 && seg_changed > 0.0 && !seg_path && !cf_path;
  o.detail = "seg logits moved by b_m / bias stream " + num(seg_moved) + " (== 0); counterfactual moved by c_m " +
             num(cf_moved) + " (== 0); control: seg moved by c_m " + num(seg_changed) + " (> 0); gradient paths " +
             (seg_path || cf_path ? "PRESENT" : "none");
  return o;
}

// ---- 7: dropout statistics ----

Outcome dropout() {
  Rng rng(77);
  const int n = 100000;
  std::array<int, kNumModalities> kept{};
  int empty = 0;
  for (int i = 0; i < n; ++i) {
    const auto m = sample_modality_mask(0.5, rng);
    empty += m.empty();
    for (auto mod : kAllModalities) kept[static_cast<std::size_t>(index_of(mod))] += m.has(mod);
  }
  Outcome o;
  o.pass = empty == 0;
  o.detail = "keep-rate";
  for (auto mod : kAllModalities) {
    const double rate = static_cast<double>(kept[static_cast<std::size_t>(index_of(mod))]) / n;
    o.pass = o.pass && std::fabs(rate - 0.5) <= 0.01;
    o.detail += std::string(" ") + std::string(modality_name(mod)) + " " + num(rate);
  }
  o.detail += " (0.5 +- 0.01, 1e5 draws); empty masks " + std::to_string(empty) + " (== 0)";
  return o;
}

// ---- 9: harness shape ----

Outcome harness(const fs::path& data, const fs::path& work) {
  RunConfig c = small_run(data);
  c.model.levels = 2;
  c.model.base_width = 4;
  c.model.bias_dim = 4;
  c.train.epochs = 1;
  c.eval.seeds = {0};

  const auto test = load_split(load_manifest(data), "test");
  torch::manual_seed(9);
  CausalStream stream(Geometry{c.train.grid_shape, c.model});
  const SubsetGrid grid = evaluate_subsets(stream, test);
  bool grid_ok = grid.rows.size() == 15;
  for (std::size_t i = 0; i < grid.rows.size() && grid_ok; ++i) grid_ok = grid.rows[i].mask == subset_grid_masks()[i];
  grid_ok = grid_ok && grid.to_json()["rows"][0].size() >= 4;  // mask + WT/TC/ET

  const AblationTable ladder = ablate(c, work / "ablate");
  bool ladder_ok = ladder.rows.size() == 6;
  const auto expected = ablation_ladder(c.train.lambdas);
  for (std::size_t i = 0; i < ladder.rows.size() && ladder_ok; ++i) {
    ladder_ok = ladder.rows[i].name == expected[i].first && ladder.rows[i].lambdas == expected[i].second;
  }

  const SweepTable sweep = sweep_lambda(c, work / "sweep");
  bool sweep_ok = sweep.rows.size() == 15 && sweep.ranges.size() == 5;
  for (std::size_t k = 0; k < sweep.ranges.size() && sweep_ok; ++k) {
    double lo = 1e300, hi = -1e300;
    for (const auto& r : sweep.rows) {
      if (r.coefficient != sweep.ranges[k].first) continue;
      lo = std::min(lo, r.mean.avg);
      hi = std::max(hi, r.mean.avg);
    }
    sweep_ok = sweep.ranges[k].second == hi - lo;
  }
  Outcome o;
  o.pass = grid_ok && ladder_ok && sweep_ok;
  o.detail = "subset grid " + std::to_string(grid.rows.size()) + " rows x WT/TC/ET " + (grid_ok ? "ok" : "BAD") +
             "; ablation " + std::to_string(ladder.rows.size()) + " rows " + (ladder_ok ? "ok" : "BAD") + "; sweep " +
             std::to_string(sweep.rows.size()) + " settings, " + std::to_string(sweep.ranges.size()) +
             " exact max-min ranges " + (sweep_ok ? "ok" : "BAD");
  return o;
}

// ---- 10: determinism ----

Outcome determinism(const RunConfig& base, const fs::path& work) {
  RunConfig c = base;
  c.train.epochs = 2;
  const auto a = fit(c, fresh_dir(work / "fit_a"), {std::nullopt, true});
  const auto b = fit(c, fresh_dir(work / "fit_b"), {std::nullopt, true});
  const bool same_fit = a.last_validation && b.last_validation &&
                        a.last_validation->to_json() == b.last_validation->to_json() && a.history == b.history;

  generate_dataset(c.phantom, fresh_dir(work / "gen_a"), true);
  generate_dataset(c.phantom, fresh_dir(work / "gen_b"), true);
  const std::string ha = tree_checksum(work / "gen_a"), hb = tree_checksum(work / "gen_b");
  Outcome o;
  o.pass = same_fit && ha == hb;
  o.detail = std::string("two single-threaded fits: validation ") + (same_fit ? "identical" : "DIFFERENT") +
             " (best " + num(a.best_metric) + " / " + num(b.best_metric) + "); regenerated dataset checksum " +
             ha.substr(0, 12) + (ha == hb ? " == " : " != ") + hb.substr(0, 12);
  return o;
}

// ---- 8: end-to-end phantom study ----

std::vector<std::pair<int, Outcome>> training_study(const fs::path& dir) {
  RunConfig c = load_run_config(fs::path(CDSEG_SOURCE_DIR) / "configs" / "phantom_calibrated.json");
  const fs::path data = fs::absolute(dir / "data").lexically_normal();
  if (!fs::exists(data / "manifest.json") ||
      load_manifest(data).config != cdseg::to_json(c.phantom)) {
    generate_dataset(c.phantom, data, true);
  }
  c.train.dataset_path = data.string();
  ExperimentOptions options;
  options.rows = {0, 3, 5};
  options.probes = true;
  options.quiet = false;
  const auto t0 = Clock::now();
  const AblationTable table = ablate(c, dir / "ablation", options);
  std::ofstream(dir / "ablation.json") << table.to_json().dump(2) << '\n';
  std::ofstream(dir / "ablation.md") << table.to_markdown();
  const auto& baseline = table.rows[0].mean;
  const auto& no_cf = table.rows[1].mean;
  const auto& full = table.rows[2].mean;

  Outcome o;
  const std::pair<const char*, bool> parts[] = {
      {"8a", full.val_full_wt > 70.0},
      {"8b", full.avg - baseline.avg >= 2.0},
      {"8c", full.bias_cluster_score > full.bias_cluster_score_untrained},
      {"8d", full.nde_probe_dice <= no_cf.nde_probe_dice},
  };
  for (const auto& [name, ok] : parts) {
    if (!ok) o.failed_parts.emplace_back(name);
  }
  o.pass = o.failed_parts.empty();
  std::ostringstream d;
  d << "(a) full-modality val WT " << num(full.val_full_wt) << " (> 70); (b) Avg full " << num(full.avg)
    << " - baseline " << num(baseline.avg) << " = " << num(full.avg - baseline.avg) << " (>= 2); (c) bias cluster "
    << num(full.bias_cluster_score) << " > untrained " << num(full.bias_cluster_score_untrained) << "; (d) NDE probe "
    << num(full.nde_probe_dice) << " <= no-counterfactual " << num(no_cf.nde_probe_dice) << "; seeds "
    << c.eval.seeds.size() << ", " << c.train.epochs << " epochs, " << num(seconds_since(t0) / 60) << " min";
  o.detail = d.str();
  return {{8, o}};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  bool fast = false;
  std::string training;
  std::string work = (fs::temp_directory_path() / "cdseg_acceptance").string();
  app.add_flag("--fast", fast, "Criteria 1-7, 9 and 10");
  app.add_option("--training", training, "Run criterion 8 with results under this directory");
  app.add_option("--work", work, "Scratch directory for the fast checks");
  std::vector<std::string> known_red;
  app.add_option("--known-red", known_red,
                 "Sub-criteria (e.g. 8b) still reported as FAIL but not counted against the exit status");
  CLI11_PARSE(app, argc, argv);
  if (!fast && training.empty()) fast = true;
  torch::set_num_threads(1);

  std::vector<std::pair<int, Outcome>> results;
  auto record = [&](int id, const std::function<Outcome()>& check) {
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    std::cout << "criterion " << std::setw(2) << id << ": " << (o.pass ? "PASS" : "FAIL") << "  " << o.detail;
    if (!o.failed_parts.empty()) {
      std::cout << "  [failed:";
      for (const auto& p : o.failed_parts) {
        const bool known = std::find(known_red.begin(), known_red.end(), p) != known_red.end();
        std::cout << ' ' << p << (known ? " (known red)" : "");
      }
      std::cout << ']';
    }
    std::cout << std::endl;
    results.emplace_back(id, o);
  };

  if (fast) {
    const fs::path root = fresh_dir(work);
    const fs::path data = root / "data";
    RunConfig c = small_run(data);
    generate_dataset(c.phantom, data, true);
    record(1, loss_oracles);
    record(2, gradients);
    record(3, hsic_behaviour);
    RunConfig fifty = c;
    fifty.train.epochs = 10;  // 20 training cases / batch 4 = 5 steps per epoch
    const fs::path run = root / "run50";
    bool trained = false;
    record(4, [&] {
      fit(fifty, fresh_dir(run), {std::nullopt, true});
      trained = true;
      return additivity(fifty, run);
    });
    record(5, [&] { return trained ? pruning(run, c.train.grid_shape) : Outcome{false, "no trained run"}; });
    record(6, sentinels);
    record(7, dropout);
    record(9, [&] { return harness(data, root); });
    record(10, [&] { return determinism(c, root); });
  }
  if (!training.empty()) {
    record(8, [&] {
      fs::create_directories(training);
      return training_study(training)[0].second;
    });
  }
  int failed = 0, tolerated = 0;
  for (const auto& [id, o] : results) {
    if (o.pass) continue;
    const bool all_known =
        !o.failed_parts.empty() && std::all_of(o.failed_parts.begin(), o.failed_parts.end(), [&](const auto& p) {
          return std::find(known_red.begin(), known_red.end(), p) != known_red.end();
        });
    ++(all_known ? tolerated : failed);
  }
  const std::size_t passed = results.size() - static_cast<std::size_t>(failed + tolerated);
  std::cout << passed << "/" << results.size() << " criteria passed";
  if (tolerated) std::cout << ", " << tolerated << " failing only on known-red sub-criteria";
  if (failed) std::cout << ", " << failed << " FAILED";
  std::cout << std::endl;
  return failed ? 1 : 0;
}
