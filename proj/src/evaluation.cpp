#include "cdseg/evaluation.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include "cdseg/losses.hpp"
#include "cdseg/rng.hpp"

namespace cdseg {

using torch::Tensor;
using nlohmann::json;

namespace {

constexpr std::uint64_t kLeakStream = 0x1EA4;
constexpr int kProbeThresholds = 50;
constexpr int kProbeShrinkSteps = 4;
constexpr std::uint64_t kProbeStream = 0x9B0B;

std::vector<const MultimodalSample*> pointers(const std::vector<MultimodalSample>& cases, std::size_t from,
                                              std::size_t to) {
  std::vector<const MultimodalSample*> out;
  for (std::size_t i = from; i < std::min(to, cases.size()); ++i) out.push_back(&cases[i]);
  return out;
}

void require_complete(const MultimodalSample& s) {
  if (s.availability != Availability::all()) {
    throw std::invalid_argument("case " + s.name + " lacks modalities " + s.availability.str() +
                                "; evaluation needs all four on disk");
  }
}

std::string fmt(double v, int precision = 2) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << v;
  return os.str();
}

std::vector<std::uint8_t> whole_tumor(const LabelVolume& labels) {
  std::vector<std::uint8_t> m(labels.data.size());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = labels.data[i] != 0;
  return m;
}

// Per-feature standardization with statistics of the fitting set.
std::pair<Tensor, Tensor> standardize(const Tensor& fit, const Tensor& apply) {
  const Tensor mean = fit.mean(0, true);
  const Tensor sd = fit.std(0, /*unbiased=*/false, true).clamp_min(1e-8);
  return {(fit - mean) / sd, (apply - mean) / sd};
}

}  // namespace

RegionMasks region_masks(const LabelVolume& labels) {
  RegionMasks m;
  const std::size_t n = labels.data.size();
  m.wt.resize(n);
  m.tc.resize(n);
  m.et.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto l = labels.data[i];
    if (l >= kNumClasses) {
      throw std::invalid_argument("unknown label value " + std::to_string(l) + " at voxel " + std::to_string(i));
    }
    m.wt[i] = l != 0;
    m.tc[i] = l == static_cast<std::uint8_t>(Label::NCR_NET) || l == static_cast<std::uint8_t>(Label::ET);
    m.et[i] = l == static_cast<std::uint8_t>(Label::ET);
  }
  return m;
}

double dice(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt) {
  if (pred.size() != gt.size()) {
    throw std::invalid_argument("dice: mask sizes differ (" + std::to_string(pred.size()) + " vs " +
                                std::to_string(gt.size()) + ")");
  }
  std::int64_t p = 0, g = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool a = pred[i] != 0, b = gt[i] != 0;
    p += a;
    g += b;
    both += a && b;
  }
  if (p + g == 0) return 100.0;
  return 100.0 * 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

RegionDice region_dice(const LabelVolume& pred, const LabelVolume& gt) {
  if (!(pred.shape == gt.shape)) {
    throw std::invalid_argument("region_dice: grids " + pred.shape.str() + " and " + gt.shape.str() + " differ");
  }
  const RegionMasks p = region_masks(pred), g = region_masks(gt);
  return {dice(p.wt, g.wt), dice(p.tc, g.tc), dice(p.et, g.et)};
}

const SubsetRow& SubsetGrid::row(Availability mask) const {
  for (const auto& r : rows) {
    if (r.mask == mask) return r;
  }
  throw std::invalid_argument("subset " + mask.str() + " not in grid");
}

std::string SubsetGrid::to_csv() const {
  std::ostringstream os;
  os << "subset,FLAIR,T1ce,T1,T2,WT,TC,ET,Avg\n";
  auto flag = [](Availability m, Modality x) { return m.has(x) ? "1" : "0"; };
  for (const auto& r : rows) {
    os << r.mask.str() << ',' << flag(r.mask, Modality::FLAIR) << ',' << flag(r.mask, Modality::T1ce) << ','
       << flag(r.mask, Modality::T1) << ',' << flag(r.mask, Modality::T2) << ',' << fmt(r.dice.wt, 4) << ','
       << fmt(r.dice.tc, 4) << ',' << fmt(r.dice.et, 4) << ',' << fmt(r.dice.mean(), 4) << '\n';
  }
  os << "average,,,,," << fmt(average.wt, 4) << ',' << fmt(average.tc, 4) << ',' << fmt(average.et, 4) << ','
     << fmt(macro(), 4) << '\n';
  return os.str();
}

std::string SubsetGrid::to_markdown() const {
  std::ostringstream os;
  os << "| FLAIR | T1ce | T1 | T2 |    WT |    TC |    ET |   Avg |\n";
  os << "|:-----:|:----:|:--:|:--:|------:|------:|------:|------:|\n";
  auto flag = [](Availability m, Modality x) { return m.has(x) ? "  ✓  " : "  ×  "; };
  for (const auto& r : rows) {
    os << '|' << flag(r.mask, Modality::FLAIR) << '|' << flag(r.mask, Modality::T1ce) << '|'
       << flag(r.mask, Modality::T1) << '|' << flag(r.mask, Modality::T2) << '|' << std::setw(6)
       << fmt(r.dice.wt) << " |" << std::setw(6) << fmt(r.dice.tc) << " |" << std::setw(6) << fmt(r.dice.et)
       << " |" << std::setw(6) << fmt(r.dice.mean()) << " |\n";
  }
  os << "| **Average** | | | |" << std::setw(6) << fmt(average.wt) << " |" << std::setw(6) << fmt(average.tc)
     << " |" << std::setw(6) << fmt(average.et) << " |" << std::setw(6) << fmt(macro()) << " |\n";
  return os.str();
}

json SubsetGrid::to_json() const {
  json rs = json::array();
  for (const auto& r : rows) {
    rs.push_back({{"subset", r.mask.str()}, {"wt", r.dice.wt}, {"tc", r.dice.tc}, {"et", r.dice.et}});
  }
  return {{"rows", rs},
          {"average", {{"wt", average.wt}, {"tc", average.tc}, {"et", average.et}}},
          {"macro", macro()}};
}

Tensor stack_volumes(const std::vector<const MultimodalSample*>& cases, const std::vector<Availability>& availability) {
  if (cases.empty()) throw std::invalid_argument("stack_volumes: no cases");
  if (availability.size() != cases.size()) throw std::invalid_argument("stack_volumes: one mask per case required");
  const GridShape s = cases.front()->shape;
  const auto b = static_cast<int64_t>(cases.size());
  Tensor out = torch::zeros({b, kNumModalities, s.d, s.h, s.w}, torch::kFloat);
  float* dst = out.data_ptr<float>();
  const auto v = static_cast<std::size_t>(s.voxels());
  for (std::size_t i = 0; i < cases.size(); ++i) {
    if (!(cases[i]->shape == s)) throw std::invalid_argument("stack_volumes: mixed grid shapes");
    for (Modality m : kAllModalities) {
      if (!availability[i].has(m)) continue;
      if (!cases[i]->availability.has(m)) {
        throw std::invalid_argument("case " + cases[i]->name + " has no " + std::string(modality_name(m)) + " volume");
      }
      const auto& src = cases[i]->volumes[static_cast<std::size_t>(index_of(m))].data;
      std::copy(src.begin(), src.end(), dst + (i * kNumModalities + static_cast<std::size_t>(index_of(m))) * v);
    }
  }
  return out;
}

Tensor stack_labels(const std::vector<const MultimodalSample*>& cases) {
  const GridShape s = cases.front()->shape;
  Tensor out = torch::empty({static_cast<int64_t>(cases.size()), s.d, s.h, s.w}, torch::kLong);
  int64_t* dst = out.data_ptr<int64_t>();
  const auto v = static_cast<std::size_t>(s.voxels());
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const auto& src = cases[i]->label_map.data;
    std::transform(src.begin(), src.end(), dst + i * v, [](std::uint8_t l) { return int64_t{l}; });
  }
  return out;
}

LabelVolume argmax_labels(const Tensor& logits) {
  if (logits.dim() != 4) throw std::invalid_argument("argmax_labels expects [K, D, H, W]");
  const Tensor am = logits.argmax(0).to(torch::kUInt8).contiguous();
  LabelVolume out(GridShape{logits.size(1), logits.size(2), logits.size(3)});
  std::copy_n(am.data_ptr<std::uint8_t>(), out.data.size(), out.data.begin());
  return out;
}

namespace {

SubsetGrid finish_grid(const std::vector<RegionDice>& sums, std::size_t cases) {
  SubsetGrid g;
  const auto& masks = subset_grid_masks();
  const double n = static_cast<double>(cases);
  for (std::size_t k = 0; k < masks.size(); ++k) {
    g.rows.push_back({masks[k], {sums[k].wt / n, sums[k].tc / n, sums[k].et / n}});
  }
  for (const auto& r : g.rows) {
    g.average.wt += r.dice.wt;
    g.average.tc += r.dice.tc;
    g.average.et += r.dice.et;
  }
  const double rows = static_cast<double>(g.rows.size());
  g.average = {g.average.wt / rows, g.average.tc / rows, g.average.et / rows};
  return g;
}

void accumulate(RegionDice& sum, const RegionDice& d) {
  sum.wt += d.wt;
  sum.tc += d.tc;
  sum.et += d.et;
}

}  // namespace

SubsetGrid evaluate_segmenter(const Segmenter& segment, const std::vector<MultimodalSample>& cases) {
  if (cases.empty()) throw std::invalid_argument("evaluate_subsets: empty test split");
  const auto& masks = subset_grid_masks();
  std::vector<RegionDice> sums(masks.size());
  const auto ptrs = pointers(cases, 0, cases.size());
  for (std::size_t k = 0; k < masks.size(); ++k) {
    const auto preds = segment(ptrs, masks[k]);
    if (preds.size() != cases.size()) throw std::runtime_error("segmenter returned the wrong number of maps");
    for (std::size_t i = 0; i < cases.size(); ++i) accumulate(sums[k], region_dice(preds[i], cases[i].label_map));
  }
  return finish_grid(sums, cases.size());
}

SubsetGrid evaluate_subsets(CausalStream& model, const std::vector<MultimodalSample>& cases, int chunk) {
  if (cases.empty()) throw std::invalid_argument("evaluate_subsets: empty test split");
  const bool was_training = model->is_training();
  model->eval();
  torch::NoGradGuard no_grad;
  const auto& masks = subset_grid_masks();
  std::vector<RegionDice> sums(masks.size());
  for (std::size_t from = 0; from < cases.size(); from += static_cast<std::size_t>(chunk)) {
    const auto ptrs = pointers(cases, from, from + static_cast<std::size_t>(chunk));
    for (const auto* p : ptrs) require_complete(*p);
    const int batch = static_cast<int>(ptrs.size());
    const std::vector<Availability> all(ptrs.size(), Availability::all());
    const auto rows = rows_for(all);
    const CausalFeatures features = model->encode_causal(gather_rows(stack_volumes(ptrs, all), rows));
    for (std::size_t k = 0; k < masks.size(); ++k) {
      std::vector<int64_t> keep;
      std::vector<Row> sub_rows;
      for (std::size_t r = 0; r < rows.size(); ++r) {
        if (masks[k].has(rows[r].modality)) {
          keep.push_back(static_cast<int64_t>(r));
          sub_rows.push_back(rows[r]);
        }
      }
      const Tensor idx = torch::tensor(keep, torch::kLong);
      CausalFeatures sub;
      sub.bottleneck = features.bottleneck.index_select(0, idx);
      for (const Tensor& s : features.skips) sub.skips.push_back(s.index_select(0, idx));
      const Tensor logits =
          model->decode_segmentation(model->fuse(sub, sub_rows, std::vector<Availability>(ptrs.size(), masks[k])));
      for (int b = 0; b < batch; ++b) {
        accumulate(sums[k], region_dice(argmax_labels(logits[b]), ptrs[static_cast<std::size_t>(b)]->label_map));
      }
    }
  }
  if (was_training) model->train();
  return finish_grid(sums, cases.size());
}

double silhouette(const Tensor& points_in, const std::vector<int>& labels) {
  const Tensor points = points_in.to(torch::kDouble).contiguous();
  const int64_t n = points.size(0);
  if (static_cast<int64_t>(labels.size()) != n) throw std::invalid_argument("silhouette: one label per point");
  std::map<int, int64_t> sizes;
  for (int l : labels) ++sizes[l];
  if (sizes.size() < 2) throw std::invalid_argument("silhouette: fewer than 2 groups represented");
  const Tensor dist = torch::cdist(points, points).contiguous();
  const double* d = dist.data_ptr<double>();
  if (dist.max().item<double>() == 0.0) {
    std::cerr << "warning: all bias vectors coincide; silhouette undefined, reporting 0\n";
    return 0.0;
  }
  double total = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    std::map<int, double> sum;
    for (int64_t j = 0; j < n; ++j) {
      if (j != i) sum[labels[static_cast<std::size_t>(j)]] += d[i * n + j];
    }
    const int own = labels[static_cast<std::size_t>(i)];
    if (sizes[own] < 2) continue;  // singleton cluster scores 0
    const double a = sum[own] / static_cast<double>(sizes[own] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (const auto& [label, count] : sizes) {
      if (label != own) b = std::min(b, sum[label] / static_cast<double>(count));
    }
    const double denom = std::max(a, b);
    if (denom > 0.0) total += (b - a) / denom;
  }
  return total / static_cast<double>(n);
}

namespace {

template <typename Fn>
Tensor per_row_features(CausalDisenSeg& model, const std::vector<MultimodalSample>& cases,
                        std::vector<int>* modality_labels, Fn&& fn) {
  if (cases.empty()) throw std::invalid_argument("no cases to featurize");
  const bool was_training = model->is_training();
  model->eval();
  torch::NoGradGuard no_grad;
  std::vector<Tensor> parts;
  if (modality_labels) modality_labels->clear();
  for (std::size_t from = 0; from < cases.size(); from += 4) {
    const auto ptrs = pointers(cases, from, from + 4);
    for (const auto* p : ptrs) require_complete(*p);
    const std::vector<Availability> all(ptrs.size(), Availability::all());
    const auto rows = rows_for(all);
    parts.push_back(fn(gather_rows(stack_volumes(ptrs, all), rows)));
    if (modality_labels) {
      for (const Row& r : rows) modality_labels->push_back(index_of(r.modality));
    }
  }
  if (was_training) model->train();
  return torch::cat(parts, 0);
}

}  // namespace

Tensor bias_means(CausalDisenSeg& model, const std::vector<MultimodalSample>& cases, std::vector<int>* labels) {
  return per_row_features(model, cases, labels,
                          [&](const Tensor& x) { return model->encode_bias(x, Tensor()).mean; });
}

double bias_cluster_score(CausalDisenSeg& model, const std::vector<MultimodalSample>& cases) {
  std::vector<int> labels;
  const Tensor mu = bias_means(model, cases, &labels);
  return silhouette(mu, labels);
}

Tensor causal_vectors(CausalDisenSeg& model, const std::vector<MultimodalSample>& cases, std::vector<int>* labels) {
  return per_row_features(model, cases, labels, [&](const Tensor& x) {
    return model->causal()->encode_causal(x).bottleneck.mean({2, 3, 4});
  });
}

double balanced_accuracy(const std::vector<int>& truth, const std::vector<int>& predicted, int classes) {
  if (truth.size() != predicted.size()) throw std::invalid_argument("balanced_accuracy: length mismatch");
  std::vector<double> hit(static_cast<std::size_t>(classes)), seen(static_cast<std::size_t>(classes));
  for (std::size_t i = 0; i < truth.size(); ++i) {
    seen[static_cast<std::size_t>(truth[i])] += 1;
    if (truth[i] == predicted[i]) hit[static_cast<std::size_t>(truth[i])] += 1;
  }
  double sum = 0;
  int present = 0;
  for (std::size_t c = 0; c < seen.size(); ++c) {
    if (seen[c] > 0) {
      sum += hit[c] / seen[c];
      ++present;
    }
  }
  return present ? sum / present : 0.0;
}

double causal_modality_leak(CausalDisenSeg& model, const std::vector<MultimodalSample>& train,
                            const std::vector<MultimodalSample>& test, std::uint64_t seed) {
  std::vector<int> train_labels, test_labels;
  const Tensor f_train = causal_vectors(model, train, &train_labels).to(torch::kDouble);
  const Tensor f_test = causal_vectors(model, test, &test_labels).to(torch::kDouble);
  const auto [x_train, x_test] = standardize(f_train, f_test);
  const Tensor y = torch::tensor(std::vector<int64_t>(train_labels.begin(), train_labels.end()), torch::kLong);

  torch::manual_seed(derive_seed(seed, kLeakStream));
  torch::nn::Linear probe(torch::nn::LinearOptions(x_train.size(1), kNumModalities));
  probe->to(torch::kDouble);
  torch::optim::Adam opt(probe->parameters(), torch::optim::AdamOptions(0.05).weight_decay(1e-4));
  for (int it = 0; it < 300; ++it) {
    opt.zero_grad();
    const Tensor loss = torch::nn::functional::cross_entropy(probe(x_train), y);
    loss.backward();
    opt.step();
  }
  torch::NoGradGuard no_grad;
  const Tensor pred = probe(x_test).argmax(1).contiguous();
  std::vector<int> predicted(static_cast<std::size_t>(pred.size(0)));
  for (std::size_t i = 0; i < predicted.size(); ++i) predicted[i] = static_cast<int>(pred[static_cast<int64_t>(i)].item<int64_t>());
  return balanced_accuracy(test_labels, predicted, kNumModalities);
}

double probe_dice(const Tensor& train_features, const std::vector<const LabelVolume*>& train_labels,
                  const Tensor& test_features, const std::vector<const LabelVolume*>& test_labels,
                  const Geometry& geometry, const ProbeOptions& options) {
  if (train_features.size(0) != static_cast<int64_t>(train_labels.size()) ||
      test_features.size(0) != static_cast<int64_t>(test_labels.size())) {
    throw std::invalid_argument("probe_dice: one feature row per labelled case required");
  }
  if (test_labels.empty() || train_labels.empty()) throw std::invalid_argument("probe_dice: empty split");
  if (options.epochs < 1) throw std::invalid_argument("probe_dice: at least one epoch required");
  const auto [x_train, x_test] = standardize(train_features.to(torch::kFloat), test_features.to(torch::kFloat));

  const GridShape s = geometry.grid;
  auto label_tensor = [&](const std::vector<const LabelVolume*>& ls) {
    Tensor t = torch::empty({static_cast<int64_t>(ls.size()), s.d, s.h, s.w}, torch::kLong);
    int64_t* dst = t.data_ptr<int64_t>();
    for (std::size_t i = 0; i < ls.size(); ++i) {
      if (!(ls[i]->shape == s)) throw std::invalid_argument("probe_dice: label grid differs from model grid");
      std::transform(ls[i]->data.begin(), ls[i]->data.end(), dst + i * static_cast<std::size_t>(s.voxels()),
                     [](std::uint8_t l) { return int64_t{l}; });
    }
    return t;
  };
  // A seeded fifth of the training cases is held out to pick the stopping
  // epoch, the whole-tumor threshold on the foreground probability and how far
  // to shrink per-case maps toward the fit-set whole-tumor frequency map. A
  // probe whose features carry nothing then falls back to a constant mask.
  Rng rng(derive_seed(options.seed, kProbeStream, 1));
  std::vector<int64_t> cases(train_labels.size());
  for (std::size_t i = 0; i < cases.size(); ++i) cases[i] = static_cast<int64_t>(i);
  rng.shuffle(cases.begin(), cases.end());
  const std::size_t held = cases.size() >= 5 ? cases.size() / 5 : 0;
  const std::vector<int64_t> fit_ids(cases.begin() + static_cast<std::ptrdiff_t>(held), cases.end());
  const std::vector<int64_t> held_ids(cases.begin(), cases.begin() + static_cast<std::ptrdiff_t>(held));
  const std::vector<int64_t>& select_ids = held ? held_ids : fit_ids;

  const Tensor all_labels = label_tensor(train_labels);
  const Tensor x_fit = x_train.index_select(0, torch::tensor(fit_ids, torch::kLong));
  const Tensor y_fit = all_labels.index_select(0, torch::tensor(fit_ids, torch::kLong));
  const Tensor x_select = x_train.index_select(0, torch::tensor(select_ids, torch::kLong));
  const Tensor wt_select =
      all_labels.index_select(0, torch::tensor(select_ids, torch::kLong)).ne(0).reshape({x_select.size(0), -1});
  const Tensor wt_test = label_tensor(test_labels).ne(0).reshape({x_test.size(0), -1});
  const Tensor prior = y_fit.ne(0).reshape({x_fit.size(0), -1}).to(torch::kFloat).mean(0, true);

  torch::manual_seed(derive_seed(options.seed, kProbeStream));
  CounterfactualDecoder probe(geometry, static_cast<int>(x_train.size(1)));
  torch::optim::AdamW opt(probe->parameters(),
                          torch::optim::AdamWOptions(options.learning_rate).weight_decay(options.weight_decay));

  auto foreground = [&](const Tensor& x) {
    torch::NoGradGuard no_grad;
    return counterfactual_output(probe(x)).foreground.reshape({x.size(0), -1});
  };
  // mean whole-tumor Dice (percent) of fg > threshold; both-empty counts 100
  auto mean_dice = [](const Tensor& fg, const Tensor& wt, double threshold) {
    const Tensor pred = fg.gt(threshold);
    const Tensor inter = pred.logical_and(wt).sum(1).to(torch::kDouble);
    const Tensor denom = (pred.sum(1) + wt.sum(1)).to(torch::kDouble);
    const Tensor d = torch::where(denom.gt(0), 200.0 * inter / denom.clamp_min(1.0), torch::full_like(denom, 100.0));
    return d.mean().item<double>();
  };
  auto best_threshold = [&](const Tensor& fg, const Tensor& wt) {
    std::pair<double, double> best{0.5, -1.0};  // threshold, Dice
    for (int k = 1; k < kProbeThresholds; ++k) {
      const double t = static_cast<double>(k) / kProbeThresholds;
      const double d = mean_dice(fg, wt, t);
      if (d > best.second) best = {t, d};
    }
    return best;
  };

  std::vector<int64_t> order(static_cast<std::size_t>(x_fit.size(0)));
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int64_t>(i);
  double chosen_threshold = 0.5, chosen_dice = -1.0, chosen_alpha = 1.0;
  std::vector<Tensor> snapshot;
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    probe->train();
    rng.shuffle(order.begin(), order.end());
    for (std::size_t from = 0; from < order.size(); from += static_cast<std::size_t>(options.batch_size)) {
      const std::size_t to = std::min(order.size(), from + static_cast<std::size_t>(options.batch_size));
      const Tensor idx = torch::tensor(std::vector<int64_t>(order.begin() + static_cast<std::ptrdiff_t>(from),
                                                            order.begin() + static_cast<std::ptrdiff_t>(to)),
                                       torch::kLong);
      opt.zero_grad();
      const Tensor loss = losses::seg_loss(probe(x_fit.index_select(0, idx)), y_fit.index_select(0, idx));
      loss.backward();
      opt.step();
    }
    probe->eval();
    const Tensor fg = foreground(x_select);
    for (int a = 0; a <= kProbeShrinkSteps; ++a) {
      const double alpha = static_cast<double>(a) / kProbeShrinkSteps;
      const auto [t, d] = best_threshold(alpha * fg + (1.0 - alpha) * prior, wt_select);
      if (d > chosen_dice) {
        chosen_dice = d;
        chosen_threshold = t;
        chosen_alpha = alpha;
        snapshot.clear();
        for (const auto& p : probe->parameters()) snapshot.push_back(p.detach().clone());
      }
    }
  }
  {
    torch::NoGradGuard no_grad;
    auto params = probe->parameters();
    for (std::size_t i = 0; i < params.size(); ++i) params[i].copy_(snapshot[i]);
  }
  probe->eval();
  return mean_dice(chosen_alpha * foreground(x_test) + (1.0 - chosen_alpha) * prior, wt_test,
                   chosen_threshold);
}

namespace {

Tensor bias_inputs(CausalDisenSeg& model, const std::vector<MultimodalSample>& cases) {
  const Tensor mu = bias_means(model, cases);
  const auto n = static_cast<int64_t>(cases.size());
  const std::vector<Availability> all(cases.size(), Availability::all());
  return assemble_bias_input(mu.reshape({n * kNumModalities, -1}), rows_for(all), all);
}

std::vector<const LabelVolume*> label_pointers(const std::vector<MultimodalSample>& cases) {
  std::vector<const LabelVolume*> out;
  for (const auto& c : cases) out.push_back(&c.label_map);
  return out;
}

}  // namespace

double nde_probe(CausalDisenSeg& model, const std::vector<MultimodalSample>& train,
                 const std::vector<MultimodalSample>& test, const ProbeOptions& options) {
  return probe_dice(bias_inputs(model, train), label_pointers(train), bias_inputs(model, test), label_pointers(test),
                    model->geometry(), options);
}

double constant_mask_floor(const std::vector<const LabelVolume*>& labels) {
  if (labels.empty()) throw std::invalid_argument("constant_mask_floor: no cases");
  const std::size_t v = labels.front()->data.size();
  std::vector<int> freq(v, 0);
  std::vector<std::vector<std::uint8_t>> wts;
  for (const auto* l : labels) {
    wts.push_back(whole_tumor(*l));
    for (std::size_t i = 0; i < v; ++i) freq[i] += wts.back()[i];
  }
  double best = 0.0;
  const int n = static_cast<int>(labels.size());
  // threshold n + 1 is the empty mask
  for (int t = 1; t <= n + 1; ++t) {
    std::vector<std::uint8_t> mask(v);
    for (std::size_t i = 0; i < v; ++i) mask[i] = freq[i] >= t;
    double total = 0.0;
    for (const auto& wt : wts) total += dice(mask, wt);
    best = std::max(best, total / n);
  }
  return best;
}

json DisentanglementReport::to_json() const {
  return {{"bias_cluster_score", bias_cluster_score},
          {"bias_cluster_score_untrained", bias_cluster_score_untrained},
          {"causal_modality_leak", causal_modality_leak},
          {"nde_probe_dice", nde_probe_dice},
          {"chance_floor", chance_floor}};
}

DisentanglementReport disentanglement_report(CausalDisenSeg& model, const RunConfig& config,
                                             const std::vector<MultimodalSample>& train,
                                             const std::vector<MultimodalSample>& test) {
  DisentanglementReport r;
  r.bias_cluster_score = bias_cluster_score(model, test);
  CausalDisenSeg untrained = initialize_model(config);
  r.bias_cluster_score_untrained = bias_cluster_score(untrained, test);
  r.causal_modality_leak = causal_modality_leak(model, train, test, config.train.seed);
  ProbeOptions probe;
  probe.epochs = config.eval.probe_epochs;
  probe.learning_rate = config.eval.probe_learning_rate;
  probe.seed = config.train.seed;
  r.nde_probe_dice = nde_probe(model, train, test, probe);
  r.chance_floor = constant_mask_floor(label_pointers(test));
  return r;
}

void write_png_rgb(const std::filesystem::path& path, int width, int height, const std::vector<std::uint8_t>& rgb) {
  if (rgb.size() != static_cast<std::size_t>(width) * static_cast<std::size_t>(height) * 3) {
    throw std::invalid_argument("write_png_rgb: buffer size mismatch");
  }
  FILE* fp = std::fopen(path.string().c_str(), "wb");
  if (!fp) throw std::runtime_error("cannot open " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw std::runtime_error("libpng failed writing " + path.string());
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < height; ++y) {
    png_write_row(png, const_cast<png_bytep>(rgb.data() + static_cast<std::size_t>(y) * width * 3));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

std::vector<std::filesystem::path> export_heatmaps(CausalDisenSeg& model, const std::vector<MultimodalSample>& cases,
                                                   int count, const std::filesystem::path& dir) {
  constexpr int kScale = 8;
  std::filesystem::create_directories(dir);
  const bool was_training = model->is_training();
  model->eval();
  torch::NoGradGuard no_grad;
  std::vector<std::filesystem::path> written;
  const std::size_t n = std::min(cases.size(), static_cast<std::size_t>(std::max(count, 0)));
  for (std::size_t i = 0; i < n; ++i) {
    const MultimodalSample& c = cases[i];
    require_complete(c);
    const std::vector<Availability> all{Availability::all()};
    const std::vector<const MultimodalSample*> one{&c};
    const auto rows = rows_for(all);
    const FusedMediator fused = model->causal()->fuse(
        model->causal()->encode_causal(gather_rows(stack_volumes(one, all), rows)), rows, all);
    const Tensor a = model->causality_map(fused.mediator)[0][0].contiguous();
    const int64_t z = c.shape.d / 2;
    const Tensor slice = a[z].contiguous();
    const float* av = slice.data_ptr<float>();
    const auto& flair = c.volumes[static_cast<std::size_t>(index_of(Modality::FLAIR))];
    const int w = static_cast<int>(c.shape.w) * kScale, h = static_cast<int>(c.shape.h) * kScale;
    std::vector<std::uint8_t> rgb(static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * 3);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const int64_t sy = y / kScale, sx = x / kScale;
        const double gray = std::clamp((flair.at(z, sy, sx) + 2.0) / 6.0, 0.0, 1.0);
        const double heat = av[sy * c.shape.w + sx];
        const bool tumor = c.label_map.at(z, sy, sx) != 0;
        const std::size_t o = (static_cast<std::size_t>(y) * static_cast<std::size_t>(w) + static_cast<std::size_t>(x)) * 3;
        rgb[o] = static_cast<std::uint8_t>(std::lround(255.0 * std::max(heat, 0.35 * gray)));
        rgb[o + 1] = static_cast<std::uint8_t>(std::lround(255.0 * (tumor ? 0.7 : 0.35 * gray)));
        rgb[o + 2] = static_cast<std::uint8_t>(std::lround(255.0 * 0.35 * gray));
      }
    }
    const auto path = dir / (c.name + "_causality.png");
    write_png_rgb(path, w, h, rgb);
    written.push_back(path);
  }
  if (was_training) model->train();
  return written;
}

}  // namespace cdseg
