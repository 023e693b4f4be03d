#pragma once

// Dice metrics, the 15-subset missing-modality grid and disentanglement
// diagnostics (bias clustering, causal leak probe, bias-only NDE probe).

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "cdseg/config.hpp"
#include "cdseg/model.hpp"
#include "cdseg/phantom.hpp"

namespace cdseg {

struct RegionMasks {
  std::vector<std::uint8_t> wt, tc, et;
};

/// WT = NCR ∪ ED ∪ ET, TC = NCR ∪ ET, ET = ET. Throws on labels outside {0..3}.
RegionMasks region_masks(const LabelVolume& labels);

/// 100 * 2|P∩G| / (|P| + |G|); 100 when both are empty.
double dice(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt);

struct RegionDice {
  double wt = 0, tc = 0, et = 0;
  double mean() const { return (wt + tc + et) / 3.0; }
};

RegionDice region_dice(const LabelVolume& pred, const LabelVolume& gt);

struct SubsetRow {
  Availability mask;
  RegionDice dice;
};

struct SubsetGrid {
  std::vector<SubsetRow> rows;  // table order
  RegionDice average;           // column means over the rows

  /// Mean of the three region averages.
  double macro() const { return average.mean(); }
  const SubsetRow& row(Availability mask) const;

  std::string to_csv() const;
  std::string to_markdown() const;
  nlohmann::json to_json() const;
};

/// Stacks the cases into [B, 4, D, H, W] (missing modalities zero) and [B, D, H, W] labels.
torch::Tensor stack_volumes(const std::vector<const MultimodalSample*>& cases,
                            const std::vector<Availability>& availability);
torch::Tensor stack_labels(const std::vector<const MultimodalSample*>& cases);
LabelVolume argmax_labels(const torch::Tensor& logits_one_case);

/// Any segmenter: predicts label maps for the cases restricted to `mask`.
using Segmenter = std::function<std::vector<LabelVolume>(const std::vector<const MultimodalSample*>&,
                                                         Availability mask)>;

SubsetGrid evaluate_segmenter(const Segmenter& segment, const std::vector<MultimodalSample>& cases);

/// Model path: per-modality encoder outputs are computed once per case and
/// reused across the 15 subsets. Runs in eval mode without gradients.
SubsetGrid evaluate_subsets(CausalStream& model, const std::vector<MultimodalSample>& cases,
                            int chunk = 4);

/// Silhouette coefficient (Euclidean) of the rows of `points` grouped by
/// `labels`. Returns 0 with a warning on stderr when all points coincide.
double silhouette(const torch::Tensor& points, const std::vector<int>& labels);

/// Posterior means mu_m for every (case, modality), eps = 0. Row order is
/// case-major; `modality_labels` receives the modality index per row.
torch::Tensor bias_means(CausalDisenSeg& model, const std::vector<MultimodalSample>& cases,
                         std::vector<int>* modality_labels = nullptr);

double bias_cluster_score(CausalDisenSeg& model, const std::vector<MultimodalSample>& cases);

/// GAP-pooled causal bottleneck features per (case, modality), case-major.
torch::Tensor causal_vectors(CausalDisenSeg& model, const std::vector<MultimodalSample>& cases,
                             std::vector<int>* modality_labels = nullptr);

/// Balanced accuracy of a multinomial logistic probe (fit on `train`,
/// scored on `test`) predicting the modality from causal features.
double causal_modality_leak(CausalDisenSeg& model, const std::vector<MultimodalSample>& train,
                            const std::vector<MultimodalSample>& test, std::uint64_t seed);

double balanced_accuracy(const std::vector<int>& truth, const std::vector<int>& predicted, int classes);

struct ProbeOptions {
  int epochs = 30;
  double learning_rate = 1e-3;
  double weight_decay = 0.0;  // decoupled (AdamW)
  int batch_size = 8;
  std::uint64_t seed = 0;
};

/// Trains a fresh counterfactual-decoder-shaped probe from per-case feature
/// vectors to segmentation; returns mean whole-tumor Dice on the test cases.
/// The whole-tumor threshold on the foreground probability is chosen on the
/// training cases, so uninformative features score near constant_mask_floor.
double probe_dice(const torch::Tensor& train_features, const std::vector<const LabelVolume*>& train_labels,
                  const torch::Tensor& test_features, const std::vector<const LabelVolume*>& test_labels,
                  const Geometry& geometry, const ProbeOptions& options);

/// Bias-only probe: features are [mu_1..mu_4, availability code] from the frozen model.
double nde_probe(CausalDisenSeg& model, const std::vector<MultimodalSample>& train,
                 const std::vector<MultimodalSample>& test, const ProbeOptions& options);

/// Best mean whole-tumor Dice any single fixed mask achieves on `labels`,
/// searched over threshold sets of the per-voxel tumor frequency map.
double constant_mask_floor(const std::vector<const LabelVolume*>& labels);

struct DisentanglementReport {
  double bias_cluster_score = 0;
  double bias_cluster_score_untrained = 0;
  double causal_modality_leak = 0;
  double nde_probe_dice = 0;
  double chance_floor = 0;

  nlohmann::json to_json() const;
};

DisentanglementReport disentanglement_report(CausalDisenSeg& model, const RunConfig& config,
                                             const std::vector<MultimodalSample>& train,
                                             const std::vector<MultimodalSample>& test);

/// Mid-axial slice PNGs of A_causal (red) over the ground-truth whole tumor
/// (green) for the first `count` cases. Returns the written paths.
std::vector<std::filesystem::path> export_heatmaps(CausalDisenSeg& model,
                                                   const std::vector<MultimodalSample>& cases, int count,
                                                   const std::filesystem::path& dir);

void write_png_rgb(const std::filesystem::path& path, int width, int height,
                   const std::vector<std::uint8_t>& rgb);

}  // namespace cdseg
