#pragma once

// Loss terms of the training objective. Each differentiable term is a custom
// autograd function whose backward pass is the closed-form gradient.
//
// Shapes: voxel tensors are [B, ...spatial]; class logits are [B, K, ...spatial].
// Any floating dtype works; tests run in float64.

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "cdseg/config.hpp"

namespace cdseg::losses {

inline constexpr double kDiceSmooth = 1e-5;
inline constexpr double kCosineEps = 1e-8;
inline constexpr double kProbClamp = 1e-7;
inline constexpr double kBandwidthFloor = 1e-6;

/// 0.5 * (soft multi-class Dice loss + voxelwise cross-entropy). Dice sums run
/// over the whole batch. `labels` holds class indices.
torch::Tensor seg_loss(const torch::Tensor& logits, const torch::Tensor& labels);

/// Closed-form KL(N(mu, diag exp(logvar)) || N(0, I)) per row.
torch::Tensor kl_standard_normal(const torch::Tensor& mu, const torch::Tensor& logvar);

/// Sum over rows of [mean |x - x_hat| + lambda_kl * KL]. One row per observed
/// (sample, modality); x and x_hat are [N, ...], mu and logvar are [N, L].
torch::Tensor cvae_loss(const torch::Tensor& x, const torch::Tensor& x_hat, const torch::Tensor& mu,
                        const torch::Tensor& logvar, double lambda_kl);

struct Bandwidths {
  std::optional<double> c;
  std::optional<double> b;
};

/// Median pairwise Euclidean distance between rows, floored at kBandwidthFloor.
double median_bandwidth(const torch::Tensor& rows);

/// Biased empirical HSIC, Tr(K_C H K_B H) / (N-1)^2, with RBF kernels
/// exp(-|u-v|^2 / sigma^2). Bandwidths default to the median heuristic and are
/// treated as constants for the gradient. Sums are order-independent, so the
/// value is bit-identical under swapping (C,B) or permuting rows in pairs.
/// Throws std::invalid_argument when N < 2.
torch::Tensor hsic(const torch::Tensor& c, const torch::Tensor& b, Bandwidths bw = {});

/// Permutation p-value of HSIC(C,B) against shuffled pairings, (1 + #{null >= obs}) / (1 + n).
double hsic_permutation_pvalue(const torch::Tensor& c, const torch::Tensor& b, int permutations,
                               std::uint64_t seed);

/// Dice loss + binary cross-entropy of a probability map against the
/// whole-tumor mask (label != 0).
torch::Tensor rc_loss(const torch::Tensor& a_causal, const torch::Tensor& labels);

/// Mean squared difference between softmax(logits) and the uniform 1/K target,
/// averaged over batch, classes and voxels.
torch::Tensor confusion_loss(const torch::Tensor& logits);

/// Cosine similarity of the flattened maps, per sample, averaged over the batch.
torch::Tensor discrepancy_loss(const torch::Tensor& a_causal, const torch::Tensor& y_hat_bias);

/// Thrown when a loss term is NaN or infinite; names the term.
class NonFiniteLoss : public std::runtime_error {
 public:
  NonFiniteLoss(std::string term, double value);
  const std::string& term() const { return term_; }

 private:
  std::string term_;
};

/// Undefined tensors are terms that were not evaluated; they count as zero.
struct LossComponents {
  torch::Tensor seg;
  torch::Tensor cvae;
  torch::Tensor hsic;
  torch::Tensor rc;
  torch::Tensor conf;
  torch::Tensor dis;
};

struct LossBundle {
  double seg = 0, cvae = 0, hsic = 0, rc = 0, conf = 0, dis = 0;
  double total = 0;
  LossWeights lambdas;
  std::vector<std::string> skipped;

  nlohmann::json to_json() const;
  static LossBundle from_json(const nlohmann::json& j);
};

/// seg + l1*cvae + l2*hsic + l3*rc + l4*conf + l5*dis, left to right in double.
double weighted_sum(double seg, double cvae, double hsic, double rc, double conf, double dis,
                    const LossWeights& lambdas);

struct TotalLoss {
  torch::Tensor total;  // float64 scalar carrying the graph
  LossBundle bundle;
};

/// Combines the terms; throws NonFiniteLoss naming the first bad term.
TotalLoss total_loss(const LossComponents& parts, const LossWeights& lambdas);

}  // namespace cdseg::losses
