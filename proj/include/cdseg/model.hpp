#pragma once

// Dual-stream segmentation network.
//
//   causal stream:   x_m -> CausalEncoder -> c_m -> Fusion(masked mean, availability code,
//                    conv + channel attention) -> M -> SegDecoder -> logits
//   bias stream:     x_m -> BiasEncoder -> GAP -> (mu, logvar) -> b_m
//   auxiliary heads: AdaIN reconstruction (M, b_m) -> x_hat_m
//                    causality map      M -> sigmoid map at full grid
//                    counterfactual     [b_1..b_4, availability] -> K-class logits
//
// Only the causal stream is needed at inference; CausalStream is the module
// the pruned checkpoint holds.

#include <filesystem>
#include <optional>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "cdseg/config.hpp"
#include "cdseg/types.hpp"

namespace cdseg {

/// One (sample, modality) pair fed through the per-modality encoders.
struct Row {
  int sample = 0;
  Modality modality = Modality::T1;
  bool operator==(const Row&) const = default;
};

/// Rows for every available modality, sample-major, modality order T1, T1ce, T2, FLAIR.
std::vector<Row> rows_for(const std::vector<Availability>& availability);

struct CausalFeatures {
  torch::Tensor bottleneck;          // [N, C_f, D', H', W']
  std::vector<torch::Tensor> skips;  // finest first; skips[l] is [N, base*2^l, D/2^l, ...]
};

struct BiasPosterior {
  torch::Tensor mean;          // [N, L]
  torch::Tensor log_variance;  // [N, L], clamped to [-10, 10]
  torch::Tensor sample;        // [N, L] = mean + exp(logvar/2) * eps
  torch::Tensor eps;           // [N, L]
};

struct FusedMediator {
  torch::Tensor mediator;            // M, [B, C_f, D', H', W']
  torch::Tensor masked_mean;         // pre-bottleneck masked mean, same shape as mediator
  std::vector<torch::Tensor> skips;  // availability-masked means per scale
  std::vector<Availability> availability;
};

struct CounterfactualOutput {
  torch::Tensor logits;      // [B, K, D, H, W]
  torch::Tensor foreground;  // [B, D, H, W] = 1 - softmax(logits)[BG]
};

/// Masked mean over modality slots: slots is [B, 4, ...]; missing slots must be zero.
torch::Tensor masked_mean(const torch::Tensor& slots, const std::vector<Availability>& availability);

/// Places per-row tensors into zero-filled [B, 4, ...] slots; row order does not matter.
torch::Tensor scatter_rows(const torch::Tensor& rows, const std::vector<Row>& index, int batch);

/// Concatenates per-modality bias vectors (zero for missing modalities) and the
/// availability code: [B, 4L + 4].
torch::Tensor assemble_bias_input(const torch::Tensor& bias_rows, const std::vector<Row>& index,
                                  const std::vector<Availability>& availability);

struct Geometry {
  GridShape grid;
  ModelConfig config;

  bool planar() const { return grid.planar(); }
  int channels(int level) const { return config.base_width << level; }
  int mediator_channels() const { return channels(config.levels); }
  torch::ExpandingArray<3> kernel3() const;
  torch::ExpandingArray<3> pad3() const;
  torch::ExpandingArray<3> stride2() const;
  void check_input(const torch::Tensor& x) const;
};

class ConvNormActImpl : public torch::nn::Module {
 public:
  ConvNormActImpl(const Geometry& g, int in, int out, bool downsample, bool normalize = true);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Conv3d conv_{nullptr};
  torch::nn::InstanceNorm3d norm_{nullptr};
};
TORCH_MODULE(ConvNormAct);

class CausalEncoderImpl : public torch::nn::Module {
 public:
  explicit CausalEncoderImpl(const Geometry& g);
  /// x: [N, 1, D, H, W]
  CausalFeatures forward(const torch::Tensor& x);

 private:
  Geometry geom_;
  torch::nn::ModuleList stages_;
};
TORCH_MODULE(CausalEncoder);

/// Squeeze-and-excitation style channel gating.
class ChannelAttentionImpl : public torch::nn::Module {
 public:
  explicit ChannelAttentionImpl(int channels);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Linear squeeze_{nullptr};
  torch::nn::Linear excite_{nullptr};
};
TORCH_MODULE(ChannelAttention);

class FusionImpl : public torch::nn::Module {
 public:
  explicit FusionImpl(const Geometry& g);
  /// `features` rows correspond to `index`; any presentation order gives the same M.
  FusedMediator forward(const CausalFeatures& features, const std::vector<Row>& index,
                        const std::vector<Availability>& availability);

 private:
  Geometry geom_;
  ConvNormAct conv1_{nullptr};
  ConvNormAct conv2_{nullptr};
  ChannelAttention attention_{nullptr};
};
TORCH_MODULE(Fusion);

class SegDecoderImpl : public torch::nn::Module {
 public:
  explicit SegDecoderImpl(const Geometry& g);
  torch::Tensor forward(const torch::Tensor& mediator, const std::vector<torch::Tensor>& skips);

 private:
  Geometry geom_;
  torch::nn::ModuleList ups_;
  torch::nn::ModuleList blocks_;
  torch::nn::Conv3d head_{nullptr};
};
TORCH_MODULE(SegDecoder);

class BiasEncoderImpl : public torch::nn::Module {
 public:
  explicit BiasEncoderImpl(const Geometry& g);
  /// x: [N, 1, D, H, W], eps: [N, L]
  BiasPosterior forward(const torch::Tensor& x, const torch::Tensor& eps);

 private:
  Geometry geom_;
  torch::nn::ModuleList stages_;
  torch::nn::Linear mean_head_{nullptr};
  torch::nn::Linear logvar_head_{nullptr};
};
TORCH_MODULE(BiasEncoder);

/// AdaIN(f, b) = gamma(b) * (f - mean_ch(f)) / (std_ch(f) + 1e-5) + beta(b)
class AdaInImpl : public torch::nn::Module {
 public:
  AdaInImpl(int channels, int bias_dim);
  torch::Tensor forward(const torch::Tensor& f, const torch::Tensor& b);
  torch::nn::Linear& gamma() { return gamma_; }
  torch::nn::Linear& beta() { return beta_; }

 private:
  torch::nn::Linear gamma_{nullptr};
  torch::nn::Linear beta_{nullptr};
};
TORCH_MODULE(AdaIn);

torch::Tensor adain_standardize(const torch::Tensor& f);

class ReconDecoderImpl : public torch::nn::Module {
 public:
  explicit ReconDecoderImpl(const Geometry& g);
  /// c_fuse: [N, C_f, ...] (mediator gathered per row), b: [N, L] -> [N, 1, D, H, W]
  torch::Tensor forward(const torch::Tensor& c_fuse, const torch::Tensor& b);
  AdaIn& adain(std::size_t i) { return adains_[i]; }
  std::size_t blocks() const { return adains_.size(); }

 private:
  Geometry geom_;
  std::vector<AdaIn> adains_;
  torch::nn::ModuleList ups_;
  torch::nn::Conv3d head_{nullptr};
};
TORCH_MODULE(ReconDecoder);

class CausalityHeadImpl : public torch::nn::Module {
 public:
  explicit CausalityHeadImpl(const Geometry& g);
  /// [B, C_f, ...] -> [B, 1, D, H, W] in (0, 1)
  torch::Tensor forward(const torch::Tensor& mediator);
  torch::nn::Conv3d& conv() { return conv_; }

 private:
  Geometry geom_;
  torch::nn::Conv3d conv_{nullptr};
};
TORCH_MODULE(CausalityHead);

/// Broadcast decoder from a global vector to K-class logits at full grid:
/// affine -> [C, grid/4] -> two x2 transposed-conv blocks -> 1x1 conv.
class CounterfactualDecoderImpl : public torch::nn::Module {
 public:
  CounterfactualDecoderImpl(const Geometry& g, int input_dim);
  torch::Tensor forward(const torch::Tensor& input);

 private:
  Geometry geom_;
  int width_ = 8;
  std::array<std::int64_t, 3> coarse_{};
  torch::nn::Linear affine_{nullptr};
  torch::nn::ConvTranspose3d up1_{nullptr};
  torch::nn::ConvTranspose3d up2_{nullptr};
  torch::nn::Conv3d head_{nullptr};
};
TORCH_MODULE(CounterfactualDecoder);

CounterfactualOutput counterfactual_output(const torch::Tensor& logits);

/// Inference path: encode each available modality, fuse, decode.
class CausalStreamImpl : public torch::nn::Module {
 public:
  explicit CausalStreamImpl(const Geometry& g);

  CausalFeatures encode_causal(const torch::Tensor& x) { return encoder_->forward(x); }
  FusedMediator fuse(const CausalFeatures& f, const std::vector<Row>& index,
                     const std::vector<Availability>& availability) {
    return fusion_->forward(f, index, availability);
  }
  torch::Tensor decode_segmentation(const FusedMediator& m) {
    return decoder_->forward(m.mediator, m.skips);
  }

  /// volumes: [B, 4, D, H, W]; missing modalities are never read.
  torch::Tensor forward(const torch::Tensor& volumes, const std::vector<Availability>& availability);

  const Geometry& geometry() const { return geom_; }

 private:
  Geometry geom_;
  CausalEncoder encoder_{nullptr};
  Fusion fusion_{nullptr};
  SegDecoder decoder_{nullptr};
};
TORCH_MODULE(CausalStream);

/// Which auxiliary heads a forward pass evaluates.
struct HeadSelection {
  bool bias = true;            // E_bias (needed by cvae, hsic, conf, dis)
  bool reconstruction = true;  // D_recon (cvae)
  bool causality = true;       // RCM (rc, dis)
  bool counterfactual = true;  // D_count (conf, dis)
  bool causal_vectors = true;  // GAP of c_m (hsic)

  static HeadSelection all() { return {}; }
  static HeadSelection none() { return {false, false, false, false, false}; }
  static HeadSelection for_weights(const LossWeights& l);
};

struct TrainOutputs {
  std::vector<Row> rows;
  torch::Tensor seg_logits;      // [B, K, D, H, W]
  FusedMediator fused;
  torch::Tensor inputs;          // [N, 1, D, H, W] volumes of the rows
  torch::Tensor causal_vectors;  // [N, C_f]
  std::optional<BiasPosterior> posterior;
  torch::Tensor reconstruction;  // [N, 1, D, H, W]
  torch::Tensor causality;       // [B, 1, D, H, W]
  std::optional<CounterfactualOutput> counterfactual;
};

class CausalDisenSegImpl : public torch::nn::Module {
 public:
  CausalDisenSegImpl(GridShape grid, ModelConfig config);

  /// eps: [N, L] standard-normal draws for the rows, or undefined for eps = 0.
  TrainOutputs forward(const torch::Tensor& volumes, const std::vector<Availability>& availability,
                       const torch::Tensor& eps, HeadSelection heads = HeadSelection::all());

  BiasPosterior encode_bias(const torch::Tensor& x, const torch::Tensor& eps) {
    return bias_encoder_->forward(x, eps);
  }
  torch::Tensor reconstruct(const torch::Tensor& c_fuse, const torch::Tensor& b) {
    return recon_decoder_->forward(c_fuse, b);
  }
  torch::Tensor causality_map(const torch::Tensor& mediator) { return causality_->forward(mediator); }
  CounterfactualOutput counterfactual_predict(const torch::Tensor& b_all);

  CausalStream& causal() { return causal_; }
  BiasEncoder& bias_encoder() { return bias_encoder_; }
  ReconDecoder& recon_decoder() { return recon_decoder_; }
  CausalityHead& causality_head() { return causality_; }
  CounterfactualDecoder& counterfactual_decoder() { return counterfactual_; }

  /// Parameters of E_bias, D_recon and D_count (the bias stream).
  std::vector<torch::Tensor> bias_stream_parameters();
  const Geometry& geometry() const { return geom_; }

 private:
  Geometry geom_;
  CausalStream causal_{nullptr};
  BiasEncoder bias_encoder_{nullptr};
  ReconDecoder recon_decoder_{nullptr};
  CausalityHead causality_{nullptr};
  CounterfactualDecoder counterfactual_{nullptr};
};
TORCH_MODULE(CausalDisenSeg);

/// Builds the network with weights drawn from the run's init seed, so the
/// same config always yields the same initial model.
CausalDisenSeg initialize_model(const RunConfig& config);

/// Gathers the modality volumes for `rows`: [B, 4, D, H, W] -> [N, 1, D, H, W].
torch::Tensor gather_rows(const torch::Tensor& volumes, const std::vector<Row>& rows);

}  // namespace cdseg
