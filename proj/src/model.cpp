#include "cdseg/model.hpp"

#include "cdseg/rng.hpp"

#include <algorithm>
#include <set>
#include <stdexcept>

namespace cdseg {

namespace nn = torch::nn;
using torch::Tensor;

namespace {

constexpr double kLeakySlope = 0.01;
constexpr double kAdaInEps = 1e-5;
constexpr double kLogVarBound = 10.0;
constexpr std::uint64_t kInitStream = 0x1417;

Tensor leaky(const Tensor& x) { return torch::leaky_relu(x, kLeakySlope); }

std::vector<int64_t> spatial_dims(const Tensor& x) {
  std::vector<int64_t> d;
  for (int64_t i = 2; i < x.dim(); ++i) d.push_back(i);
  return d;
}

Tensor row_index(const std::vector<Row>& rows, int batch) {
  std::vector<int64_t> idx;
  idx.reserve(rows.size());
  std::set<int64_t> seen;
  for (const Row& r : rows) {
    if (r.sample < 0 || r.sample >= batch) {
      throw std::invalid_argument("row sample index " + std::to_string(r.sample) + " outside batch");
    }
    const int64_t flat = int64_t{r.sample} * kNumModalities + index_of(r.modality);
    if (!seen.insert(flat).second) throw std::invalid_argument("duplicate (sample, modality) row");
    idx.push_back(flat);
  }
  return torch::tensor(idx, torch::kLong);
}

Tensor availability_code(const std::vector<Availability>& availability, const torch::TensorOptions& o) {
  std::vector<float> code;
  code.reserve(availability.size() * kNumModalities);
  for (const Availability& a : availability) {
    const auto c = a.code();
    code.insert(code.end(), c.begin(), c.end());
  }
  return torch::tensor(code, torch::kFloat)
      .reshape({static_cast<int64_t>(availability.size()), kNumModalities})
      .to(o);
}

}  // namespace

std::vector<Row> rows_for(const std::vector<Availability>& availability) {
  std::vector<Row> rows;
  for (std::size_t b = 0; b < availability.size(); ++b) {
    if (availability[b].empty()) {
      throw std::invalid_argument("empty availability mask for sample " + std::to_string(b));
    }
    for (Modality m : kAllModalities) {
      if (availability[b].has(m)) rows.push_back({static_cast<int>(b), m});
    }
  }
  return rows;
}

Tensor scatter_rows(const Tensor& rows, const std::vector<Row>& index, int batch) {
  if (rows.size(0) != static_cast<int64_t>(index.size())) {
    throw std::invalid_argument("scatter_rows: " + std::to_string(rows.size(0)) + " rows but " +
                                std::to_string(index.size()) + " index entries");
  }
  auto shape = rows.sizes().vec();
  shape[0] = int64_t{batch} * kNumModalities;
  Tensor slots = torch::zeros(shape, rows.options());
  slots = slots.index_copy(0, row_index(index, batch).to(rows.device()), rows);
  shape[0] = kNumModalities;
  shape.insert(shape.begin(), batch);
  return slots.reshape(shape);
}

Tensor masked_mean(const Tensor& slots, const std::vector<Availability>& availability) {
  if (slots.size(0) != static_cast<int64_t>(availability.size()) || slots.size(1) != kNumModalities) {
    throw std::invalid_argument("masked_mean: slots " + c10::str(slots.sizes()) +
                                " do not match availability list");
  }
  std::vector<float> counts;
  for (const Availability& a : availability) {
    if (a.empty()) throw std::invalid_argument("masked_mean: empty availability mask");
    counts.push_back(static_cast<float>(a.count()));
  }
  std::vector<int64_t> view(static_cast<std::size_t>(slots.dim() - 1), 1);
  view[0] = slots.size(0);
  const Tensor n = torch::tensor(counts, torch::kFloat).to(slots.options()).reshape(view);
  return slots.sum(1) / n;
}

Tensor assemble_bias_input(const Tensor& bias_rows, const std::vector<Row>& index,
                           const std::vector<Availability>& availability) {
  const int batch = static_cast<int>(availability.size());
  const Tensor slots = scatter_rows(bias_rows, index, batch).reshape({batch, -1});
  return torch::cat({slots, availability_code(availability, bias_rows.options())}, 1);
}

Tensor gather_rows(const Tensor& volumes, const std::vector<Row>& rows) {
  const int64_t batch = volumes.size(0);
  auto shape = volumes.sizes().vec();
  const Tensor flat = volumes.reshape({batch * kNumModalities, 1, shape[2], shape[3], shape[4]});
  return flat.index_select(0, row_index(rows, static_cast<int>(batch)).to(volumes.device()));
}

torch::ExpandingArray<3> Geometry::kernel3() const {
  return planar() ? torch::ExpandingArray<3>({1, 3, 3}) : torch::ExpandingArray<3>(3);
}
torch::ExpandingArray<3> Geometry::pad3() const {
  return planar() ? torch::ExpandingArray<3>({0, 1, 1}) : torch::ExpandingArray<3>(1);
}
torch::ExpandingArray<3> Geometry::stride2() const {
  return planar() ? torch::ExpandingArray<3>({1, 2, 2}) : torch::ExpandingArray<3>(2);
}

void Geometry::check_input(const Tensor& x) const {
  if (x.dim() != 5 || x.size(2) != grid.d || x.size(3) != grid.h || x.size(4) != grid.w) {
    throw std::invalid_argument("input " + c10::str(x.sizes()) + " does not match configured grid " +
                                grid.str());
  }
}

ConvNormActImpl::ConvNormActImpl(const Geometry& g, int in, int out, bool downsample, bool normalize) {
  auto opts = nn::Conv3dOptions(in, out, g.kernel3()).padding(g.pad3()).bias(!normalize);
  if (downsample) opts.stride(g.stride2());
  conv_ = register_module("conv", nn::Conv3d(opts));
  if (normalize) norm_ = register_module("norm", nn::InstanceNorm3d(nn::InstanceNorm3dOptions(out).affine(true)));
}

Tensor ConvNormActImpl::forward(const Tensor& x) {
  Tensor y = conv_(x);
  if (!norm_.is_empty()) y = norm_(y);
  return leaky(y);
}

CausalEncoderImpl::CausalEncoderImpl(const Geometry& g) : geom_(g) {
  stages_ = register_module("stages", nn::ModuleList());
  stages_->push_back(nn::Sequential(ConvNormAct(g, 1, g.channels(0), false),
                                    ConvNormAct(g, g.channels(0), g.channels(0), false)));
  for (int l = 1; l <= g.config.levels; ++l) {
    stages_->push_back(nn::Sequential(ConvNormAct(g, g.channels(l - 1), g.channels(l), true),
                                      ConvNormAct(g, g.channels(l), g.channels(l), false)));
  }
}

CausalFeatures CausalEncoderImpl::forward(const Tensor& x) {
  geom_.check_input(x);
  if (x.size(1) != 1) throw std::invalid_argument("causal encoder expects one channel per row");
  CausalFeatures out;
  Tensor f = x;
  for (std::size_t i = 0; i < stages_->size(); ++i) {
    f = stages_[i]->as<nn::Sequential>()->forward(f);
    if (i + 1 < stages_->size()) out.skips.push_back(f);
  }
  out.bottleneck = f;
  return out;
}

ChannelAttentionImpl::ChannelAttentionImpl(int channels) {
  const int hidden = std::max(1, channels / 4);
  squeeze_ = register_module("squeeze", nn::Linear(channels, hidden));
  excite_ = register_module("excite", nn::Linear(hidden, channels));
}

Tensor ChannelAttentionImpl::forward(const Tensor& x) {
  const Tensor pooled = x.mean(spatial_dims(x));
  const Tensor gate = torch::sigmoid(excite_(torch::relu(squeeze_(pooled))));
  std::vector<int64_t> view(static_cast<std::size_t>(x.dim()), 1);
  view[0] = x.size(0);
  view[1] = x.size(1);
  return x * gate.reshape(view);
}

FusionImpl::FusionImpl(const Geometry& g) : geom_(g) {
  const int c = g.mediator_channels();
  conv1_ = register_module("conv1", ConvNormAct(g, c + kNumModalities, c, false));
  conv2_ = register_module("conv2", ConvNormAct(g, c, c, false));
  attention_ = register_module("attention", ChannelAttention(c));
}

FusedMediator FusionImpl::forward(const CausalFeatures& features, const std::vector<Row>& index,
                                  const std::vector<Availability>& availability) {
  const int batch = static_cast<int>(availability.size());
  for (const Availability& a : availability) {
    if (a.empty()) throw std::invalid_argument("fuse: empty availability mask");
  }
  for (const Row& r : index) {
    if (r.sample >= batch || !availability[static_cast<std::size_t>(r.sample)].has(r.modality)) {
      throw std::invalid_argument("fuse: feature row for a modality marked missing");
    }
  }
  FusedMediator out;
  out.availability = availability;
  out.masked_mean = masked_mean(scatter_rows(features.bottleneck, index, batch), availability);
  for (const Tensor& s : features.skips) {
    out.skips.push_back(masked_mean(scatter_rows(s, index, batch), availability));
  }
  const Tensor& mm = out.masked_mean;
  const Tensor code = availability_code(availability, mm.options())
                          .reshape({batch, kNumModalities, 1, 1, 1})
                          .expand({batch, kNumModalities, mm.size(2), mm.size(3), mm.size(4)});
  out.mediator = attention_(conv2_(conv1_(torch::cat({mm, code}, 1))));
  return out;
}

SegDecoderImpl::SegDecoderImpl(const Geometry& g) : geom_(g) {
  ups_ = register_module("ups", nn::ModuleList());
  blocks_ = register_module("blocks", nn::ModuleList());
  for (int l = g.config.levels; l >= 1; --l) {
    ups_->push_back(nn::ConvTranspose3d(
        nn::ConvTranspose3dOptions(g.channels(l), g.channels(l - 1), g.stride2()).stride(g.stride2())));
    blocks_->push_back(ConvNormAct(g, 2 * g.channels(l - 1), g.channels(l - 1), false));
  }
  head_ = register_module("head", nn::Conv3d(nn::Conv3dOptions(g.channels(0), kNumClasses, 1)));
}

Tensor SegDecoderImpl::forward(const Tensor& mediator, const std::vector<Tensor>& skips) {
  const auto levels = static_cast<std::size_t>(geom_.config.levels);
  if (skips.size() != levels) {
    throw std::invalid_argument("decode_segmentation: expected " + std::to_string(levels) +
                                " skip scales, got " + std::to_string(skips.size()));
  }
  Tensor f = mediator;
  for (std::size_t i = 0; i < levels; ++i) {
    f = ups_[i]->as<nn::ConvTranspose3d>()->forward(f);
    const Tensor& skip = skips[levels - 1 - i];
    if (skip.sizes().slice(2) != f.sizes().slice(2) || skip.size(0) != f.size(0)) {
      throw std::invalid_argument("decode_segmentation: skip " + c10::str(skip.sizes()) +
                                  " does not match upsampled mediator " + c10::str(f.sizes()));
    }
    f = blocks_[i]->as<ConvNormActImpl>()->forward(torch::cat({f, skip}, 1));
  }
  return head_(f);
}

BiasEncoderImpl::BiasEncoderImpl(const Geometry& g) : geom_(g) {
  const int w = g.config.base_width;
  stages_ = register_module("stages", nn::ModuleList());
  stages_->push_back(ConvNormAct(g, 1, w, true, false));
  stages_->push_back(ConvNormAct(g, w, 2 * w, true, false));
  stages_->push_back(ConvNormAct(g, 2 * w, 4 * w, true, false));
  mean_head_ = register_module("mean_head", nn::Linear(4 * w, g.config.bias_dim));
  logvar_head_ = register_module("logvar_head", nn::Linear(4 * w, g.config.bias_dim));
}

BiasPosterior BiasEncoderImpl::forward(const Tensor& x, const Tensor& eps) {
  if (x.dim() != 5 || x.size(1) != 1) {
    throw std::invalid_argument("bias encoder expects [N, 1, D, H, W], got " + c10::str(x.sizes()));
  }
  Tensor f = x;
  for (const auto& stage : *stages_) f = stage->as<ConvNormActImpl>()->forward(f);
  const Tensor pooled = f.mean({2, 3, 4});
  BiasPosterior p;
  p.mean = mean_head_(pooled);
  p.log_variance = logvar_head_(pooled).clamp(-kLogVarBound, kLogVarBound);
  p.eps = eps.defined() ? eps : torch::zeros_like(p.mean);
  if (p.eps.sizes() != p.mean.sizes()) {
    throw std::invalid_argument("bias encoder: eps " + c10::str(p.eps.sizes()) + " must be " +
                                c10::str(p.mean.sizes()));
  }
  p.sample = p.mean + torch::exp(0.5 * p.log_variance) * p.eps;
  return p;
}

AdaInImpl::AdaInImpl(int channels, int bias_dim) {
  gamma_ = register_module("gamma", nn::Linear(bias_dim, channels));
  beta_ = register_module("beta", nn::Linear(bias_dim, channels));
  torch::NoGradGuard guard;
  gamma_->bias.fill_(1.0);
  beta_->bias.zero_();
}

Tensor adain_standardize(const Tensor& f) {
  const auto dims = spatial_dims(f);
  const Tensor mean = f.mean(dims, /*keepdim=*/true);
  const Tensor var = (f - mean).pow(2).mean(dims, /*keepdim=*/true);
  // clamp keeps the backward pass finite for constant channels
  const Tensor sd = var.clamp_min(1e-12).sqrt();
  return (f - mean) / (sd + kAdaInEps);
}

Tensor AdaInImpl::forward(const Tensor& f, const Tensor& b) {
  std::vector<int64_t> view(static_cast<std::size_t>(f.dim()), 1);
  view[0] = f.size(0);
  view[1] = f.size(1);
  return gamma_(b).reshape(view) * adain_standardize(f) + beta_(b).reshape(view);
}

ReconDecoderImpl::ReconDecoderImpl(const Geometry& g) : geom_(g) {
  ups_ = register_module("ups", nn::ModuleList());
  const int levels = g.config.levels;
  for (int l = levels; l >= 0; --l) {
    adains_.push_back(register_module("adain" + std::to_string(l), AdaIn(g.channels(l), g.config.bias_dim)));
  }
  for (int l = levels; l >= 1; --l) {
    nn::Sequential block(nn::ConvTranspose3d(
        nn::ConvTranspose3dOptions(g.channels(l), g.channels(l - 1), g.stride2()).stride(g.stride2())));
    block->push_back(nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(kLeakySlope)));
    if (l - 1 > 0) {
      block->push_back(nn::Conv3d(
          nn::Conv3dOptions(g.channels(l - 1), g.channels(l - 1), g.kernel3()).padding(g.pad3())));
      block->push_back(nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(kLeakySlope)));
    }
    ups_->push_back(block);
  }
  head_ = register_module("head", nn::Conv3d(nn::Conv3dOptions(g.channels(0), 1, 1)));
}

Tensor ReconDecoderImpl::forward(const Tensor& c_fuse, const Tensor& b) {
  if (c_fuse.size(0) != b.size(0)) {
    throw std::invalid_argument("reconstruct: " + std::to_string(c_fuse.size(0)) +
                                " feature rows but " + std::to_string(b.size(0)) + " bias rows");
  }
  Tensor f = c_fuse;
  for (std::size_t i = 0; i < ups_->size(); ++i) {
    f = adains_[i]->forward(f, b);
    f = ups_[i]->as<nn::Sequential>()->forward(f);
  }
  f = adains_.back()->forward(f, b);
  return head_(f);
}

CausalityHeadImpl::CausalityHeadImpl(const Geometry& g) : geom_(g) {
  conv_ = register_module("conv", nn::Conv3d(nn::Conv3dOptions(g.mediator_channels(), 1, 1)));
}

Tensor CausalityHeadImpl::forward(const Tensor& mediator) {
  const Tensor z = conv_(mediator);
  const Tensor up = torch::nn::functional::interpolate(
      z, torch::nn::functional::InterpolateFuncOptions()
             .size(std::vector<int64_t>{geom_.grid.d, geom_.grid.h, geom_.grid.w})
             .mode(torch::kTrilinear)
             .align_corners(false));
  return torch::sigmoid(up);
}

CounterfactualDecoderImpl::CounterfactualDecoderImpl(const Geometry& g, int input_dim)
    : geom_(g), width_(g.config.base_width) {
  const auto& s = g.grid;
  if ((!s.planar() && s.d % 4 != 0) || s.h % 4 != 0 || s.w % 4 != 0) {
    throw std::invalid_argument("counterfactual decoder needs a grid divisible by 4, got " + s.str());
  }
  coarse_ = {s.planar() ? 1 : s.d / 4, s.h / 4, s.w / 4};
  affine_ = register_module(
      "affine", nn::Linear(input_dim, int64_t{width_} * coarse_[0] * coarse_[1] * coarse_[2]));
  // kernel 4 / stride 2 / pad 1: overlapping footprints, so maps are smooth rather than 2x2x2-blocky
  const auto kernel = g.planar() ? torch::ExpandingArray<3>({1, 4, 4}) : torch::ExpandingArray<3>(4);
  const auto pad = g.planar() ? torch::ExpandingArray<3>({0, 1, 1}) : torch::ExpandingArray<3>(1);
  up1_ = register_module(
      "up1", nn::ConvTranspose3d(nn::ConvTranspose3dOptions(width_, width_, kernel).stride(g.stride2()).padding(pad)));
  up2_ = register_module(
      "up2", nn::ConvTranspose3d(nn::ConvTranspose3dOptions(width_, width_, kernel).stride(g.stride2()).padding(pad)));
  head_ = register_module("head", nn::Conv3d(nn::Conv3dOptions(width_, kNumClasses, 1)));
}

Tensor CounterfactualDecoderImpl::forward(const Tensor& input) {
  Tensor h = leaky(affine_(input)).reshape({input.size(0), width_, coarse_[0], coarse_[1], coarse_[2]});
  h = leaky(up1_(h));
  h = leaky(up2_(h));
  return head_(h);
}

CounterfactualOutput counterfactual_output(const Tensor& logits) {
  CounterfactualOutput out;
  out.logits = logits;
  out.foreground = 1.0 - torch::softmax(logits, 1).select(1, static_cast<int64_t>(Label::BG));
  return out;
}

CausalStreamImpl::CausalStreamImpl(const Geometry& g) : geom_(g) {
  encoder_ = register_module("encoder", CausalEncoder(g));
  fusion_ = register_module("fusion", Fusion(g));
  decoder_ = register_module("decoder", SegDecoder(g));
}

Tensor CausalStreamImpl::forward(const Tensor& volumes, const std::vector<Availability>& availability) {
  if (volumes.size(0) != static_cast<int64_t>(availability.size()) || volumes.size(1) != kNumModalities) {
    throw std::invalid_argument("volumes " + c10::str(volumes.sizes()) +
                                " must be [B, 4, D, H, W] with one availability mask per sample");
  }
  const auto rows = rows_for(availability);
  const Tensor x = gather_rows(volumes, rows);
  return decode_segmentation(fuse(encode_causal(x), rows, availability));
}

HeadSelection HeadSelection::for_weights(const LossWeights& l) {
  HeadSelection h;
  h.reconstruction = l.cvae > 0.0;
  h.causal_vectors = l.hsic > 0.0;
  h.causality = l.rc > 0.0 || l.dis > 0.0;
  h.counterfactual = l.conf > 0.0 || l.dis > 0.0;
  h.bias = l.cvae > 0.0 || l.hsic > 0.0 || h.counterfactual;
  return h;
}

CausalDisenSegImpl::CausalDisenSegImpl(GridShape grid, ModelConfig config) : geom_{grid, std::move(config)} {
  validate(geom_.config);
  causal_ = register_module("causal", CausalStream(geom_));
  bias_encoder_ = register_module("bias_encoder", BiasEncoder(geom_));
  recon_decoder_ = register_module("recon_decoder", ReconDecoder(geom_));
  causality_ = register_module("causality_head", CausalityHead(geom_));
  counterfactual_ = register_module(
      "counterfactual", CounterfactualDecoder(geom_, kNumModalities * geom_.config.bias_dim + kNumModalities));
}

CausalDisenSeg initialize_model(const RunConfig& config) {
  torch::manual_seed(derive_seed(config.train.seed, kInitStream));
  return CausalDisenSeg(config.train.grid_shape, config.model);
}

CounterfactualOutput CausalDisenSegImpl::counterfactual_predict(const Tensor& b_all) {
  return counterfactual_output(counterfactual_->forward(b_all));
}

std::vector<Tensor> CausalDisenSegImpl::bias_stream_parameters() {
  std::vector<Tensor> out;
  for (auto* m : std::initializer_list<nn::Module*>{bias_encoder_.get(), recon_decoder_.get(),
                                                    counterfactual_.get()}) {
    for (const auto& p : m->parameters()) out.push_back(p);
  }
  return out;
}

TrainOutputs CausalDisenSegImpl::forward(const Tensor& volumes, const std::vector<Availability>& availability,
                                         const Tensor& eps, HeadSelection heads) {
  if (volumes.dim() != 5 || volumes.size(0) != static_cast<int64_t>(availability.size()) ||
      volumes.size(1) != kNumModalities) {
    throw std::invalid_argument("volumes " + c10::str(volumes.sizes()) +
                                " must be [B, 4, D, H, W] with one availability mask per sample");
  }
  TrainOutputs out;
  out.rows = rows_for(availability);
  out.inputs = gather_rows(volumes, out.rows);
  const CausalFeatures features = causal_->encode_causal(out.inputs);
  out.fused = causal_->fuse(features, out.rows, availability);
  out.seg_logits = causal_->decode_segmentation(out.fused);
  if (heads.causal_vectors) out.causal_vectors = features.bottleneck.mean({2, 3, 4});
  if (heads.bias || heads.reconstruction || heads.counterfactual) {
    out.posterior = bias_encoder_->forward(out.inputs, eps);
  }
  if (heads.reconstruction) {
    std::vector<int64_t> samples;
    for (const Row& r : out.rows) samples.push_back(r.sample);
    const Tensor idx = torch::tensor(samples, torch::kLong).to(volumes.device());
    out.reconstruction = recon_decoder_->forward(out.fused.mediator.index_select(0, idx), out.posterior->sample);
  }
  if (heads.causality) out.causality = causality_->forward(out.fused.mediator);
  if (heads.counterfactual) {
    out.counterfactual =
        counterfactual_predict(assemble_bias_input(out.posterior->sample, out.rows, availability));
  }
  return out;
}

}  // namespace cdseg
