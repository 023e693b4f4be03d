#include "cdseg/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "cdseg/rng.hpp"

namespace cdseg::losses {

using torch::Tensor;
using torch::autograd::AutogradContext;
using torch::autograd::tensor_list;

namespace {

void check_same_voxels(const Tensor& a, const Tensor& b, const char* what) {
  if (a.dim() < 1 || b.dim() < 1 || a.size(0) != b.size(0) || a.numel() != b.numel()) {
    throw std::invalid_argument(std::string(what) + ": shape mismatch " +
                                c10::str(a.sizes()) + " vs " + c10::str(b.sizes()));
  }
}

void check_logits_labels(const Tensor& logits, const Tensor& labels, const char* what) {
  if (logits.dim() < 2 || labels.dim() != logits.dim() - 1 || labels.size(0) != logits.size(0) ||
      labels.numel() * logits.size(1) != logits.numel()) {
    throw std::invalid_argument(std::string(what) + ": logits " + c10::str(logits.sizes()) +
                                " do not match labels " + c10::str(labels.sizes()));
  }
  for (int64_t d = 2; d < logits.dim(); ++d) {
    if (logits.size(d) != labels.size(d - 1)) {
      throw std::invalid_argument(std::string(what) + ": logits " + c10::str(logits.sizes()) +
                                  " do not match labels " + c10::str(labels.sizes()));
    }
  }
}

// Chain rule through softmax over dim 1: dL/dz = p * (g - sum_k p g).
Tensor softmax_backward(const Tensor& p, const Tensor& grad_p) {
  return p * (grad_p - (p * grad_p).sum(1, /*keepdim=*/true));
}

// Order-independent sum: the sorted multiset is the same however the input is permuted.
double sorted_sum(std::vector<double>& v) {
  std::sort(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += x;
  return s;
}

struct SegLossFn : torch::autograd::Function<SegLossFn> {
  static Tensor forward(AutogradContext* ctx, Tensor logits, Tensor labels) {
    const int64_t batch = logits.size(0);
    const int64_t k = logits.size(1);
    const Tensor z = logits.reshape({batch, k, -1});
    const Tensor y = torch::one_hot(labels.reshape({batch, -1}).to(torch::kLong), k)
                         .permute({0, 2, 1})
                         .to(z.scalar_type());
    const Tensor p = torch::softmax(z, 1);
    const Tensor inter = (p * y).sum({0, 2});
    const Tensor denom = p.sum({0, 2}) + y.sum({0, 2}) + kDiceSmooth;
    const Tensor dice = (2.0 * inter + kDiceSmooth) / denom;
    const Tensor dice_loss = 1.0 - dice.mean();
    const double n = static_cast<double>(batch * z.size(2));
    const Tensor ce = -(y * torch::log_softmax(z, 1)).sum() / n;
    ctx->save_for_backward({p, y, inter, denom});
    ctx->saved_data["shape"] = logits.sizes().vec();
    ctx->saved_data["n"] = n;
    return 0.5 * (dice_loss + ce);
  }

  static tensor_list backward(AutogradContext* ctx, tensor_list grads) {
    const auto saved = ctx->get_saved_variables();
    const Tensor& p = saved[0];
    const Tensor& y = saved[1];
    const Tensor& inter = saved[2];
    const Tensor& denom = saved[3];
    const double n = ctx->saved_data["n"].toDouble();
    const double k = static_cast<double>(p.size(1));
    const Tensor d = denom.view({1, -1, 1});
    const Tensor i = inter.view({1, -1, 1});
    // d(dice_k)/dp = 2y/den - (2I + s)/den^2 ; L_dice = 1 - mean_k dice_k
    const Tensor grad_p = -(1.0 / k) * (2.0 * y / d - (2.0 * i + kDiceSmooth) / (d * d));
    Tensor g = softmax_backward(p, grad_p) + (p - y) / n;
    g = 0.5 * g * grads[0];
    return {g.reshape(ctx->saved_data["shape"].toIntVector()), Tensor()};
  }
};

struct CvaeLossFn : torch::autograd::Function<CvaeLossFn> {
  static Tensor forward(AutogradContext* ctx, Tensor x, Tensor x_hat, Tensor mu, Tensor logvar,
                        double lambda_kl) {
    const int64_t rows = x.size(0);
    const Tensor diff = (x - x_hat).reshape({rows, -1});
    const double per_row = static_cast<double>(diff.size(1));
    const Tensor rec = diff.abs().sum(1) / per_row;
    const Tensor kl = 0.5 * (mu * mu + logvar.exp() - logvar - 1.0).sum(1);
    ctx->save_for_backward({diff, mu, logvar});
    ctx->saved_data["lambda_kl"] = lambda_kl;
    ctx->saved_data["per_row"] = per_row;
    ctx->saved_data["shape"] = x.sizes().vec();
    return (rec + lambda_kl * kl).sum();
  }

  static tensor_list backward(AutogradContext* ctx, tensor_list grads) {
    const auto saved = ctx->get_saved_variables();
    const Tensor& diff = saved[0];
    const Tensor& mu = saved[1];
    const Tensor& logvar = saved[2];
    const double lambda_kl = ctx->saved_data["lambda_kl"].toDouble();
    const double per_row = ctx->saved_data["per_row"].toDouble();
    const auto shape = ctx->saved_data["shape"].toIntVector();
    const Tensor& g = grads[0];
    const Tensor gx = (diff.sign() / per_row * g).reshape(shape);
    const Tensor gmu = lambda_kl * mu * g;
    const Tensor glv = lambda_kl * 0.5 * (logvar.exp() - 1.0) * g;
    return {gx, -gx, gmu, glv, Tensor()};
  }
};

struct Gram {
  int64_t n = 0;
  std::vector<double> k;         // kernel matrix, row-major
  std::vector<double> centered;  // H K H
};

std::vector<double> rows_as_double(const Tensor& t) {
  const Tensor d = t.detach().to(torch::kCPU, torch::kDouble).contiguous();
  return std::vector<double>(d.data_ptr<double>(), d.data_ptr<double>() + d.numel());
}

double squared_distance(const std::vector<double>& x, int64_t dim, int64_t i, int64_t j) {
  double s = 0.0;
  for (int64_t f = 0; f < dim; ++f) {
    const double t = x[static_cast<std::size_t>(i * dim + f)] - x[static_cast<std::size_t>(j * dim + f)];
    s += t * t;
  }
  return s;
}

double median_of_rows(const std::vector<double>& x, int64_t n, int64_t dim) {
  std::vector<double> dist;
  dist.reserve(static_cast<std::size_t>(n * (n - 1) / 2));
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = i + 1; j < n; ++j) dist.push_back(std::sqrt(squared_distance(x, dim, i, j)));
  }
  if (dist.empty()) return kBandwidthFloor;
  std::sort(dist.begin(), dist.end());
  const std::size_t m = dist.size();
  const double med = m % 2 ? dist[m / 2] : 0.5 * (dist[m / 2 - 1] + dist[m / 2]);
  return std::max(med, kBandwidthFloor);
}

Gram rbf_gram(const std::vector<double>& x, int64_t n, int64_t dim, double sigma) {
  Gram g;
  g.n = n;
  const auto un = static_cast<std::size_t>(n);
  g.k.assign(un * un, 0.0);
  const double inv = 1.0 / (sigma * sigma);
  for (int64_t i = 0; i < n; ++i) {
    g.k[static_cast<std::size_t>(i * n + i)] = 1.0;
    for (int64_t j = i + 1; j < n; ++j) {
      const double v = std::exp(-squared_distance(x, dim, i, j) * inv);
      g.k[static_cast<std::size_t>(i * n + j)] = v;
      g.k[static_cast<std::size_t>(j * n + i)] = v;
    }
  }
  // H K H = K - row_mean - col_mean + grand_mean (K symmetric).
  std::vector<double> row_mean(un);
  std::vector<double> scratch(un);
  for (std::size_t i = 0; i < un; ++i) {
    std::copy_n(g.k.begin() + static_cast<std::ptrdiff_t>(i * un), un, scratch.begin());
    row_mean[i] = sorted_sum(scratch) / static_cast<double>(n);
  }
  std::vector<double> all(g.k);
  const double grand = sorted_sum(all) / static_cast<double>(n * n);
  g.centered.resize(un * un);
  for (std::size_t i = 0; i < un; ++i) {
    for (std::size_t j = 0; j < un; ++j) {
      g.centered[i * un + j] = ((g.k[i * un + j] - row_mean[i]) - row_mean[j]) + grand;
    }
  }
  return g;
}

double hsic_value(const Gram& gc, const Gram& gb) {
  std::vector<double> prod(gc.k.size());
  for (std::size_t i = 0; i < prod.size(); ++i) prod[i] = gc.centered[i] * gb.centered[i];
  const double nm1 = static_cast<double>(gc.n - 1);
  return sorted_sum(prod) / (nm1 * nm1);
}

// dHSIC/dx_i = -4 / (sigma^2 (N-1)^2) * sum_j Kother~_ij K_ij (x_i - x_j)
std::vector<double> hsic_grad(const std::vector<double>& x, int64_t dim, const Gram& own,
                              const Gram& other, double sigma) {
  const int64_t n = own.n;
  const double nm1 = static_cast<double>(n - 1);
  const double scale = -4.0 / (sigma * sigma * nm1 * nm1);
  std::vector<double> g(x.size(), 0.0);
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const auto ij = static_cast<std::size_t>(i * n + j);
      const double w = scale * other.centered[ij] * own.k[ij];
      for (int64_t f = 0; f < dim; ++f) {
        g[static_cast<std::size_t>(i * dim + f)] +=
            w * (x[static_cast<std::size_t>(i * dim + f)] - x[static_cast<std::size_t>(j * dim + f)]);
      }
    }
  }
  return g;
}

Tensor to_tensor_like(const std::vector<double>& v, const Tensor& like) {
  return torch::tensor(v, torch::kDouble).reshape(like.sizes()).to(like.options());
}

struct HsicFn : torch::autograd::Function<HsicFn> {
  static Tensor forward(AutogradContext* ctx, Tensor c, Tensor b, double sigma_c, double sigma_b) {
    const int64_t n = c.size(0);
    const auto xc = rows_as_double(c);
    const auto xb = rows_as_double(b);
    const Gram gc = rbf_gram(xc, n, c.size(1), sigma_c);
    const Gram gb = rbf_gram(xb, n, b.size(1), sigma_b);
    const double value = hsic_value(gc, gb);
    ctx->save_for_backward({c, b});
    ctx->saved_data["sigma_c"] = sigma_c;
    ctx->saved_data["sigma_b"] = sigma_b;
    return torch::tensor(value, c.options().requires_grad(false));
  }

  static tensor_list backward(AutogradContext* ctx, tensor_list grads) {
    const auto saved = ctx->get_saved_variables();
    const Tensor& c = saved[0];
    const Tensor& b = saved[1];
    const double sigma_c = ctx->saved_data["sigma_c"].toDouble();
    const double sigma_b = ctx->saved_data["sigma_b"].toDouble();
    const int64_t n = c.size(0);
    const auto xc = rows_as_double(c);
    const auto xb = rows_as_double(b);
    const Gram gc = rbf_gram(xc, n, c.size(1), sigma_c);
    const Gram gb = rbf_gram(xb, n, b.size(1), sigma_b);
    const Tensor g = grads[0];
    Tensor dc = to_tensor_like(hsic_grad(xc, c.size(1), gc, gb, sigma_c), c) * g;
    Tensor db = to_tensor_like(hsic_grad(xb, b.size(1), gb, gc, sigma_b), b) * g;
    return {dc, db, Tensor(), Tensor()};
  }
};

struct RcLossFn : torch::autograd::Function<RcLossFn> {
  static Tensor forward(AutogradContext* ctx, Tensor a, Tensor labels) {
    const Tensor y = labels.reshape(a.sizes()).ne(0).to(a.scalar_type());
    const Tensor inter = (a * y).sum();
    const Tensor denom = a.sum() + y.sum() + kDiceSmooth;
    const Tensor dice_loss = 1.0 - (2.0 * inter + kDiceSmooth) / denom;
    const Tensor ac = a.clamp(kProbClamp, 1.0 - kProbClamp);
    const double n = static_cast<double>(a.numel());
    const Tensor bce = -(y * ac.log() + (1.0 - y) * (1.0 - ac).log()).sum() / n;
    ctx->save_for_backward({a, y, inter, denom});
    ctx->saved_data["n"] = n;
    return dice_loss + bce;
  }

  static tensor_list backward(AutogradContext* ctx, tensor_list grads) {
    const auto saved = ctx->get_saved_variables();
    const Tensor& a = saved[0];
    const Tensor& y = saved[1];
    const Tensor& inter = saved[2];
    const Tensor& denom = saved[3];
    const double n = ctx->saved_data["n"].toDouble();
    const Tensor g_dice = -(2.0 * y / denom - (2.0 * inter + kDiceSmooth) / (denom * denom));
    const Tensor inside = (a > kProbClamp).logical_and(a < 1.0 - kProbClamp).to(a.scalar_type());
    const Tensor g_bce = -(y / a - (1.0 - y) / (1.0 - a)) / n * inside;
    return {(g_dice + g_bce.nan_to_num(0.0)) * grads[0], Tensor()};
  }
};

struct ConfusionLossFn : torch::autograd::Function<ConfusionLossFn> {
  static Tensor forward(AutogradContext* ctx, Tensor logits) {
    const double k = static_cast<double>(logits.size(1));
    const Tensor p = torch::softmax(logits, 1);
    const Tensor diff = p - 1.0 / k;
    ctx->save_for_backward({p, diff});
    return (diff * diff).mean();
  }

  static tensor_list backward(AutogradContext* ctx, tensor_list grads) {
    const auto saved = ctx->get_saved_variables();
    const Tensor& p = saved[0];
    const Tensor& diff = saved[1];
    const Tensor grad_p = 2.0 * diff / static_cast<double>(p.numel());
    return {softmax_backward(p, grad_p) * grads[0]};
  }
};

struct DiscrepancyLossFn : torch::autograd::Function<DiscrepancyLossFn> {
  static Tensor forward(AutogradContext* ctx, Tensor a, Tensor yhat) {
    const int64_t batch = a.size(0);
    const Tensor av = a.reshape({batch, -1});
    const Tensor bv = yhat.reshape({batch, -1});
    const Tensor dot = (av * bv).sum(1);
    const Tensor na = av.norm(2, 1);
    const Tensor nb = bv.norm(2, 1);
    const Tensor den = na * nb + kCosineEps;
    ctx->save_for_backward({av, bv, dot, na, nb, den});
    ctx->saved_data["a_shape"] = a.sizes().vec();
    ctx->saved_data["b_shape"] = yhat.sizes().vec();
    return (dot / den).mean();
  }

  static tensor_list backward(AutogradContext* ctx, tensor_list grads) {
    const auto s = ctx->get_saved_variables();
    const Tensor &av = s[0], &bv = s[1], &dot = s[2], &na = s[3], &nb = s[4], &den = s[5];
    const double batch = static_cast<double>(av.size(0));
    const Tensor g = grads[0] / batch;
    auto unit = [](const Tensor& v, const Tensor& norm) {
      return torch::where(norm.unsqueeze(1) > 0, v / norm.unsqueeze(1), torch::zeros_like(v));
    };
    const Tensor d2 = (den * den).unsqueeze(1);
    // d cos / da = b/den - dot * |b| * (a/|a|) / den^2
    const Tensor ga = bv / den.unsqueeze(1) - (dot * nb).unsqueeze(1) * unit(av, na) / d2;
    const Tensor gb = av / den.unsqueeze(1) - (dot * na).unsqueeze(1) * unit(bv, nb) / d2;
    return {(ga * g).reshape(ctx->saved_data["a_shape"].toIntVector()),
            (gb * g).reshape(ctx->saved_data["b_shape"].toIntVector())};
  }
};

}  // namespace

Tensor seg_loss(const Tensor& logits, const Tensor& labels) {
  check_logits_labels(logits, labels, "seg_loss");
  if (logits.size(1) != 4) throw std::invalid_argument("seg_loss: expected K=4 classes");
  return SegLossFn::apply(logits, labels);
}

Tensor kl_standard_normal(const Tensor& mu, const Tensor& logvar) {
  return 0.5 * (mu * mu + logvar.exp() - logvar - 1.0).sum(-1);
}

Tensor cvae_loss(const Tensor& x, const Tensor& x_hat, const Tensor& mu, const Tensor& logvar,
                 double lambda_kl) {
  if (x.sizes() != x_hat.sizes()) {
    throw std::invalid_argument("cvae_loss: x " + c10::str(x.sizes()) + " vs x_hat " +
                                c10::str(x_hat.sizes()));
  }
  if (mu.dim() != 2 || mu.sizes() != logvar.sizes() || mu.size(0) != x.size(0)) {
    throw std::invalid_argument("cvae_loss: posterior rows do not match reconstruction pairs");
  }
  return CvaeLossFn::apply(x, x_hat, mu, logvar, lambda_kl);
}

double median_bandwidth(const Tensor& rows) {
  const auto x = rows_as_double(rows);
  return median_of_rows(x, rows.size(0), rows.numel() / std::max<int64_t>(rows.size(0), 1));
}

Tensor hsic(const Tensor& c, const Tensor& b, Bandwidths bw) {
  if (c.dim() != 2 || b.dim() != 2) throw std::invalid_argument("hsic: inputs must be [N, d]");
  if (c.size(0) != b.size(0)) throw std::invalid_argument("hsic: row counts differ");
  if (c.size(0) < 2) {
    throw std::invalid_argument("hsic: needs N >= 2 paired rows, got " + std::to_string(c.size(0)));
  }
  const double sc = bw.c.value_or(median_bandwidth(c));
  const double sb = bw.b.value_or(median_bandwidth(b));
  return HsicFn::apply(c, b, std::max(sc, kBandwidthFloor), std::max(sb, kBandwidthFloor));
}

double hsic_permutation_pvalue(const Tensor& c, const Tensor& b, int permutations,
                               std::uint64_t seed) {
  if (permutations < 1) throw std::invalid_argument("hsic_permutation_pvalue: permutations < 1");
  const int64_t n = c.size(0);
  if (n < 2) throw std::invalid_argument("hsic_permutation_pvalue: needs N >= 2");
  const auto xc = rows_as_double(c);
  const auto xb = rows_as_double(b);
  const int64_t db = b.size(1);
  const Gram gc = rbf_gram(xc, n, c.size(1), median_of_rows(xc, n, c.size(1)));
  const double sb = median_of_rows(xb, n, db);
  const double observed = hsic_value(gc, rbf_gram(xb, n, db, sb));
  Rng rng(seed);
  std::vector<int64_t> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  std::vector<double> shuffled(xb.size());
  int exceed = 0;
  for (int r = 0; r < permutations; ++r) {
    rng.shuffle(perm.begin(), perm.end());
    for (int64_t i = 0; i < n; ++i) {
      std::copy_n(xb.begin() + perm[static_cast<std::size_t>(i)] * db, db, shuffled.begin() + i * db);
    }
    if (hsic_value(gc, rbf_gram(shuffled, n, db, sb)) >= observed) ++exceed;
  }
  return (1.0 + exceed) / (1.0 + permutations);
}

Tensor rc_loss(const Tensor& a_causal, const Tensor& labels) {
  check_same_voxels(a_causal, labels, "rc_loss");
  return RcLossFn::apply(a_causal, labels);
}

Tensor confusion_loss(const Tensor& logits) {
  if (logits.dim() < 2 || logits.size(1) < 2) {
    throw std::invalid_argument("confusion_loss: expected [B, K>=2, ...] logits");
  }
  return ConfusionLossFn::apply(logits);
}

Tensor discrepancy_loss(const Tensor& a_causal, const Tensor& y_hat_bias) {
  check_same_voxels(a_causal, y_hat_bias, "discrepancy_loss");
  return DiscrepancyLossFn::apply(a_causal, y_hat_bias);
}

NonFiniteLoss::NonFiniteLoss(std::string term, double value)
    : std::runtime_error("non-finite loss term '" + term + "' (" + std::to_string(value) + ")"),
      term_(std::move(term)) {}

double weighted_sum(double seg, double cvae, double hsic, double rc, double conf, double dis,
                    const LossWeights& l) {
  double t = seg;
  t = t + l.cvae * cvae;
  t = t + l.hsic * hsic;
  t = t + l.rc * rc;
  t = t + l.conf * conf;
  t = t + l.dis * dis;
  return t;
}

nlohmann::json LossBundle::to_json() const {
  return nlohmann::json{{"seg", seg},   {"cvae", cvae},   {"hsic", hsic},
                        {"rc", rc},     {"conf", conf},   {"dis", dis},
                        {"total", total}, {"lambdas", cdseg::to_json(lambdas)},
                        {"skipped", skipped}};
}

LossBundle LossBundle::from_json(const nlohmann::json& j) {
  LossBundle b;
  b.seg = j.at("seg").get<double>();
  b.cvae = j.at("cvae").get<double>();
  b.hsic = j.at("hsic").get<double>();
  b.rc = j.at("rc").get<double>();
  b.conf = j.at("conf").get<double>();
  b.dis = j.at("dis").get<double>();
  b.total = j.at("total").get<double>();
  const auto& l = j.at("lambdas");
  b.lambdas = {l.at("cvae").get<double>(), l.at("hsic").get<double>(), l.at("rc").get<double>(),
               l.at("conf").get<double>(), l.at("dis").get<double>()};
  if (j.contains("skipped")) b.skipped = j.at("skipped").get<std::vector<std::string>>();
  return b;
}

TotalLoss total_loss(const LossComponents& parts, const LossWeights& lambdas) {
  if (!parts.seg.defined()) throw std::invalid_argument("total_loss: segmentation term is required");
  TotalLoss out;
  out.bundle.lambdas = lambdas;
  struct Term {
    const char* name;
    const Tensor* value;
    double weight;
    double* slot;
  };
  const std::array<Term, 6> terms = {{{"seg", &parts.seg, 1.0, &out.bundle.seg},
                                      {"cvae", &parts.cvae, lambdas.cvae, &out.bundle.cvae},
                                      {"hsic", &parts.hsic, lambdas.hsic, &out.bundle.hsic},
                                      {"rc", &parts.rc, lambdas.rc, &out.bundle.rc},
                                      {"conf", &parts.conf, lambdas.conf, &out.bundle.conf},
                                      {"dis", &parts.dis, lambdas.dis, &out.bundle.dis}}};
  Tensor total;
  for (const Term& t : terms) {
    if (!t.value->defined()) {
      out.bundle.skipped.emplace_back(t.name);
      *t.slot = 0.0;
      continue;
    }
    const Tensor v = t.value->to(torch::kDouble).reshape({});
    const double x = v.item<double>();
    if (!std::isfinite(x)) throw NonFiniteLoss(t.name, x);
    *t.slot = x;
    total = total.defined() ? total + t.weight * v : v;
  }
  out.bundle.total = total.item<double>();
  if (!std::isfinite(out.bundle.total)) throw NonFiniteLoss("total", out.bundle.total);
  out.total = total;
  return out;
}

}  // namespace cdseg::losses
