#pragma once

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "cdseg/rng.hpp"

namespace testutil {

inline torch::Tensor normal_tensor(std::vector<int64_t> shape, std::uint64_t seed, double scale = 1.0) {
  cdseg::Rng rng(seed);
  int64_t n = 1;
  for (auto s : shape) n *= s;
  std::vector<double> v(static_cast<std::size_t>(n));
  for (auto& x : v) x = scale * rng.normal();
  return torch::tensor(v, torch::kDouble).reshape(shape);
}

inline torch::Tensor uniform_tensor(std::vector<int64_t> shape, std::uint64_t seed, double lo, double hi) {
  cdseg::Rng rng(seed);
  int64_t n = 1;
  for (auto s : shape) n *= s;
  std::vector<double> v(static_cast<std::size_t>(n));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return torch::tensor(v, torch::kDouble).reshape(shape);
}

inline torch::Tensor label_tensor(std::vector<int64_t> shape, std::uint64_t seed, int classes = 4) {
  cdseg::Rng rng(seed);
  int64_t n = 1;
  for (auto s : shape) n *= s;
  std::vector<int64_t> v(static_cast<std::size_t>(n));
  for (auto& x : v) x = static_cast<int64_t>(rng.below(static_cast<std::uint64_t>(classes)));
  return torch::tensor(v, torch::kLong).reshape(shape);
}

inline std::vector<double> values(const torch::Tensor& t) {
  const torch::Tensor c = t.detach().to(torch::kDouble).contiguous();
  return {c.data_ptr<double>(), c.data_ptr<double>() + c.numel()};
}

/// Central differences of a scalar function of `x` (float64), step h.
template <typename Fn>
torch::Tensor numeric_gradient(Fn&& f, const torch::Tensor& x, double h = 1e-3) {
  torch::NoGradGuard guard;
  torch::Tensor base = x.detach().clone().contiguous();
  torch::Tensor g = torch::zeros_like(base);
  double* p = base.data_ptr<double>();
  double* gp = g.data_ptr<double>();
  for (int64_t i = 0; i < base.numel(); ++i) {
    const double keep = p[i];
    p[i] = keep + h;
    const double up = f(base).template item<double>();
    p[i] = keep - h;
    const double down = f(base).template item<double>();
    p[i] = keep;
    gp[i] = (up - down) / (2 * h);
  }
  return g;
}

inline double relative_error(const torch::Tensor& a, const torch::Tensor& b) {
  const double num = (a - b).norm().item<double>();
  const double den = std::max({a.norm().item<double>(), b.norm().item<double>(), 1e-12});
  return num / den;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("cdseg_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

// Relative error of autograd's gradient of scalar f at x0 against central differences.
template <typename Fn>
double grad_error(Fn&& f, const torch::Tensor& x0) {
  const torch::Tensor x = x0.clone().requires_grad_(true);
  const torch::Tensor out = f(x);
  const torch::Tensor analytic = torch::autograd::grad({out}, {x})[0];
  return relative_error(analytic, numeric_gradient(f, x0));
}

}  // namespace testutil
