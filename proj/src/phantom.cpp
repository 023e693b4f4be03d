#include "cdseg/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "cdseg/rng.hpp"

namespace cdseg {
namespace {

constexpr std::uint64_t kAnatomyStream = 0xA7A70;
constexpr std::uint64_t kStyleStream = 0x57A1E;
constexpr std::uint64_t kNoiseStream = 0x0153E;
constexpr int kMaxTumorAttempts = 200;

struct Wave {
  double kz, ky, kx, phase, amp;
};

// Sum of a few low-frequency cosines, rescaled to [0,1].
FloatVolume smooth_field(Rng& rng, GridShape s, int waves, double max_cycles) {
  std::vector<Wave> ws;
  ws.reserve(static_cast<std::size_t>(waves));
  for (int i = 0; i < waves; ++i) {
    Wave w{};
    w.kz = s.planar() ? 0.0 : rng.uniform(-max_cycles, max_cycles);
    w.ky = rng.uniform(-max_cycles, max_cycles);
    w.kx = rng.uniform(-max_cycles, max_cycles);
    w.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    w.amp = rng.uniform(0.5, 1.0);
    ws.push_back(w);
  }
  FloatVolume f(s);
  double lo = 1e300;
  double hi = -1e300;
  std::vector<double> raw(f.size());
  for (std::int64_t z = 0; z < s.d; ++z) {
    for (std::int64_t y = 0; y < s.h; ++y) {
      for (std::int64_t x = 0; x < s.w; ++x) {
        const double uz = static_cast<double>(z) / static_cast<double>(s.d);
        const double uy = static_cast<double>(y) / static_cast<double>(s.h);
        const double ux = static_cast<double>(x) / static_cast<double>(s.w);
        double v = 0.0;
        for (const Wave& w : ws) {
          v += w.amp * std::cos(2.0 * std::numbers::pi * (w.kz * uz + w.ky * uy + w.kx * ux) + w.phase);
        }
        const std::size_t i = f.index(z, y, x);
        raw[i] = v;
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
    }
  }
  const double span = hi > lo ? hi - lo : 1.0;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    f.data[i] = static_cast<float>((raw[i] - lo) / span);
  }
  return f;
}

using Mat3 = std::array<std::array<double, 3>, 3>;

Mat3 random_rotation(Rng& rng, bool planar) {
  if (planar) {
    const double t = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double c = std::cos(t);
    const double s = std::sin(t);
    return Mat3{{{1, 0, 0}, {0, c, -s}, {0, s, c}}};
  }
  // Uniform random unit quaternion.
  double q[4];
  double n = 0.0;
  do {
    n = 0.0;
    for (double& v : q) {
      v = rng.normal();
      n += v * v;
    }
  } while (n < 1e-12);
  n = std::sqrt(n);
  const double a = q[0] / n, b = q[1] / n, c = q[2] / n, d = q[3] / n;
  return Mat3{{{a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)},
               {2 * (b * c + a * d), a * a - b * b + c * c - d * d, 2 * (c * d - a * b)},
               {2 * (b * d - a * c), 2 * (c * d + a * b), a * a - b * b - c * c + d * d}}};
}

void check_grid(GridShape s) {
  const bool ok = s.planar() ? (s.h >= 16 && s.w >= 16) : (s.d >= 16 && s.h >= 16 && s.w >= 16);
  if (!ok) {
    throw std::invalid_argument("grid " + s.str() +
                                " too small for a phantom tumor: every dimension must be >= 16 "
                                "(depth 1 allowed for planar grids)");
  }
}

void check_modality(Modality m) {
  if (index_of(m) >= kNumModalities) {
    throw std::invalid_argument("unknown modality id " + std::to_string(index_of(m)));
  }
}

}  // namespace

nlohmann::json to_json(const StyleRecord& r) {
  return nlohmann::json{{"modality", modality_name(r.modality)},
                        {"contrast_gamma", r.contrast_gamma},
                        {"bias_field_coeffs", r.bias_field_coeffs},
                        {"noise_sigma", r.noise_sigma},
                        {"texture_gain", r.texture_gain},
                        {"intensity_transfer", r.intensity_transfer},
                        {"seed", r.seed}};
}

StyleRecord style_from_json(const nlohmann::json& j) {
  StyleRecord r;
  r.modality = modality_from_name(j.at("modality").get<std::string>());
  r.contrast_gamma = j.at("contrast_gamma").get<double>();
  r.bias_field_coeffs = j.at("bias_field_coeffs").get<std::array<double, 6>>();
  r.noise_sigma = j.at("noise_sigma").get<double>();
  r.texture_gain = j.at("texture_gain").get<double>();
  r.intensity_transfer = j.at("intensity_transfer").get<std::array<double, kNumClasses>>();
  r.seed = j.at("seed").get<std::uint64_t>();
  return r;
}

std::array<double, kNumClasses> base_intensity_transfer(Modality m) {
  //                  BG     NCR/NET  ED     ET
  switch (m) {
    case Modality::T1: return {0.60, 0.22, 0.48, 0.40};
    case Modality::T1ce: return {0.55, 0.28, 0.50, 0.95};
    case Modality::T2: return {0.45, 0.75, 0.88, 0.68};
    case Modality::FLAIR: return {0.40, 0.55, 0.92, 0.70};
  }
  throw std::invalid_argument("unknown modality id " + std::to_string(static_cast<int>(m)));
}

AnatomyLatent sample_anatomy(std::uint64_t seed, GridShape s) {
  check_grid(s);
  Rng rng(derive_seed(seed, kAnatomyStream));

  AnatomyLatent a;
  a.grid_shape = s;
  a.seed = seed;
  a.tissue_field = smooth_field(rng, s, 8, 3.0);
  const FloatVolume wobble = smooth_field(rng, s, 6, 2.0);

  const std::array<double, 3> dims = {static_cast<double>(s.d), static_cast<double>(s.h),
                                      static_cast<double>(s.w)};
  std::array<double, 3> brain_c{};
  std::array<double, 3> brain_r{};
  for (int i = 0; i < 3; ++i) {
    brain_c[i] = (dims[i] - 1.0) / 2.0 + rng.uniform(-0.03, 0.03) * dims[i];
    brain_r[i] = rng.uniform(0.42, 0.47) * dims[i];
  }
  a.brain_mask = Volume<std::uint8_t>(s);
  for (std::int64_t z = 0; z < s.d; ++z) {
    for (std::int64_t y = 0; y < s.h; ++y) {
      for (std::int64_t x = 0; x < s.w; ++x) {
        const std::array<double, 3> p = {static_cast<double>(z), static_cast<double>(y),
                                         static_cast<double>(x)};
        double r2 = 0.0;
        for (int i = (s.planar() ? 1 : 0); i < 3; ++i) {
          const double t = (p[i] - brain_c[i]) / brain_r[i];
          r2 += t * t;
        }
        a.brain_mask.at(z, y, x) = r2 <= 1.0 ? 1 : 0;
      }
    }
  }

  for (int attempt = 0; attempt < kMaxTumorAttempts; ++attempt) {
    std::array<double, 3> axes{};
    for (int i = 0; i < 3; ++i) axes[i] = rng.uniform(0.13, 0.26) * dims[i];
    const Mat3 rot = random_rotation(rng, s.planar());
    const double reach = *std::max_element(axes.begin() + (s.planar() ? 1 : 0), axes.end());
    std::array<double, 3> c{};
    for (int i = 0; i < 3; ++i) {
      const double slack = std::max(0.0, brain_r[i] - reach - 1.0);
      c[i] = brain_c[i] + rng.uniform(-slack, slack);
    }
    if (s.planar()) c[0] = 0.0;
    const double tc_frac = rng.uniform(0.45, 0.70);
    const double ncr_frac = rng.bernoulli(0.8) ? tc_frac * rng.uniform(0.3, 0.65) : 0.0;
    const double roughness = rng.uniform(0.05, 0.2);

    LabelVolume labels(s, static_cast<std::uint8_t>(Label::BG));
    std::int64_t n_ed = 0;
    std::int64_t n_et = 0;
    bool escaped = false;
    for (std::int64_t z = 0; z < s.d && !escaped; ++z) {
      for (std::int64_t y = 0; y < s.h; ++y) {
        for (std::int64_t x = 0; x < s.w; ++x) {
          const std::array<double, 3> d = {static_cast<double>(z) - c[0],
                                           static_cast<double>(y) - c[1],
                                           static_cast<double>(x) - c[2]};
          double r2 = 0.0;
          for (int i = (s.planar() ? 1 : 0); i < 3; ++i) {
            double q = 0.0;
            for (int j = 0; j < 3; ++j) q += rot[i][j] * d[j];
            r2 += (q / axes[i]) * (q / axes[i]);
          }
          const std::size_t idx = labels.index(z, y, x);
          const double r = std::sqrt(r2) * (1.0 + roughness * (wobble.data[idx] - 0.5));
          if (r > 1.0) continue;
          if (!a.brain_mask.data[idx]) {
            escaped = true;
            break;
          }
          Label l = Label::ED;
          if (r <= ncr_frac) {
            l = Label::NCR_NET;
          } else if (r <= tc_frac) {
            l = Label::ET;
          }
          labels.data[idx] = static_cast<std::uint8_t>(l);
          n_ed += l == Label::ED;
          n_et += l == Label::ET;
        }
      }
    }
    if (escaped || n_ed < kMinRegionVoxels || n_et < kMinRegionVoxels) continue;
    a.label_map = std::move(labels);
    return a;
  }
  throw std::runtime_error("could not place a tumor with >= " + std::to_string(kMinRegionVoxels) +
                           " ED and ET voxels inside grid " + s.str());
}

StyleRecord sample_style(Modality modality, std::uint64_t style_seed) {
  const auto base = base_intensity_transfer(modality);
  Rng rng(derive_seed(style_seed, kStyleStream, static_cast<std::uint64_t>(index_of(modality))));
  StyleRecord r;
  r.modality = modality;
  r.seed = style_seed;
  r.contrast_gamma = std::exp(rng.uniform(std::log(0.7), std::log(1.5)));
  for (double& c : r.bias_field_coeffs) c = rng.uniform(-0.25, 0.25);
  r.noise_sigma = rng.uniform(0.01, 0.06);
  r.texture_gain = rng.uniform(0.1, 0.3);
  for (int k = 0; k < kNumClasses; ++k) r.intensity_transfer[k] = base[k] + rng.uniform(-0.05, 0.05);
  return r;
}

FloatVolume render_raw(const AnatomyLatent& anatomy, const StyleRecord& style) {
  const GridShape s = anatomy.grid_shape;
  check_modality(style.modality);
  Rng noise(derive_seed(style.seed, kNoiseStream, static_cast<std::uint64_t>(index_of(style.modality))));
  FloatVolume out(s);
  const auto coord = [](std::int64_t i, std::int64_t n) {
    return n > 1 ? 2.0 * static_cast<double>(i) / static_cast<double>(n - 1) - 1.0 : 0.0;
  };
  const auto& c = style.bias_field_coeffs;
  for (std::int64_t z = 0; z < s.d; ++z) {
    const double u = coord(z, s.d);
    for (std::int64_t y = 0; y < s.h; ++y) {
      const double v = coord(y, s.h);
      for (std::int64_t x = 0; x < s.w; ++x) {
        const std::size_t idx = out.index(z, y, x);
        if (!anatomy.brain_mask.data[idx]) continue;
        const double w = coord(x, s.w);
        const auto label = anatomy.label_map.data[idx];
        double base = style.intensity_transfer[label] +
                      style.texture_gain * (static_cast<double>(anatomy.tissue_field.data[idx]) - 0.5);
        base = std::clamp(base, 0.02, 1.0);
        const double g = std::pow(base, style.contrast_gamma);
        const double field =
            std::exp(c[0] * u + c[1] * v + c[2] * w + c[3] * u * u + c[4] * v * v + c[5] * w * w);
        double val = field * g;
        if (style.noise_sigma > 0.0) val += style.noise_sigma * noise.normal();
        out.data[idx] = static_cast<float>(val);
      }
    }
  }
  return out;
}

FloatVolume normalize_foreground(const FloatVolume& raw) {
  double sum = 0.0;
  double sq = 0.0;
  std::size_t n = 0;
  for (float v : raw.data) {
    if (v == 0.0F) continue;
    sum += v;
    sq += static_cast<double>(v) * v;
    ++n;
  }
  FloatVolume out(raw.shape);
  if (n == 0) return out;
  const double mean = sum / static_cast<double>(n);
  const double var = std::max(0.0, sq / static_cast<double>(n) - mean * mean);
  const double sd = var > 1e-24 ? std::sqrt(var) : 1.0;
  for (std::size_t i = 0; i < raw.data.size(); ++i) {
    if (raw.data[i] != 0.0F) out.data[i] = static_cast<float>((raw.data[i] - mean) / sd);
  }
  return out;
}

std::pair<FloatVolume, StyleRecord> render_modality(const AnatomyLatent& anatomy, Modality modality,
                                                    std::uint64_t style_seed) {
  check_modality(modality);
  StyleRecord style = sample_style(modality, style_seed);
  return {render(anatomy, style), style};
}

std::uint64_t checksum(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace cdseg
