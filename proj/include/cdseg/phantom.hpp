#pragma once

// Synthetic multimodal tumor phantoms. Anatomy (labels + tissue texture) and
// per-modality imaging style are drawn from separate random streams, so the
// anatomy/style factorization is known exactly for every generated case.

#include <array>
#include <cstdint>
#include <optional>
#include <utility>

#include <nlohmann/json.hpp>

#include "cdseg/types.hpp"

namespace cdseg {

struct AnatomyLatent {
  GridShape grid_shape;
  LabelVolume label_map;
  FloatVolume tissue_field;  // smooth texture in [0,1]
  Volume<std::uint8_t> brain_mask;
  std::uint64_t seed = 0;
};

struct StyleRecord {
  Modality modality = Modality::T1;
  double contrast_gamma = 1.0;
  // log-bias field = sum_k coeff_k * {u, v, w, u^2, v^2, w^2}_k over coordinates in [-1,1]
  std::array<double, 6> bias_field_coeffs{};
  double noise_sigma = 0.0;
  double texture_gain = 0.0;
  // Mean intensity per label {BG tissue, NCR/NET, ED, ET} before gamma/bias/noise.
  std::array<double, kNumClasses> intensity_transfer{};
  std::uint64_t seed = 0;
};

nlohmann::json to_json(const StyleRecord& r);
StyleRecord style_from_json(const nlohmann::json& j);

struct MultimodalSample {
  std::string name;
  GridShape shape;
  std::array<FloatVolume, kNumModalities> volumes;
  Availability availability;
  LabelVolume label_map;
  std::array<std::optional<StyleRecord>, kNumModalities> style_records;
};

/// Baseline contrast table for a modality (FLAIR/T2 bright edema, T1ce bright
/// enhancing rim, T1 dark core).
std::array<double, kNumClasses> base_intensity_transfer(Modality m);

inline constexpr int kMinRegionVoxels = 8;

/// Throws std::invalid_argument for grids with a dimension below 16 (planar
/// grids with depth 1 are allowed), std::runtime_error if no valid tumor can
/// be placed.
AnatomyLatent sample_anatomy(std::uint64_t seed, GridShape grid_shape);

StyleRecord sample_style(Modality modality, std::uint64_t style_seed);

/// Intensities before normalization; zero outside the brain.
FloatVolume render_raw(const AnatomyLatent& anatomy, const StyleRecord& style);

/// Z-score over nonzero voxels; zero voxels stay zero.
FloatVolume normalize_foreground(const FloatVolume& raw);

inline FloatVolume render(const AnatomyLatent& anatomy, const StyleRecord& style) {
  return normalize_foreground(render_raw(anatomy, style));
}

std::pair<FloatVolume, StyleRecord> render_modality(const AnatomyLatent& anatomy,
                                                    Modality modality,
                                                    std::uint64_t style_seed);

/// FNV-1a over the raw bytes; used for determinism checks.
std::uint64_t checksum(std::span<const std::uint8_t> bytes);
template <typename T>
std::uint64_t checksum(const Volume<T>& v) {
  return checksum(std::span<const std::uint8_t>(
      reinterpret_cast<const std::uint8_t*>(v.data.data()), v.data.size() * sizeof(T)));
}

}  // namespace cdseg
