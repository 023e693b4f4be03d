#pragma once

#include <array>
#include <bitset>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace cdseg {

inline constexpr int kNumModalities = 4;
inline constexpr int kNumClasses = 4;

enum class Modality : std::uint8_t { T1 = 0, T1ce = 1, T2 = 2, FLAIR = 3 };

inline constexpr std::array<Modality, kNumModalities> kAllModalities = {
    Modality::T1, Modality::T1ce, Modality::T2, Modality::FLAIR};

std::string_view modality_name(Modality m);
Modality modality_from_name(std::string_view name);

inline constexpr int index_of(Modality m) { return static_cast<int>(m); }

// Voxel labels, contiguous so they double as class indices.
enum class Label : std::uint8_t { BG = 0, NCR_NET = 1, ED = 2, ET = 3 };

struct GridShape {
  std::int64_t d = 32;
  std::int64_t h = 32;
  std::int64_t w = 32;

  std::int64_t voxels() const { return d * h * w; }
  bool planar() const { return d == 1; }
  std::array<std::int64_t, 3> dims() const { return {d, h, w}; }
  bool operator==(const GridShape&) const = default;
  std::string str() const;
};

GridShape parse_grid_shape(std::string_view text);

/// Which of the four modalities are present (the delta_1..delta_4 indicators).
class Availability {
 public:
  constexpr Availability() = default;
  constexpr explicit Availability(std::uint8_t bits) : bits_(bits & 0xF) {}

  static constexpr Availability all() { return Availability(0xF); }
  static Availability of(std::initializer_list<Modality> ms);

  constexpr bool has(Modality m) const { return (bits_ >> index_of(m)) & 1U; }
  constexpr bool empty() const { return bits_ == 0; }
  constexpr std::uint8_t bits() const { return bits_; }
  int count() const { return static_cast<int>(std::bitset<4>(bits_).count()); }

  void set(Modality m, bool on = true) {
    if (on) {
      bits_ |= static_cast<std::uint8_t>(1U << index_of(m));
    } else {
      bits_ &= static_cast<std::uint8_t>(~(1U << index_of(m)));
    }
  }

  std::vector<Modality> modalities() const;
  std::array<float, kNumModalities> code() const;
  /// e.g. "FLAIR+T1ce"
  std::string str() const;

  constexpr bool operator==(const Availability&) const = default;

 private:
  std::uint8_t bits_ = 0;
};

/// The 15 non-empty subsets in the column order of the missing-modality tables.
const std::array<Availability, 15>& subset_grid_masks();

/// Dense (D,H,W) voxel array.
template <typename T>
struct Volume {
  GridShape shape;
  std::vector<T> data;

  Volume() = default;
  explicit Volume(GridShape s, T fill = T{})
      : shape(s), data(static_cast<std::size_t>(s.voxels()), fill) {}

  std::size_t index(std::int64_t z, std::int64_t y, std::int64_t x) const {
    return static_cast<std::size_t>((z * shape.h + y) * shape.w + x);
  }
  T& at(std::int64_t z, std::int64_t y, std::int64_t x) { return data[index(z, y, x)]; }
  const T& at(std::int64_t z, std::int64_t y, std::int64_t x) const {
    return data[index(z, y, x)];
  }
  std::size_t size() const { return data.size(); }
  std::span<const T> view() const { return data; }
};

using FloatVolume = Volume<float>;
using LabelVolume = Volume<std::uint8_t>;

}  // namespace cdseg
