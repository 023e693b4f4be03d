#include "cdseg/types.hpp"

#include <charconv>
#include <sstream>

namespace cdseg {

std::string_view modality_name(Modality m) {
  switch (m) {
    case Modality::T1: return "T1";
    case Modality::T1ce: return "T1ce";
    case Modality::T2: return "T2";
    case Modality::FLAIR: return "FLAIR";
  }
  throw std::invalid_argument("unknown modality id " + std::to_string(static_cast<int>(m)));
}

Modality modality_from_name(std::string_view name) {
  for (Modality m : kAllModalities) {
    if (modality_name(m) == name) return m;
  }
  throw std::invalid_argument("unknown modality '" + std::string(name) + "'");
}

std::string GridShape::str() const {
  std::ostringstream os;
  os << d << "x" << h << "x" << w;
  return os.str();
}

GridShape parse_grid_shape(std::string_view text) {
  std::array<std::int64_t, 3> dims{};
  std::size_t n = 0;
  const char* p = text.data();
  const char* end = text.data() + text.size();
  while (p < end) {
    if (n == 3) throw std::invalid_argument("grid shape needs 2 or 3 dimensions: " + std::string(text));
    std::int64_t v = 0;
    auto [next, ec] = std::from_chars(p, end, v);
    if (ec != std::errc() || v <= 0) {
      throw std::invalid_argument("malformed grid shape '" + std::string(text) + "'");
    }
    dims[n++] = v;
    p = next;
    if (p < end) {
      if (*p != 'x' && *p != ',') {
        throw std::invalid_argument("malformed grid shape '" + std::string(text) + "'");
      }
      ++p;
    }
  }
  if (n == 2) return GridShape{1, dims[0], dims[1]};
  if (n != 3) throw std::invalid_argument("grid shape needs 2 or 3 dimensions: " + std::string(text));
  return GridShape{dims[0], dims[1], dims[2]};
}

Availability Availability::of(std::initializer_list<Modality> ms) {
  Availability a;
  for (Modality m : ms) a.set(m);
  return a;
}

std::vector<Modality> Availability::modalities() const {
  std::vector<Modality> out;
  for (Modality m : kAllModalities) {
    if (has(m)) out.push_back(m);
  }
  return out;
}

std::array<float, kNumModalities> Availability::code() const {
  std::array<float, kNumModalities> c{};
  for (Modality m : kAllModalities) c[index_of(m)] = has(m) ? 1.0F : 0.0F;
  return c;
}

std::string Availability::str() const {
  if (empty()) return "none";
  // FLAIR first to match the table convention.
  static constexpr std::array<Modality, 4> order = {Modality::FLAIR, Modality::T1ce, Modality::T1,
                                                    Modality::T2};
  std::string s;
  for (Modality m : order) {
    if (!has(m)) continue;
    if (!s.empty()) s += '+';
    s += modality_name(m);
  }
  return s;
}

const std::array<Availability, 15>& subset_grid_masks() {
  using M = Modality;
  static const std::array<Availability, 15> masks = {
      Availability::of({M::FLAIR}),
      Availability::of({M::T1ce}),
      Availability::of({M::T1}),
      Availability::of({M::T2}),
      Availability::of({M::FLAIR, M::T1ce}),
      Availability::of({M::FLAIR, M::T1}),
      Availability::of({M::FLAIR, M::T2}),
      Availability::of({M::T1ce, M::T1}),
      Availability::of({M::T1ce, M::T2}),
      Availability::of({M::T1, M::T2}),
      Availability::of({M::FLAIR, M::T1ce, M::T1}),
      Availability::of({M::FLAIR, M::T1ce, M::T2}),
      Availability::of({M::FLAIR, M::T1, M::T2}),
      Availability::of({M::T1ce, M::T1, M::T2}),
      Availability::all(),
  };
  return masks;
}

}  // namespace cdseg
