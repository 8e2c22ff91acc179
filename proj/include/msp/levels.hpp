#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "msp/common.hpp"

namespace msp {

enum class SchemeKind { Fixed, PoT, SPoT };

// Quantization scheme: bit width m, and for SPoT the sub-field split
// 1 (sign) + m1 + m2 = m with m1 >= m2 >= 1.
struct QuantScheme {
  SchemeKind kind = SchemeKind::Fixed;
  int bits = 4;
  int m1 = 0;
  int m2 = 0;

  static QuantScheme fixed(int m);
  static QuantScheme pot(int m);
  static QuantScheme spot(int m, int m1, int m2);

  void validate() const;
  bool operator==(const QuantScheme&) const = default;
};

// The finite set of unit quantization levels in [-1, 1] for a scheme,
// together with its code tables. Levels are symmetric around 0, strictly
// sorted, and always contain 0 and +-1.
//
// Code layout (MSB first): Fixed/PoT [sign | magnitude field]; SPoT
// [sign | m1 field | m2 field]. Sign bit 1 means negative; the negative-zero
// code is canonicalized away (it is not a valid code).
//
// For SPoT every positive level also carries its exact dyadic raw numerator
// in a fixed-point frame with frac_bits = 2^m1 - 1 fractional bits; the raw
// sums span [0, n_raw] and unit levels are raw / (n_raw * 2^frac_bits).
class LevelSet {
 public:
  QuantScheme scheme;
  std::vector<double> levels;  // sorted, unit magnitude <= 1

  double n_raw = 1.0;     // SPoT normalization constant (max raw sum)
  int frac_bits = 0;      // SPoT fixed-point frame S
  double raw_denom = 1;   // divisor turning a signed integer code value into a unit level

  std::size_t size() const { return levels.size(); }
  double level(std::size_t i) const { return levels[i]; }
  std::uint32_t code_of_index(std::size_t i) const { return canonical_code_[i]; }

  // Exact unit level -> canonical code; unknown levels are an error.
  std::uint32_t encode(double unit_level) const;
  // Any valid code -> unit level; invalid codes are an error.
  double decode(std::uint32_t code) const;
  bool code_valid(std::uint32_t code) const;

  // Signed integer numerator of level i in the scheme's fixed-point frame:
  // Fixed m: k with level = k / (2^{m-1}-1); SPoT: signed raw with
  // level = raw / (n_raw * 2^S). Exact for Fixed and SPoT.
  std::int64_t raw_of_index(std::size_t i) const { return raw_[i]; }
  std::int64_t raw_of_code(std::uint32_t code) const;

  // Index of the exact unit level, or error.
  std::size_t index_of(double unit_level) const;

  friend LevelSet build_levels(const QuantScheme& scheme);

 private:
  std::vector<std::uint32_t> canonical_code_;   // per level index
  std::vector<std::int64_t> raw_;               // per level index (0 for PoT m >= 8)
  std::vector<std::int32_t> code_to_index_;     // dense table, -1 = invalid
};

LevelSet build_levels(const QuantScheme& scheme);

struct QuantValue {
  double value = 0.0;       // alpha * unit_level
  double unit_level = 0.0;  // member of the LevelSet
  std::uint32_t code = 0;
  double alpha = 1.0;
};

// Saturating normalization: -1 below -alpha, w/alpha inside, +1 above.
double clip(double w, double alpha);

// Nearest level to clip(w, alpha); ties break toward the smaller magnitude.
QuantValue project_nearest(const LevelSet& levels, double alpha, double w);

// PoT projection in log domain: exponent = round(log2 |clip(w, alpha)|)
// clamped to [-(2^{m-1}-2), 0]; magnitudes below the geometric midpoint
// 2^{-(2^{m-1}-2)} / sqrt(2) map to 0. Diverges from project_nearest for
// inputs whose log rounds across a linear midpoint.
QuantValue project_pot_log(const LevelSet& pot_levels, double alpha, double w);
QuantValue project_pot_log(double w, int m, double alpha);

struct AlphaPolicy {
  enum class Mode { max_abs, least_squares };
  enum class Granularity { per_layer, per_row };
  Mode mode = Mode::least_squares;
  Granularity granularity = Granularity::per_row;
};

// Scale for one weight row. max_abs: alpha = max |w| (1.0 for an all-zero
// row). least_squares: alternating refinement alpha = <w,q>/<q,q> with q the
// unit projection at the current alpha, at most 20 rounds; never worse than
// max_abs in reconstruction MSE.
double fit_alpha(std::span<const double> row, const LevelSet& levels, const AlphaPolicy& policy);

// Mean squared reconstruction error of projecting row at a fixed alpha.
double projection_mse(std::span<const double> row, const LevelSet& levels, double alpha);

// Packed code export: for each row, `bits`-wide codes packed LSB-first into
// bytes, each row padded to a byte boundary.
void pack_row(std::vector<std::uint8_t>& out, std::span<const std::uint32_t> codes, int bits);
std::vector<std::uint32_t> unpack_row(std::span<const std::uint8_t> bytes, std::size_t count,
                                      int bits, std::size_t& byte_cursor);

}  // namespace msp
