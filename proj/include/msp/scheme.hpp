#pragma once

#include <array>
#include <string>
#include <vector>

#include "msp/levels.hpp"
#include "msp/tensor.hpp"

namespace msp {

// Workload split over the three row schemes; fractions sum to 1.
struct SchemeRatio {
  double spot_frac = 0.65;
  double fixed_frac = 0.30;
  double eight_frac = 0.05;

  void validate() const;
  static SchemeRatio msp() { return {0.65, 0.30, 0.05}; }
  // Integer triple summing to 100, e.g. "65:30:5".
  static SchemeRatio parse_percent(const std::string& text);
  // Arbitrary non-negative proportions normalized to 1, e.g. "1.5:1:0".
  static SchemeRatio parse_proportions(const std::string& text);
  std::string to_string() const;
};

enum class RowScheme : std::uint8_t { Spot4 = 0, Fixed4 = 1, Fixed8 = 2 };

char row_scheme_tag(RowScheme s);
RowScheme row_scheme_from_tag(char tag);

// Per-row statistics driving the assignment: population variance and mean
// absolute quantization error against the 4-bit fixed grid (alpha = max |w|).
struct RowStats {
  std::vector<double> variance;
  std::vector<double> err4;
};

RowStats row_stats(const WeightMatrix& w, const LevelSet& fixed4_levels);

struct SchemeMap {
  std::vector<RowScheme> rows;
  std::vector<double> alpha;  // per row, filled by quantization
  SchemeRatio ratio;
  double theta = -1.0;  // largest variance among SPoT rows, -1 if none

  std::size_t count(RowScheme s) const;
};

// Deterministic group sizes for R rows: round-half-up on the 8-bit count,
// then on the SPoT count, Fixed4 takes the remainder; at least one row per
// nonzero group when R allows.
struct GroupCounts {
  std::size_t spot = 0, fixed4 = 0, fixed8 = 0;
};
GroupCounts target_counts(std::size_t rows, const SchemeRatio& ratio);

// Two-stage assignment: the highest-error rows become Fixed8 first
// (globally), then the lowest-variance remainder becomes SPoT4; ties break
// toward the lower row index.
SchemeMap assign(const WeightMatrix& w, const SchemeRatio& ratio, const RowStats& stats);

}  // namespace msp
