#include "msp/scheme.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace msp {

void SchemeRatio::validate() const {
  require(spot_frac >= 0 && fixed_frac >= 0 && eight_frac >= 0, Errc::validation,
          "ratio fractions must be non-negative");
  require(std::fabs(spot_frac + fixed_frac + eight_frac - 1.0) <= 1e-12, Errc::validation,
          "ratio fractions must sum to 1");
}

namespace {

std::array<double, 3> parse_triple(const std::string& text) {
  std::array<double, 3> v{};
  std::stringstream ss(text);
  std::string part;
  int i = 0;
  while (std::getline(ss, part, ':')) {
    require(i < 3, Errc::validation, "ratio must have three components: '" + text + "'");
    try {
      std::size_t pos = 0;
      v[i] = std::stod(part, &pos);
      require(pos == part.size(), Errc::validation, "bad ratio component: '" + part + "'");
    } catch (const Error&) {
      throw;
    } catch (const std::exception&) {
      fail(Errc::validation, "bad ratio component: '" + part + "'");
    }
    ++i;
  }
  require(i == 3, Errc::validation, "ratio must have three components: '" + text + "'");
  return v;
}

}  // namespace

SchemeRatio SchemeRatio::parse_percent(const std::string& text) {
  auto v = parse_triple(text);
  for (double x : v)
    require(x >= 0 && x == std::floor(x), Errc::validation,
            "percent ratio components must be non-negative integers: '" + text + "'");
  require(v[0] + v[1] + v[2] == 100.0, Errc::validation,
          "ratio components must sum to 100: '" + text + "'");
  return {v[0] / 100.0, v[1] / 100.0, v[2] / 100.0};
}

SchemeRatio SchemeRatio::parse_proportions(const std::string& text) {
  auto v = parse_triple(text);
  double sum = v[0] + v[1] + v[2];
  require(v[0] >= 0 && v[1] >= 0 && v[2] >= 0 && sum > 0, Errc::validation,
          "proportions must be non-negative with a positive sum: '" + text + "'");
  return {v[0] / sum, v[1] / sum, v[2] / sum};
}

std::string SchemeRatio::to_string() const {
  std::ostringstream os;
  auto fmt = [&os](double f) {
    double pct = f * 100.0;
    if (pct == std::floor(pct))
      os << static_cast<long long>(pct);
    else
      os << pct;
  };
  fmt(spot_frac);
  os << ':';
  fmt(fixed_frac);
  os << ':';
  fmt(eight_frac);
  return os.str();
}

char row_scheme_tag(RowScheme s) {
  switch (s) {
    case RowScheme::Spot4: return 's';
    case RowScheme::Fixed4: return 'f';
    default: return '8';
  }
}

RowScheme row_scheme_from_tag(char tag) {
  switch (tag) {
    case 's': return RowScheme::Spot4;
    case 'f': return RowScheme::Fixed4;
    case '8': return RowScheme::Fixed8;
    default: fail(Errc::bad_format, std::string("unknown row tag '") + tag + "'");
  }
}

RowStats row_stats(const WeightMatrix& w, const LevelSet& fixed4_levels) {
  require(w.rows >= 1 && w.cols >= 1, Errc::validation, "row stats need a non-empty matrix");
  RowStats stats;
  stats.variance.resize(w.rows);
  stats.err4.resize(w.rows);
  const AlphaPolicy max_abs{AlphaPolicy::Mode::max_abs, AlphaPolicy::Granularity::per_row};
  for (std::size_t r = 0; r < w.rows; ++r) {
    auto row = w.row(r);
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(row.size());
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    stats.variance[r] = var / static_cast<double>(row.size());

    double alpha = fit_alpha(row, fixed4_levels, max_abs);
    double err = 0.0;
    for (double v : row) err += std::fabs(v - project_nearest(fixed4_levels, alpha, v).value);
    stats.err4[r] = err / static_cast<double>(row.size());
  }
  return stats;
}

std::size_t SchemeMap::count(RowScheme s) const {
  return static_cast<std::size_t>(std::count(rows.begin(), rows.end(), s));
}

namespace {

std::size_t round_half_up(double x) {
  return static_cast<std::size_t>(std::floor(x + 0.5));
}

}  // namespace

GroupCounts target_counts(std::size_t rows, const SchemeRatio& ratio) {
  ratio.validate();
  require(rows >= 1, Errc::validation, "cannot split zero rows");
  const bool has_s = ratio.spot_frac > 0, has_f = ratio.fixed_frac > 0,
             has_e = ratio.eight_frac > 0;
  const std::size_t groups = (has_s ? 1u : 0u) + (has_f ? 1u : 0u) + (has_e ? 1u : 0u);
  GroupCounts counts;
  const double r = static_cast<double>(rows);
  std::size_t n8 = has_e ? std::max<std::size_t>(1, round_half_up(ratio.eight_frac * r)) : 0;
  std::size_t nsp = has_s ? std::max<std::size_t>(1, round_half_up(ratio.spot_frac * r)) : 0;
  if (rows >= groups) {
    // Reserve at least one row for every nonzero group.
    n8 = std::min(n8, rows - (has_s ? 1 : 0) - (has_f ? 1 : 0));
    nsp = std::min(nsp, rows - n8 - (has_f ? 1 : 0));
  } else {
    // Too few rows for all groups: 8-bit presence wins, then SPoT.
    n8 = std::min(n8, rows);
    nsp = std::min(nsp, rows - n8);
  }
  counts.fixed8 = n8;
  counts.spot = nsp;
  counts.fixed4 = rows - n8 - nsp;
  return counts;
}

SchemeMap assign(const WeightMatrix& w, const SchemeRatio& ratio, const RowStats& stats) {
  require(w.rows >= 1, Errc::validation, "cannot assign schemes to an empty matrix");
  require(stats.variance.size() == w.rows && stats.err4.size() == w.rows, Errc::shape_mismatch,
          "row stats do not match the matrix");
  const GroupCounts counts = target_counts(w.rows, ratio);

  SchemeMap map;
  map.ratio = ratio;
  map.rows.assign(w.rows, RowScheme::Fixed4);
  map.alpha.assign(w.rows, 1.0);

  // Stage 1: highest 4-bit error rows become Fixed8 (global over all rows).
  std::vector<std::size_t> order(w.rows);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (stats.err4[a] != stats.err4[b]) return stats.err4[a] > stats.err4[b];
    return a < b;
  });
  for (std::size_t i = 0; i < counts.fixed8; ++i) map.rows[order[i]] = RowScheme::Fixed8;

  // Stage 2: lowest-variance remainder becomes SPoT4.
  std::vector<std::size_t> rest(order.begin() + counts.fixed8, order.end());
  std::stable_sort(rest.begin(), rest.end(), [&](std::size_t a, std::size_t b) {
    if (stats.variance[a] != stats.variance[b]) return stats.variance[a] < stats.variance[b];
    return a < b;
  });
  double theta = -1.0;
  for (std::size_t i = 0; i < counts.spot; ++i) {
    map.rows[rest[i]] = RowScheme::Spot4;
    theta = std::max(theta, stats.variance[rest[i]]);
  }
  map.theta = theta;
  return map;
}

}  // namespace msp
