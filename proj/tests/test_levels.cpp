#include <cmath>

#include "doctest.h"
#include "msp/levels.hpp"
#include "msp/rng.hpp"

using namespace msp;

namespace {

// Independent projection oracle: linear scan over all levels with the same
// tie rule (smaller magnitude wins).
double scan_nearest(const LevelSet& ls, double alpha, double w) {
  const double x = clip(w, alpha);
  double best = ls.levels[0];
  double best_dist = std::fabs(x - best);
  for (double level : ls.levels) {
    const double d = std::fabs(x - level);
    if (d < best_dist || (d == best_dist && std::fabs(level) < std::fabs(best))) {
      best = level;
      best_dist = d;
    }
  }
  return best;
}

std::vector<QuantScheme> all_schemes(int mmin, int mmax) {
  std::vector<QuantScheme> out;
  for (int m = mmin; m <= mmax; ++m) {
    out.push_back(QuantScheme::fixed(m));
    out.push_back(QuantScheme::pot(m));
    for (int m1 = 1; m1 < m; ++m1) {
      const int m2 = m - 1 - m1;
      if (m2 >= 1 && m1 >= m2) out.push_back(QuantScheme::spot(m, m1, m2));
    }
  }
  return out;
}

}  // namespace

TEST_CASE("clip saturates outside [-alpha, alpha]") {
  CHECK(clip(0.5, 1.0) == 0.5);
  CHECK(clip(-3.0, 1.0) == -1.0);
  CHECK(clip(0.6, 0.3) == 1.0);
  CHECK(clip(0.3, 0.3) == 1.0);  // inclusive boundary
  CHECK_THROWS_AS(clip(0.1, 0.0), Error);
  CHECK_THROWS_AS(clip(0.1, -1.0), Error);
}

TEST_CASE("fixed level sets follow the uniform grid") {
  LevelSet m2 = build_levels(QuantScheme::fixed(2));
  CHECK(m2.levels == std::vector<double>{-1.0, 0.0, 1.0});
  LevelSet m4 = build_levels(QuantScheme::fixed(4));
  CHECK(m4.size() == 15);
  CHECK(m4.levels[8] == doctest::Approx(1.0 / 7.0));
}

TEST_CASE("PoT level sets follow the power-of-two grid") {
  LevelSet m3 = build_levels(QuantScheme::pot(3));
  CHECK(m3.levels == std::vector<double>{-1.0, -0.5, -0.25, 0.0, 0.25, 0.5, 1.0});
}

TEST_CASE("level set structural invariants hold for every scheme") {
  for (const QuantScheme& s : all_schemes(2, 8)) {
    CAPTURE(static_cast<int>(s.kind));
    CAPTURE(s.bits);
    CAPTURE(s.m1);
    CAPTURE(s.m2);
    LevelSet ls = build_levels(s);
    // sorted strictly, symmetric, contains 0 and +-1
    for (std::size_t i = 1; i < ls.size(); ++i) CHECK(ls.levels[i - 1] < ls.levels[i]);
    for (std::size_t i = 0; i < ls.size(); ++i)
      CHECK(ls.levels[i] == -ls.levels[ls.size() - 1 - i]);
    CHECK(ls.levels.front() == -1.0);
    CHECK(ls.levels.back() == 1.0);
    CHECK(ls.index_of(0.0) == ls.size() / 2);
    // cardinality
    const std::size_t cap = (std::size_t{1} << s.bits) - 1;
    if (s.kind == SchemeKind::SPoT)
      CHECK(ls.size() <= cap);
    else
      CHECK(ls.size() == cap);
  }
}

TEST_CASE("the 6-bit SPoT set encodes raw 0.625 as m1 field 011 and m2 field 10") {
  LevelSet ls = build_levels(QuantScheme::spot(6, 3, 2));
  CHECK(ls.frac_bits == 7);
  CHECK(ls.n_raw == 1.5);
  // raw 0.625 in the S=7 frame is 0.625 * 128 = 80
  const double unit = 80.0 / ls.raw_denom;
  const std::size_t idx = ls.index_of(unit);
  CHECK(ls.raw_of_index(idx) == 80);
  const std::uint32_t code = ls.encode(unit);
  CHECK(((code >> 5) & 1u) == 0u);       // sign
  CHECK(((code >> 2) & 0x7u) == 0b011);  // m1 field -> 2^-3
  CHECK((code & 0x3u) == 0b10);          // m2 field -> 2^-1
  // negative sibling: same fields, sign bit set
  const std::uint32_t neg = ls.encode(-unit);
  CHECK(neg == (code | (1u << 5)));
}

TEST_CASE("project_nearest matches the spec-worked fixed-point examples") {
  LevelSet m4 = build_levels(QuantScheme::fixed(4));
  SUBCASE("0.30 lands on 2/7") {
    QuantValue q = project_nearest(m4, 1.0, 0.30);
    CHECK(q.unit_level == doctest::Approx(2.0 / 7.0));
    CHECK(std::fabs(0.30 - 2.0 / 7.0) < std::fabs(0.30 - 3.0 / 7.0));
  }
  SUBCASE("levels are fixed points") {
    for (double level : m4.levels) {
      QuantValue q = project_nearest(m4, 1.0, level);
      CHECK(q.unit_level == level);
    }
  }
  SUBCASE("clip endpoint") {
    CHECK(project_nearest(m4, 1.0, 1.2).unit_level == 1.0);
    CHECK(project_nearest(m4, 1.0, -9.0).unit_level == -1.0);
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(project_nearest(m4, 0.0, 0.5), Error);
    CHECK_THROWS_AS(project_nearest(m4, 1.0, std::nan("")), Error);
  }
}

TEST_CASE("exact midpoints break toward the smaller magnitude") {
  LevelSet m2 = build_levels(QuantScheme::fixed(2));
  CHECK(project_nearest(m2, 1.0, 0.5).unit_level == 0.0);
  CHECK(project_nearest(m2, 1.0, -0.5).unit_level == 0.0);
  // PoT levels are dyadic, so these midpoints are exact in binary floating
  // point: 0.375 sits exactly between 0.25 and 0.5.
  LevelSet pot3 = build_levels(QuantScheme::pot(3));
  CHECK(project_nearest(pot3, 1.0, 0.375).unit_level == 0.25);
  CHECK(project_nearest(pot3, 1.0, -0.375).unit_level == -0.25);
  CHECK(project_nearest(pot3, 1.0, 0.75).unit_level == 0.5);
}

TEST_CASE("project_nearest equals the linear-scan oracle on random inputs") {
  Rng rng(2024);
  for (const QuantScheme& s : all_schemes(2, 6)) {
    LevelSet ls = build_levels(s);
    for (int i = 0; i < 3000; ++i) {
      const double w = rng.uniform(-1.6, 1.6);
      const double alpha = i % 3 == 0 ? 1.0 : rng.uniform(0.2, 2.0);
      CHECK(project_nearest(ls, alpha, w).unit_level == scan_nearest(ls, alpha, w));
    }
    // exact midpoints of adjacent levels, the tie cases
    for (std::size_t i = 1; i < ls.size(); ++i) {
      const double mid = 0.5 * (ls.levels[i - 1] + ls.levels[i]);
      CHECK(project_nearest(ls, 1.0, mid).unit_level == scan_nearest(ls, 1.0, mid));
    }
  }
}

TEST_CASE("log-domain PoT projection rounds in log space") {
  LevelSet pot4 = build_levels(QuantScheme::pot(4));
  SUBCASE("0.7 rounds down to 0.5") {
    CHECK(project_pot_log(pot4, 1.0, 0.7).unit_level == 0.5);
  }
  SUBCASE("0.72 rounds up to 1.0 where nearest-level gives 0.5") {
    CHECK(project_pot_log(pot4, 1.0, 0.72).unit_level == 1.0);
    CHECK(project_nearest(pot4, 1.0, 0.72).unit_level == 0.5);
  }
  SUBCASE("zero maps to zero") {
    CHECK(project_pot_log(pot4, 1.0, 0.0).unit_level == 0.0);
    CHECK(project_pot_log(0.0, 4, 1.0).unit_level == 0.0);
  }
  SUBCASE("magnitudes below the geometric cutoff map to zero") {
    const double lmin = std::ldexp(1.0, -6);  // smallest positive 4-bit PoT level
    const double cutoff = lmin / std::sqrt(2.0);
    CHECK(project_pot_log(pot4, 1.0, cutoff * 0.999).unit_level == 0.0);
    CHECK(project_pot_log(pot4, 1.0, cutoff * 1.001).unit_level == lmin);
    CHECK(project_pot_log(pot4, 1.0, -cutoff * 0.999).unit_level == 0.0);
  }
  SUBCASE("sign is preserved") {
    CHECK(project_pot_log(pot4, 1.0, -0.7).unit_level == -0.5);
  }
  SUBCASE("exponent clamps at the ends") {
    CHECK(project_pot_log(pot4, 1.0, 123.0).unit_level == 1.0);
  }
}

TEST_CASE("codec round-trips every level of every scheme") {
  for (const QuantScheme& s : all_schemes(2, 8)) {
    LevelSet ls = build_levels(s);
    for (double level : ls.levels) {
      const std::uint32_t code = ls.encode(level);
      CHECK(ls.decode(code) == level);
      CHECK(code < (1u << s.bits));
    }
  }
}

TEST_CASE("fixed m=2 has exactly three valid codes, bijective on levels") {
  LevelSet m2 = build_levels(QuantScheme::fixed(2));
  int valid = 0;
  for (std::uint32_t c = 0; c < 4; ++c) valid += m2.code_valid(c) ? 1 : 0;
  CHECK(valid == 3);
  CHECK(m2.decode(0) == 0.0);
  CHECK(m2.decode(1) == 1.0);
  CHECK(m2.decode(3) == -1.0);
  CHECK_THROWS_AS(m2.decode(2), Error);  // negative zero is canonicalized away
}

TEST_CASE("unknown levels and invalid codes are errors") {
  LevelSet m4 = build_levels(QuantScheme::fixed(4));
  CHECK_THROWS_AS(m4.encode(0.3), Error);
  CHECK_THROWS_AS(m4.decode(1u << 3), Error);  // sign-only code
  CHECK_THROWS_AS(m4.decode(999), Error);
}

TEST_CASE("PoT resolution pathology: the largest gap never shrinks with bit width") {
  // Extra bits are all spent near zero; the tail gap between the two largest
  // positive levels stays at 1 - 1/2.
  auto max_gap = [](const LevelSet& ls) {
    double g = 0;
    for (std::size_t i = 1; i < ls.size(); ++i)
      if (ls.levels[i - 1] > 0) g = std::max(g, ls.levels[i] - ls.levels[i - 1]);
    return g;
  };
  for (int m = 3; m <= 7; ++m) {
    CHECK(max_gap(build_levels(QuantScheme::pot(m))) == 0.5);
    CHECK(max_gap(build_levels(QuantScheme::pot(m + 1))) == 0.5);
  }
}

TEST_CASE("SPoT fits a Gaussian better than PoT") {
  Rng rng(5);
  std::vector<double> w(20000);
  for (double& v : w) v = 0.5 * rng.normal();  // N(0, 0.25)
  AlphaPolicy max_abs{AlphaPolicy::Mode::max_abs, AlphaPolicy::Granularity::per_row};
  AlphaPolicy lsq{AlphaPolicy::Mode::least_squares, AlphaPolicy::Granularity::per_row};

  SUBCASE("6-bit: decisive under any alpha policy") {
    LevelSet spot = build_levels(QuantScheme::spot(6, 3, 2));
    LevelSet pot = build_levels(QuantScheme::pot(6));
    CHECK(projection_mse(w, spot, fit_alpha(w, spot, max_abs)) <
          projection_mse(w, pot, fit_alpha(w, pot, max_abs)));
    CHECK(projection_mse(w, spot, fit_alpha(w, spot, lsq)) <
          projection_mse(w, pot, fit_alpha(w, pot, lsq)));
  }
  SUBCASE("4-bit: holds with the fitted scale") {
    LevelSet spot = build_levels(QuantScheme::spot(4, 2, 1));
    LevelSet pot = build_levels(QuantScheme::pot(4));
    CHECK(projection_mse(w, spot, fit_alpha(w, spot, lsq)) <
          projection_mse(w, pot, fit_alpha(w, pot, lsq)));
  }
}

TEST_CASE("fit_alpha max_abs and degenerate rows") {
  LevelSet m4 = build_levels(QuantScheme::fixed(4));
  AlphaPolicy max_abs{AlphaPolicy::Mode::max_abs, AlphaPolicy::Granularity::per_row};
  std::vector<double> row{0.5, -1.0, 0.25};
  CHECK(fit_alpha(row, m4, max_abs) == 1.0);

  std::vector<double> zeros(8, 0.0);
  AlphaPolicy lsq{AlphaPolicy::Mode::least_squares, AlphaPolicy::Granularity::per_row};
  CHECK(fit_alpha(zeros, m4, max_abs) == 1.0);
  CHECK(fit_alpha(zeros, m4, lsq) == 1.0);
  for (double v : zeros) CHECK(project_nearest(m4, 1.0, v).code == 0);
  CHECK_THROWS_AS(fit_alpha(std::span<const double>{}, m4, max_abs), Error);
}

TEST_CASE("least-squares alpha never reconstructs worse than max_abs") {
  LevelSet m4 = build_levels(QuantScheme::fixed(4));
  Rng rng(17);
  AlphaPolicy max_abs{AlphaPolicy::Mode::max_abs, AlphaPolicy::Granularity::per_row};
  AlphaPolicy lsq{AlphaPolicy::Mode::least_squares, AlphaPolicy::Granularity::per_row};
  std::vector<double> row(1000);
  for (double& v : row) v = rng.normal();
  const double mse_lsq = projection_mse(row, m4, fit_alpha(row, m4, lsq));
  const double mse_max = projection_mse(row, m4, fit_alpha(row, m4, max_abs));
  CHECK(mse_lsq <= mse_max);

  for (int iter = 0; iter < 10; ++iter) {
    std::vector<double> r(64);
    for (double& v : r) v = rng.normal(0.0, rng.uniform(0.01, 2.0));
    const double a = fit_alpha(r, m4, lsq);
    CHECK(a > 0.0);
    CHECK(projection_mse(r, m4, a) <= projection_mse(r, m4, fit_alpha(r, m4, max_abs)));
  }
}

TEST_CASE("packed code rows round-trip at every width") {
  Rng rng(31);
  for (int iter = 0; iter < 40; ++iter) {
    const int bits = 2 + static_cast<int>(rng.below(7));
    const std::size_t rows = 1 + rng.below(5);
    const std::size_t cols = 1 + rng.below(40);
    std::vector<std::vector<std::uint32_t>> codes(rows, std::vector<std::uint32_t>(cols));
    std::vector<std::uint8_t> packed;
    for (auto& row : codes) {
      for (auto& c : row) c = static_cast<std::uint32_t>(rng.below(1u << bits));
      pack_row(packed, row, bits);
    }
    const std::size_t row_bytes = (cols * static_cast<std::size_t>(bits) + 7) / 8;
    CHECK(packed.size() == rows * row_bytes);
    std::size_t cursor = 0;
    for (std::size_t r = 0; r < rows; ++r) {
      std::size_t row_cursor = r * row_bytes;  // rows are byte aligned
      auto back = unpack_row(packed, cols, bits, row_cursor);
      CHECK(back == codes[r]);
      CHECK(row_cursor == (r + 1) * row_bytes);
      cursor = row_cursor;
    }
    CHECK(cursor == packed.size());
  }
}

TEST_CASE("every valid SPoT code decodes to a member level") {
  for (const QuantScheme& s : all_schemes(3, 6)) {
    if (s.kind != SchemeKind::SPoT) continue;
    LevelSet ls = build_levels(s);
    for (std::uint32_t c = 0; c < (1u << s.bits); ++c) {
      if (!ls.code_valid(c)) continue;
      const double level = ls.decode(c);
      CHECK(ls.index_of(level) < ls.size());
    }
  }
}
