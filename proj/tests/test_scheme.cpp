#include <cmath>

#include "doctest.h"
#include "msp/qmodel.hpp"
#include "msp/rng.hpp"
#include "msp/scheme.hpp"

using namespace msp;

namespace {

LevelSet fixed4() { return build_levels(QuantScheme::fixed(4)); }

WeightMatrix random_matrix(std::size_t rows, std::size_t cols, Rng& rng) {
  WeightMatrix w(rows, cols);
  for (double& v : w.data) v = rng.normal();
  return w;
}

}  // namespace

TEST_CASE("ratio parsing") {
  SchemeRatio r = SchemeRatio::parse_percent("65:30:5");
  CHECK(r.spot_frac == doctest::Approx(0.65));
  CHECK(r.eight_frac == doctest::Approx(0.05));
  CHECK(r.to_string() == "65:30:5");
  CHECK_THROWS_AS(SchemeRatio::parse_percent("65:30:6"), Error);
  CHECK_THROWS_AS(SchemeRatio::parse_percent("65:30"), Error);
  CHECK_THROWS_AS(SchemeRatio::parse_percent("1.5:1:0"), Error);
  SchemeRatio p = SchemeRatio::parse_proportions("1.5:1:0");
  CHECK(p.spot_frac == doctest::Approx(0.6));
  CHECK_THROWS_AS(SchemeRatio::parse_proportions("0:0:0"), Error);
}

TEST_CASE("row_stats computes population variance and 4-bit grid error") {
  SUBCASE("constant row has zero variance") {
    WeightMatrix w(1, 3);
    w.data = {0.3, 0.3, 0.3};
    RowStats s = row_stats(w, fixed4());
    CHECK(s.variance[0] == 0.0);
  }
  SUBCASE("a row exactly on the 4-bit grid has zero error") {
    WeightMatrix w(1, 4);
    w.data = {0.0, 2.0 / 7.0, -5.0 / 7.0, 1.0};  // alpha via max_abs = 1
    RowStats s = row_stats(w, fixed4());
    CHECK(s.err4[0] == 0.0);
  }
  SUBCASE("hand-computed variance") {
    WeightMatrix w(1, 4);
    w.data = {0.0, 0.5, -0.5, 1.0};
    RowStats s = row_stats(w, fixed4());
    CHECK(s.variance[0] == doctest::Approx(0.3125));
  }
}

TEST_CASE("group counts follow the rounding rule") {
  SchemeRatio msp = SchemeRatio::msp();
  SUBCASE("R=20 at 65:30:5 gives (13, 6, 1)") {
    GroupCounts c = target_counts(20, msp);
    CHECK(c.spot == 13);
    CHECK(c.fixed4 == 6);
    CHECK(c.fixed8 == 1);
  }
  SUBCASE("small layers still get an 8-bit row") {
    GroupCounts c = target_counts(5, msp);
    CHECK(c.fixed8 == 1);
    CHECK(c.spot + c.fixed4 + c.fixed8 == 5);
  }
  SUBCASE("rounding is half-up") {
    // 0.05 * 10 = 0.5 rounds up; 0.65 * 10 = 6.5 rounds up
    GroupCounts c = target_counts(10, msp);
    CHECK(c.fixed8 == 1);
    CHECK(c.spot == 7);
    CHECK(c.fixed4 == 2);
  }
  SUBCASE("fewer rows than groups degrades with 8-bit priority") {
    GroupCounts c2 = target_counts(2, msp);
    CHECK(c2.fixed8 == 1);
    CHECK(c2.spot == 1);
    CHECK(c2.fixed4 == 0);
    GroupCounts c1 = target_counts(1, msp);
    CHECK(c1.fixed8 == 1);
    CHECK(c1.spot + c1.fixed4 == 0);
  }
}

TEST_CASE("assign applies error-first then variance ordering") {
  SUBCASE("all-SPoT ratio") {
    Rng rng(3);
    WeightMatrix w = random_matrix(8, 6, rng);
    RowStats stats = row_stats(w, fixed4());
    SchemeMap map = assign(w, {1.0, 0.0, 0.0}, stats);
    CHECK(map.count(RowScheme::Spot4) == 8);
    double vmax = 0;
    for (double v : stats.variance) vmax = std::max(vmax, v);
    CHECK(map.theta == vmax);
  }
  SUBCASE("spec-worked 3-row example") {
    // rows engineered so e = (high, low, low), v = (any, small, large)
    WeightMatrix w(3, 2);
    RowStats stats;
    stats.err4 = {0.9, 0.1, 0.1};
    stats.variance = {0.2, 0.01, 0.5};
    SchemeMap map = assign(w, SchemeRatio::parse_percent("34:33:33"), stats);
    CHECK(map.rows[0] == RowScheme::Fixed8);
    CHECK(map.rows[1] == RowScheme::Spot4);
    CHECK(map.rows[2] == RowScheme::Fixed4);
    CHECK(map.theta == 0.01);
  }
}

TEST_CASE("assignment partitions exactly and orders by error and variance") {
  Rng rng(11);
  const SchemeRatio grid[] = {SchemeRatio::msp(),
                              {0.5, 0.5, 0.0},
                              {0.0, 1.0, 0.0},
                              {1.0, 0.0, 0.0},
                              {0.34, 0.33, 0.33},
                              {0.95, 0.0, 0.05}};
  for (std::size_t rows = 3; rows <= 200; rows += 7) {
    for (const SchemeRatio& ratio : grid) {
      WeightMatrix w = random_matrix(rows, 5, rng);
      RowStats stats = row_stats(w, fixed4());
      SchemeMap map = assign(w, ratio, stats);
      GroupCounts want = target_counts(rows, ratio);
      CHECK(map.count(RowScheme::Spot4) == want.spot);
      CHECK(map.count(RowScheme::Fixed4) == want.fixed4);
      CHECK(map.count(RowScheme::Fixed8) == want.fixed8);
      // Every Fixed8 row dominates every non-Fixed8 row in (err, -index).
      for (std::size_t a = 0; a < rows; ++a)
        for (std::size_t b = 0; b < rows; ++b) {
          if (map.rows[a] == RowScheme::Fixed8 && map.rows[b] != RowScheme::Fixed8) {
            CHECK((stats.err4[a] > stats.err4[b] ||
                   (stats.err4[a] == stats.err4[b] && a < b)));
          }
          if (map.rows[a] == RowScheme::Spot4 && map.rows[b] == RowScheme::Fixed4) {
            CHECK((stats.variance[a] < stats.variance[b] ||
                   (stats.variance[a] == stats.variance[b] && a < b)));
          }
        }
      // theta is the largest SPoT variance
      if (want.spot > 0) {
        double vmax = -1;
        for (std::size_t r = 0; r < rows; ++r)
          if (map.rows[r] == RowScheme::Spot4) vmax = std::max(vmax, stats.variance[r]);
        CHECK(map.theta == vmax);
      }
    }
  }
}

TEST_CASE("quantize_model projects every quantizable layer") {
  Model model;
  model.input_dims = {2};
  model.num_classes = 2;
  model.net = build_network("2,d16,relu,d16,relu,d2", 9);

  QuantConfig cfg;
  Model qm = quantize_model(model, cfg);
  REQUIRE(qm.quant.has_value());
  CHECK(qm.finalized());
  CHECK(qm.quant->layers.size() == 3);
  for (const auto& [idx, qlayer] : qm.quant->layers) {
    WeightMatrix w = reshape_to_gemm(qm.net.layers[idx]);
    GroupCounts want = target_counts(w.rows, cfg.ratio);
    CHECK(qlayer.map.count(RowScheme::Spot4) == want.spot);
    CHECK(qlayer.map.count(RowScheme::Fixed4) == want.fixed4);
    CHECK(qlayer.map.count(RowScheme::Fixed8) == want.fixed8);
    // decoded weights live exactly on their row's level set
    const SchemeTables tables = cfg.tables();
    for (std::size_t r = 0; r < w.rows; ++r) {
      const LevelSet& ls = tables.for_row(qlayer.map.rows[r]);
      for (std::size_t c = 0; c < w.cols; ++c) {
        const double unit = w.at(r, c) / qlayer.map.alpha[r];
        CHECK(project_nearest(ls, 1.0, unit).unit_level == doctest::Approx(unit).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("weights already on the 4-bit grid survive 0:100:0 quantization unchanged") {
  Model model;
  model.input_dims = {4};
  model.num_classes = 3;
  DenseLayer d;
  d.in = 4;
  d.out = 3;
  d.weights = Tensor::zeros({3, 4});
  // each row includes its max so max_abs alpha reproduces the grid exactly
  const double alphas[3] = {1.0, 0.5, 2.0};
  Rng rng(13);
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t c = 0; c < 4; ++c) {
      const double k = static_cast<double>(rng.below(8));
      d.weights.data[r * 4 + c] = alphas[r] * (k / 7.0);
    }
    d.weights.data[r * 4] = alphas[r];  // pin the row max
  }
  d.bias = Tensor::zeros({3});
  model.net.layers.emplace_back(std::move(d));

  QuantConfig cfg;
  cfg.ratio = {0.0, 1.0, 0.0};
  cfg.alpha.mode = AlphaPolicy::Mode::max_abs;
  const std::vector<double> original = std::get<DenseLayer>(model.net.layers[0]).weights.data;
  Model qm = quantize_model(model, cfg);
  CHECK(std::get<DenseLayer>(qm.net.layers[0]).weights.data == original);
}

TEST_CASE("quantize_model is deterministic") {
  Model model;
  model.input_dims = {2};
  model.num_classes = 2;
  model.net = build_network("2,d8,relu,d2", 21);
  QuantConfig cfg;
  Model a = quantize_model(model, cfg);
  Model b = quantize_model(model, cfg);
  for (const auto& [idx, qa] : a.quant->layers) {
    const QuantLayer& qb = b.quant->layers.at(idx);
    CHECK(qa.codes == qb.codes);
    CHECK(qa.map.alpha == qb.map.alpha);
  }
  CHECK(std::get<DenseLayer>(a.net.layers[0]).weights.data ==
        std::get<DenseLayer>(b.net.layers[0]).weights.data);
}

TEST_CASE("MSP assignment reconstructs at least as well as all-Fixed4") {
  // Rows with a variance dichotomy: 13 Gaussian-ish rows, 7 near-uniform rows.
  Rng rng(29);
  for (int trial = 0; trial < 5; ++trial) {
    WeightMatrix w(20, 64);
    for (std::size_t r = 0; r < 20; ++r) {
      for (std::size_t c = 0; c < 64; ++c) {
        w.at(r, c) = r < 13 ? rng.normal(0.0, 0.08) : rng.uniform(-1.0, 1.0);
      }
    }
    RowStats stats = row_stats(w, fixed4());
    SchemeMap msp_map = assign(w, SchemeRatio::msp(), stats);
    QuantConfig cfg;
    const SchemeTables tables = cfg.tables();
    AlphaPolicy max_abs{AlphaPolicy::Mode::max_abs, AlphaPolicy::Granularity::per_row};

    double err_msp = 0, err_fixed = 0;
    for (std::size_t r = 0; r < 20; ++r) {
      auto row = w.row(r);
      const LevelSet& ls = tables.for_row(msp_map.rows[r]);
      err_msp += projection_mse(row, ls, fit_alpha(row, ls, max_abs));
      err_fixed +=
          projection_mse(row, tables.fixed_low, fit_alpha(row, tables.fixed_low, max_abs));
    }
    CHECK(err_msp <= err_fixed);
  }
}
