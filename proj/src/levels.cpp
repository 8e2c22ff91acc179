#include "msp/levels.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace msp {

QuantScheme QuantScheme::fixed(int m) { return {SchemeKind::Fixed, m, 0, 0}; }
QuantScheme QuantScheme::pot(int m) { return {SchemeKind::PoT, m, 0, 0}; }
QuantScheme QuantScheme::spot(int m, int m1, int m2) { return {SchemeKind::SPoT, m, m1, m2}; }

void QuantScheme::validate() const {
  require(bits >= 2 && bits <= 16, Errc::validation, "bit width must be in [2, 16]");
  if (kind == SchemeKind::SPoT) {
    require(m1 >= m2 && m2 >= 1, Errc::validation, "SPoT needs m1 >= m2 >= 1");
    require(1 + m1 + m2 == bits, Errc::validation, "SPoT needs 1 + m1 + m2 == m");
  }
}

namespace {

// Candidate level during construction: value, field code, raw numerator.
struct Candidate {
  double value;
  std::uint32_t field;
  std::int64_t raw;
};

}  // namespace

LevelSet build_levels(const QuantScheme& scheme) {
  scheme.validate();
  LevelSet ls;
  ls.scheme = scheme;
  const int m = scheme.bits;
  const std::uint32_t sign_bit = 1u << (m - 1);

  // Positive-side values keyed by double, keeping the smallest field code.
  std::map<double, Candidate> side;
  auto offer = [&side](double value, std::uint32_t field, std::int64_t raw) {
    auto it = side.find(value);
    if (it == side.end() || field < it->second.field) side[value] = {value, field, raw};
  };

  if (scheme.kind == SchemeKind::Fixed) {
    const std::int64_t denom = (std::int64_t{1} << (m - 1)) - 1;
    ls.raw_denom = static_cast<double>(denom);
    for (std::int64_t k = 0; k <= denom; ++k)
      offer(static_cast<double>(k) / static_cast<double>(denom),
            static_cast<std::uint32_t>(k), k);
  } else if (scheme.kind == SchemeKind::PoT) {
    const int max_exp = (1 << (m - 1)) - 2;  // levels 2^-max_exp .. 2^0
    ls.raw_denom = std::ldexp(1.0, max_exp);
    offer(0.0, 0, 0);
    for (int e = 0; e <= max_exp; ++e) {
      std::int64_t raw = max_exp - e <= 62 ? (std::int64_t{1} << (max_exp - e)) : 0;
      offer(std::ldexp(1.0, -e), static_cast<std::uint32_t>(e + 1), raw);
    }
  } else {
    const int s = (1 << scheme.m1) - 1;  // fixed-point frame
    ls.frac_bits = s;
    ls.n_raw = 1.5;  // max sum 2^0 + 2^-1 for any valid split
    ls.raw_denom = 1.5 * std::ldexp(1.0, s);
    const bool raw_fits = s <= 60;
    for (std::uint32_t c1 = 0; c1 < (1u << scheme.m1); ++c1) {
      const double v1 = c1 == 0 ? 0.0 : std::ldexp(1.0, -static_cast<int>(c1));
      for (std::uint32_t c2 = 0; c2 < (1u << scheme.m2); ++c2) {
        const double v2 = c2 == 0 ? 0.0 : std::ldexp(1.0, -(static_cast<int>(c2) - 1));
        std::int64_t raw = 0;
        if (raw_fits) {
          raw = (c1 ? (std::int64_t{1} << (s - static_cast<int>(c1))) : 0) +
                (c2 ? (std::int64_t{1} << (s - static_cast<int>(c2) + 1)) : 0);
        }
        double value = raw_fits ? static_cast<double>(raw) / ls.raw_denom : (v1 + v2) / ls.n_raw;
        offer(value, (c1 << scheme.m2) | c2, raw);
      }
    }
  }

  // Mirror around zero; negative levels reuse the field with the sign bit set.
  std::vector<Candidate> pos(side.size());
  std::size_t i = 0;
  for (const auto& [value, cand] : side) pos[i++] = cand;
  for (auto it = pos.rbegin(); it != pos.rend(); ++it) {
    if (it->value == 0.0) continue;
    ls.levels.push_back(-it->value);
    ls.canonical_code_.push_back(sign_bit | it->field);
    ls.raw_.push_back(-it->raw);
  }
  for (const auto& cand : pos) {
    ls.levels.push_back(cand.value);
    ls.canonical_code_.push_back(cand.value == 0.0 ? 0 : cand.field);
    ls.raw_.push_back(cand.raw);
  }

  // Dense decode table over the full m-bit code space.
  ls.code_to_index_.assign(std::size_t{1} << m, -1);
  auto value_of_field = [&](std::uint32_t field) -> double {
    if (scheme.kind == SchemeKind::Fixed) {
      std::int64_t denom = (std::int64_t{1} << (m - 1)) - 1;
      return field > static_cast<std::uint32_t>(denom)
                 ? std::nan("")
                 : static_cast<double>(field) / static_cast<double>(denom);
    }
    if (scheme.kind == SchemeKind::PoT) {
      const int max_exp = (1 << (m - 1)) - 2;
      if (field == 0) return 0.0;
      int e = static_cast<int>(field) - 1;
      return e > max_exp ? std::nan("") : std::ldexp(1.0, -e);
    }
    const std::uint32_t c1 = field >> scheme.m2;
    const std::uint32_t c2 = field & ((1u << scheme.m2) - 1);
    const double v1 = c1 == 0 ? 0.0 : std::ldexp(1.0, -static_cast<int>(c1));
    const double v2 = c2 == 0 ? 0.0 : std::ldexp(1.0, -(static_cast<int>(c2) - 1));
    if (ls.frac_bits <= 60) {
      std::int64_t raw = (c1 ? (std::int64_t{1} << (ls.frac_bits - static_cast<int>(c1))) : 0) +
                         (c2 ? (std::int64_t{1} << (ls.frac_bits - static_cast<int>(c2) + 1)) : 0);
      return static_cast<double>(raw) / ls.raw_denom;
    }
    return (v1 + v2) / ls.n_raw;
  };
  for (std::uint32_t code = 0; code < (1u << m); ++code) {
    const bool neg = (code & sign_bit) != 0;
    double v = value_of_field(code & (sign_bit - 1));
    if (std::isnan(v)) continue;
    if (neg && v == 0.0) continue;  // negative zero is not a valid code
    double level = neg ? -v : v;
    auto it = std::lower_bound(ls.levels.begin(), ls.levels.end(), level);
    if (it != ls.levels.end() && *it == level)
      ls.code_to_index_[code] =
          static_cast<std::int32_t>(std::distance(ls.levels.begin(), it));
  }
  return ls;
}

std::size_t LevelSet::index_of(double unit_level) const {
  auto it = std::lower_bound(levels.begin(), levels.end(), unit_level);
  if (it == levels.end() || *it != unit_level)
    fail(Errc::unknown_level, "value is not a level of this set");
  return static_cast<std::size_t>(std::distance(levels.begin(), it));
}

std::uint32_t LevelSet::encode(double unit_level) const {
  return canonical_code_[index_of(unit_level)];
}

bool LevelSet::code_valid(std::uint32_t code) const {
  return code < code_to_index_.size() && code_to_index_[code] >= 0;
}

double LevelSet::decode(std::uint32_t code) const {
  require(code_valid(code), Errc::invalid_code,
          "invalid code " + std::to_string(code) + " for this level set");
  return levels[static_cast<std::size_t>(code_to_index_[code])];
}

std::int64_t LevelSet::raw_of_code(std::uint32_t code) const {
  require(code_valid(code), Errc::invalid_code,
          "invalid code " + std::to_string(code) + " for this level set");
  return raw_[static_cast<std::size_t>(code_to_index_[code])];
}

double clip(double w, double alpha) {
  require(alpha > 0.0, Errc::validation, "clip needs alpha > 0");
  if (w < -alpha) return -1.0;
  if (w > alpha) return 1.0;
  return w / alpha;
}

QuantValue project_nearest(const LevelSet& levels, double alpha, double w) {
  require(alpha > 0.0, Errc::validation, "project needs alpha > 0");
  require(std::isfinite(w), Errc::numeric, "cannot project a non-finite weight");
  const double x = clip(w, alpha);
  const auto& lv = levels.levels;
  auto it = std::lower_bound(lv.begin(), lv.end(), x);
  std::size_t idx;
  if (it == lv.end()) {
    idx = lv.size() - 1;
  } else if (it == lv.begin()) {
    idx = 0;
  } else {
    const std::size_t hi = static_cast<std::size_t>(std::distance(lv.begin(), it));
    const std::size_t lo = hi - 1;
    const double dlo = std::fabs(x - lv[lo]);
    const double dhi = std::fabs(x - lv[hi]);
    if (dlo < dhi)
      idx = lo;
    else if (dhi < dlo)
      idx = hi;
    else
      idx = std::fabs(lv[lo]) <= std::fabs(lv[hi]) ? lo : hi;
  }
  QuantValue q;
  q.unit_level = lv[idx];
  q.alpha = alpha;
  q.value = alpha * q.unit_level;
  q.code = levels.code_of_index(idx);
  return q;
}

QuantValue project_pot_log(const LevelSet& pot_levels, double alpha, double w) {
  require(pot_levels.scheme.kind == SchemeKind::PoT, Errc::validation,
          "log projection needs a PoT level set");
  require(alpha > 0.0, Errc::validation, "project needs alpha > 0");
  require(std::isfinite(w), Errc::numeric, "cannot project a non-finite weight");
  const int m = pot_levels.scheme.bits;
  const int max_exp = (1 << (m - 1)) - 2;
  const double x = clip(w, alpha);
  const double ax = std::fabs(x);
  // Geometric midpoint between the smallest level and zero.
  const double cutoff = std::ldexp(1.0, -max_exp) * 0.70710678118654752440;
  QuantValue q;
  q.alpha = alpha;
  if (ax < cutoff) {
    q.unit_level = 0.0;
  } else {
    double e = std::round(std::log2(ax));
    e = std::min(0.0, std::max(e, static_cast<double>(-max_exp)));
    q.unit_level = std::copysign(std::ldexp(1.0, static_cast<int>(e)), x);
  }
  q.value = alpha * q.unit_level;
  q.code = pot_levels.encode(q.unit_level);
  return q;
}

QuantValue project_pot_log(double w, int m, double alpha) {
  return project_pot_log(build_levels(QuantScheme::pot(m)), alpha, w);
}

double projection_mse(std::span<const double> row, const LevelSet& levels, double alpha) {
  double acc = 0.0;
  for (double w : row) {
    double d = w - project_nearest(levels, alpha, w).value;
    acc += d * d;
  }
  return row.empty() ? 0.0 : acc / static_cast<double>(row.size());
}

double fit_alpha(std::span<const double> row, const LevelSet& levels, const AlphaPolicy& policy) {
  require(!row.empty(), Errc::validation, "cannot fit alpha on an empty row");
  double max_abs = 0.0;
  for (double w : row) max_abs = std::max(max_abs, std::fabs(w));
  if (max_abs == 0.0) return 1.0;
  if (policy.mode == AlphaPolicy::Mode::max_abs) return max_abs;

  double alpha = max_abs;
  std::vector<double> q(row.size());
  for (int iter = 0; iter < 20; ++iter) {
    for (std::size_t i = 0; i < row.size(); ++i)
      q[i] = project_nearest(levels, alpha, row[i]).unit_level;
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < row.size(); ++i) {
      num += row[i] * q[i];
      den += q[i] * q[i];
    }
    if (den == 0.0 || num <= 0.0) break;
    const double next = num / den;
    if (std::fabs(next - alpha) <= 1e-12 * alpha) {
      alpha = next;
      break;
    }
    alpha = next;
  }
  return alpha;
}

void pack_row(std::vector<std::uint8_t>& out, std::span<const std::uint32_t> codes, int bits) {
  require(bits >= 1 && bits <= 16, Errc::validation, "pack bits out of range");
  std::uint32_t buffer = 0;
  int filled = 0;
  for (std::uint32_t code : codes) {
    require(code < (1u << bits), Errc::invalid_code, "code wider than bit width");
    buffer |= code << filled;
    filled += bits;
    while (filled >= 8) {
      out.push_back(static_cast<std::uint8_t>(buffer & 0xff));
      buffer >>= 8;
      filled -= 8;
    }
  }
  if (filled > 0) out.push_back(static_cast<std::uint8_t>(buffer & 0xff));
}

std::vector<std::uint32_t> unpack_row(std::span<const std::uint8_t> bytes, std::size_t count,
                                      int bits, std::size_t& byte_cursor) {
  std::vector<std::uint32_t> codes(count);
  std::uint64_t buffer = 0;
  int filled = 0;
  for (std::size_t i = 0; i < count; ++i) {
    while (filled < bits) {
      require(byte_cursor < bytes.size(), Errc::truncated, "packed code array truncated");
      buffer |= static_cast<std::uint64_t>(bytes[byte_cursor++]) << filled;
      filled += 8;
    }
    codes[i] = static_cast<std::uint32_t>(buffer & ((1u << bits) - 1));
    buffer >>= bits;
    filled -= bits;
  }
  return codes;
}

}  // namespace msp
