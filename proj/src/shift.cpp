#include "msp/shift.hpp"

#include <cmath>
#include <cstring>
#include <limits>

namespace msp {

SpotWeightCode spot_code_from_bits(std::uint32_t code, const QuantScheme& scheme) {
  require(scheme.kind == SchemeKind::SPoT, Errc::validation, "not a SPoT scheme");
  const int s = (1 << scheme.m1) - 1;
  const std::uint32_t sign_bit = 1u << (scheme.bits - 1);
  const std::uint32_t c1 = (code & (sign_bit - 1)) >> scheme.m2;
  const std::uint32_t c2 = code & ((1u << scheme.m2) - 1);
  SpotWeightCode w;
  w.sign = (code & sign_bit) ? -1 : 1;
  w.shift1 = c1 ? static_cast<std::int8_t>(s - static_cast<int>(c1)) : -1;
  w.shift2 = c2 ? static_cast<std::int8_t>(s - static_cast<int>(c2) + 1) : -1;
  return w;
}

std::uint64_t accumulator_bound(std::size_t cols, int act_bits, const QuantConfig& config) {
  const std::uint64_t amax = (1u << act_bits) - 1;
  const int s = (1 << config.m1) - 1;
  // Largest raw magnitude on any path: SPoT 1.5 * 2^S, fixed-8 127.
  const std::uint64_t spot_raw = (std::uint64_t{3} << s) >> 1;
  const std::uint64_t fixed_raw = 127;
  return cols * amax * std::max(spot_raw, fixed_raw);
}

LayerKernel build_layer_kernel(const QuantLayer& qlayer, const QuantConfig& config,
                               std::size_t cols, int act_bits) {
  const QuantScheme spot_scheme =
      QuantScheme::spot(config.weight_bits, config.m1, config.m2);
  const LevelSet spot_levels = build_levels(spot_scheme);
  require(accumulator_bound(cols, act_bits, config) <
              static_cast<std::uint64_t>(std::numeric_limits<std::int64_t>::max()),
          Errc::numeric, "accumulator bound exceeded for this fan-in");

  LayerKernel kernel;
  kernel.cols = cols;
  kernel.rows.resize(qlayer.map.rows.size());
  for (std::size_t r = 0; r < qlayer.map.rows.size(); ++r) {
    RowKernel& row = kernel.rows[r];
    row.scheme = qlayer.map.rows[r];
    row.alpha = qlayer.map.alpha[r];
    const auto& codes = qlayer.codes[r];
    require(codes.size() == cols, Errc::shape_mismatch, "code row does not match fan-in");
    if (row.scheme == RowScheme::Spot4) {
      row.denom = spot_levels.raw_denom;  // n_raw * 2^S
      row.spot.resize(cols);
      for (std::size_t c = 0; c < cols; ++c)
        row.spot[c] = spot_code_from_bits(codes[c], spot_scheme);
    } else {
      const int m = row.scheme == RowScheme::Fixed8 ? 8 : config.weight_bits;
      const std::uint32_t sign_bit = 1u << (m - 1);
      row.denom = static_cast<double>((1 << (m - 1)) - 1);
      row.fixed.resize(cols);
      for (std::size_t c = 0; c < cols; ++c) {
        const std::int16_t mag = static_cast<std::int16_t>(codes[c] & (sign_bit - 1));
        row.fixed[c] = (codes[c] & sign_bit) ? static_cast<std::int16_t>(-mag) : mag;
      }
    }
  }
  return kernel;
}

std::vector<double> hetero_gemm(const ActCodes& a, const LayerKernel& kernel) {
  const std::size_t cols = shape_numel(a.dims);
  require(cols == kernel.cols, Errc::shape_mismatch, "activation fan-in mismatch");
  const std::size_t rows = kernel.rows.size();
  std::vector<double> out(a.batch * rows);
  for (std::size_t s = 0; s < a.batch; ++s) {
    const std::uint16_t* ap = a.codes.data() + s * cols;
    for (std::size_t r = 0; r < rows; ++r) {
      const RowKernel& rk = kernel.rows[r];
      std::int64_t acc = 0;
      if (rk.scheme == RowScheme::Spot4) {
        for (std::size_t c = 0; c < cols; ++c) acc += spot_mac(ap[c], rk.spot[c]);
      } else {
        for (std::size_t c = 0; c < cols; ++c)
          acc += static_cast<std::int64_t>(rk.fixed[c]) * ap[c];
      }
      out[s * rows + r] = static_cast<double>(acc) / rk.denom * rk.alpha * a.scale;
    }
  }
  return out;
}

namespace {

constexpr std::uint64_t kFnvOffset = 1469598103934665603ull;
constexpr std::uint64_t kFnvPrime = 1099511628211ull;

std::uint64_t fnv1a(const double* values, std::size_t n, std::uint64_t h) {
  for (std::size_t i = 0; i < n; ++i) {
    std::uint64_t bits;
    std::memcpy(&bits, &values[i], 8);
    for (int b = 0; b < 8; ++b) {
      h ^= (bits >> (8 * b)) & 0xff;
      h *= kFnvPrime;
    }
  }
  return h;
}

ActCodes quantize_plane(const std::vector<double>& values, std::size_t batch, Shape dims,
                        const ActQuant& q) {
  ActCodes out;
  out.batch = batch;
  out.dims = std::move(dims);
  out.bits = q.bits;
  out.scale = q.step();
  out.codes.resize(values.size());
  for (std::size_t i = 0; i < values.size(); ++i)
    out.codes[i] = static_cast<std::uint16_t>(ste_code(values[i], q));
  return out;
}

std::vector<double> decode_plane(const ActCodes& a) {
  std::vector<double> v(a.codes.size());
  for (std::size_t i = 0; i < a.codes.size(); ++i) v[i] = a.codes[i] * a.scale;
  return v;
}

void gather_receptive_field(const std::uint16_t* plane, const Shape& dims,
                            const Conv2dLayer& conv, std::size_t oh, std::size_t ow,
                            std::uint16_t* col) {
  const std::size_t h = dims[1], w = dims[2];
  std::size_t write = 0;
  for (std::size_t ci = 0; ci < conv.in_ch; ++ci)
    for (std::size_t kh = 0; kh < conv.k; ++kh)
      for (std::size_t kw = 0; kw < conv.k; ++kw) {
        const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * conv.stride + kh) -
                                  static_cast<std::ptrdiff_t>(conv.pad);
        const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * conv.stride + kw) -
                                  static_cast<std::ptrdiff_t>(conv.pad);
        col[write++] = (ih < 0 || iw < 0 || ih >= static_cast<std::ptrdiff_t>(h) ||
                        iw >= static_cast<std::ptrdiff_t>(w))
                           ? 0
                           : plane[(ci * h + ih) * w + iw];
      }
}

struct RunOutput {
  std::vector<double> logits;  // n x num_classes
  std::vector<std::uint64_t> checksums;
};

RunOutput run_model(const Model& model, const Dataset& data, Engine engine) {
  require(model.finalized(), Errc::validation, "inference needs a finalized quantized model");
  require(data.size() > 0, Errc::validation, "accuracy undefined on an empty dataset");
  require(data.sample_dims() == model.input_dims, Errc::shape_mismatch,
          "dataset does not match the model input shape");

  const QuantInfo& q = *model.quant;
  const int abits = q.config.act_bits;
  const std::size_t n = data.size();
  const std::size_t k = model.num_classes;

  std::map<std::size_t, LayerKernel> kernels;
  if (engine == Engine::shift) {
    for (const auto& [idx, qlayer] : q.layers) {
      const std::size_t cols = reshape_to_gemm(model.net.layers[idx]).cols;
      kernels.emplace(idx, build_layer_kernel(qlayer, q.config, cols, abits));
    }
  }

  RunOutput out;
  out.logits.resize(n * k);
  out.checksums.assign(model.net.layers.size() + 1, kFnvOffset);

  const std::size_t chunk = 128;
  const std::size_t per = data.sample_numel();
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t bn = std::min(chunk, n - start);
    std::vector<double> values(data.samples.data.begin() + start * per,
                               data.samples.data.begin() + (start + bn) * per);
    Shape dims = model.input_dims;

    // Input quantization is the same function in both engines.
    ActCodes codes = quantize_plane(values, bn, dims, ActQuant{abits, q.input_amax});
    bool in_codes = engine == Engine::shift;
    values = decode_plane(codes);
    out.checksums[0] = fnv1a(values.data(), values.size(), out.checksums[0]);

    for (std::size_t i = 0; i < model.net.layers.size(); ++i) {
      const Layer& layer = model.net.layers[i];
      if (const auto* d = std::get_if<DenseLayer>(&layer)) {
        std::vector<double> y(bn * d->out);
        if (engine == Engine::shift) {
          require(in_codes, Errc::validation,
                  "integer layer without a preceding quantization point");
          y = hetero_gemm(codes, kernels.at(i));
        } else {
          for (std::size_t s = 0; s < bn; ++s)
            for (std::size_t o = 0; o < d->out; ++o) {
              double acc = 0.0;
              const double* wrow = d->weights.data.data() + o * d->in;
              const double* xin = values.data() + s * d->in;
              for (std::size_t ci = 0; ci < d->in; ++ci) acc += wrow[ci] * xin[ci];
              y[s * d->out + o] = acc;
            }
        }
        for (std::size_t s = 0; s < bn; ++s)
          for (std::size_t o = 0; o < d->out; ++o) y[s * d->out + o] += d->bias.data[o];
        values = std::move(y);
        dims = {d->out};
        in_codes = false;
      } else if (const auto* c = std::get_if<Conv2dLayer>(&layer)) {
        const std::size_t h = dims[1], w = dims[2];
        const std::size_t oh = (h + 2 * c->pad - c->k) / c->stride + 1;
        const std::size_t ow = (w + 2 * c->pad - c->k) / c->stride + 1;
        const std::size_t cols = c->in_ch * c->k * c->k;
        std::vector<double> y(bn * c->out_ch * oh * ow);
        if (engine == Engine::shift) {
          require(in_codes, Errc::validation,
                  "integer layer without a preceding quantization point");
          const LayerKernel& kernel = kernels.at(i);
          ActCodes one;
          one.batch = 1;
          one.dims = {cols};
          one.bits = codes.bits;
          one.scale = codes.scale;
          one.codes.resize(cols);
          for (std::size_t s = 0; s < bn; ++s) {
            const std::uint16_t* plane = codes.codes.data() + s * shape_numel(dims);
            for (std::size_t yh = 0; yh < oh; ++yh)
              for (std::size_t yw = 0; yw < ow; ++yw) {
                gather_receptive_field(plane, dims, *c, yh, yw, one.codes.data());
                std::vector<double> pixel = hetero_gemm(one, kernel);
                for (std::size_t o = 0; o < c->out_ch; ++o)
                  y[((s * c->out_ch + o) * oh + yh) * ow + yw] = pixel[o] + c->bias.data[o];
              }
          }
        } else {
          for (std::size_t s = 0; s < bn; ++s)
            for (std::size_t o = 0; o < c->out_ch; ++o)
              for (std::size_t yh = 0; yh < oh; ++yh)
                for (std::size_t yw = 0; yw < ow; ++yw) {
                  double acc = 0.0;
                  for (std::size_t ci = 0; ci < c->in_ch; ++ci)
                    for (std::size_t kh = 0; kh < c->k; ++kh) {
                      const std::ptrdiff_t ih =
                          static_cast<std::ptrdiff_t>(yh * c->stride + kh) -
                          static_cast<std::ptrdiff_t>(c->pad);
                      if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(h)) continue;
                      for (std::size_t kw = 0; kw < c->k; ++kw) {
                        const std::ptrdiff_t iw =
                            static_cast<std::ptrdiff_t>(yw * c->stride + kw) -
                            static_cast<std::ptrdiff_t>(c->pad);
                        if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(w)) continue;
                        acc += values[((s * c->in_ch + ci) * h + ih) * w + iw] *
                               c->weights.data[((o * c->in_ch + ci) * c->k + kh) * c->k + kw];
                      }
                    }
                  y[((s * c->out_ch + o) * oh + yh) * ow + yw] = acc + c->bias.data[o];
                }
        }
        values = std::move(y);
        dims = {c->out_ch, oh, ow};
        in_codes = false;
      } else if (std::holds_alternative<ReluLayer>(layer)) {
        for (double& v : values) v = v > 0.0 ? v : 0.0;
        const double amax = q.act_amax.count(i) ? q.act_amax.at(i) : 1.0;
        codes = quantize_plane(values, bn, dims, ActQuant{abits, amax});
        values = decode_plane(codes);
        in_codes = engine == Engine::shift;
      } else if (std::holds_alternative<MaxPool2x2Layer>(layer)) {
        const std::size_t ch = dims[0], h = dims[1], w = dims[2];
        const std::size_t oh = h / 2, ow = w / 2;
        if (in_codes) {
          std::vector<std::uint16_t> pooled(bn * ch * oh * ow);
          for (std::size_t s = 0; s < bn; ++s)
            for (std::size_t ci = 0; ci < ch; ++ci)
              for (std::size_t yh = 0; yh < oh; ++yh)
                for (std::size_t yw = 0; yw < ow; ++yw) {
                  std::uint16_t best = 0;
                  for (std::size_t dh = 0; dh < 2; ++dh)
                    for (std::size_t dw = 0; dw < 2; ++dw)
                      best = std::max(best, codes.codes[((s * ch + ci) * h + 2 * yh + dh) * w +
                                                        2 * yw + dw]);
                  pooled[((s * ch + ci) * oh + yh) * ow + yw] = best;
                }
          codes.codes = std::move(pooled);
          codes.dims = {ch, oh, ow};
          values = decode_plane(codes);
        } else {
          std::vector<double> pooled(bn * ch * oh * ow);
          for (std::size_t s = 0; s < bn; ++s)
            for (std::size_t ci = 0; ci < ch; ++ci)
              for (std::size_t yh = 0; yh < oh; ++yh)
                for (std::size_t yw = 0; yw < ow; ++yw) {
                  double best = values[((s * ch + ci) * h + 2 * yh) * w + 2 * yw];
                  for (std::size_t dh = 0; dh < 2; ++dh)
                    for (std::size_t dw = 0; dw < 2; ++dw)
                      best = std::max(
                          best, values[((s * ch + ci) * h + 2 * yh + dh) * w + 2 * yw + dw]);
                  pooled[((s * ch + ci) * oh + yh) * ow + yw] = best;
                }
          values = std::move(pooled);
        }
        dims = {ch, oh, ow};
      } else {  // flatten
        dims = {shape_numel(dims)};
        if (in_codes) codes.dims = dims;
      }
      out.checksums[i + 1] = fnv1a(values.data(), values.size(), out.checksums[i + 1]);
    }

    require(dims.size() == 1 && dims[0] == k, Errc::shape_mismatch,
            "model output does not match class count");
    std::copy(values.begin(), values.end(), out.logits.begin() + start * k);
  }
  return out;
}

}  // namespace

InferResult infer(const Model& model, const Dataset& data, Engine engine) {
  RunOutput run = run_model(model, data, engine);
  const std::size_t n = data.size();
  const std::size_t k = model.num_classes;
  InferResult result;
  result.predictions.resize(n);
  std::size_t correct = 0;
  for (std::size_t s = 0; s < n; ++s) {
    const double* l = run.logits.data() + s * k;
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j)
      if (l[j] > l[best]) best = j;
    result.predictions[s] = static_cast<int>(best);
    if (static_cast<int>(best) == data.labels[s]) ++correct;
  }
  result.accuracy = static_cast<double>(correct) / static_cast<double>(n);
  result.layer_checksums = std::move(run.checksums);
  return result;
}

std::vector<double> infer_logits(const Model& model, const Dataset& data, Engine engine) {
  return run_model(model, data, engine).logits;
}

EngineComparison compare_engines(const Model& model, const Dataset& data) {
  EngineComparison cmp;
  std::vector<double> lf = infer_logits(model, data, Engine::float_ref);
  std::vector<double> ls = infer_logits(model, data, Engine::shift);
  cmp.float_ref = infer(model, data, Engine::float_ref);
  cmp.shift = infer(model, data, Engine::shift);
  cmp.predictions_match = cmp.float_ref.predictions == cmp.shift.predictions;
  double max_rel = 0.0;
  for (std::size_t i = 0; i < lf.size(); ++i) {
    const double denom = std::max({std::fabs(lf[i]), std::fabs(ls[i]), 1e-12});
    max_rel = std::max(max_rel, std::fabs(lf[i] - ls[i]) / denom);
  }
  cmp.max_rel_diff = max_rel;
  return cmp;
}

}  // namespace msp
