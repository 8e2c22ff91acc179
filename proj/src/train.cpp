#include "msp/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "msp/rng.hpp"

namespace msp {

double ste_forward(double a, const ActQuant& q) {
  return ste_code(a, q) * q.step();
}

int ste_code(double a, const ActQuant& q) {
  double clipped = std::min(std::max(a, 0.0), q.amax);
  int code = static_cast<int>(std::floor(clipped / q.step() + 0.5));
  return std::min(code, q.max_code());
}

double ste_mask(double a, const ActQuant& q) {
  return (a >= 0.0 && a <= q.amax) ? 1.0 : 0.0;
}

void admm_update(const WeightMatrix& w, SchemeMap& map, const SchemeTables& tables,
                 const AlphaPolicy& alpha_policy, bool refit_alpha, AdmmLayerState& state) {
  require(state.z.rows == w.rows && state.z.cols == w.cols, Errc::shape_mismatch,
          "ADMM state does not match weight shape");
  for (std::size_t r = 0; r < w.rows; ++r) {
    const LevelSet& levels = tables.for_row(map.rows[r]);
    if (refit_alpha) map.alpha[r] = fit_alpha(w.row(r), levels, alpha_policy);
    const double alpha = map.alpha[r];
    for (std::size_t c = 0; c < w.cols; ++c) {
      const double target = w.at(r, c) + state.u.at(r, c);
      state.z.at(r, c) = project_nearest(levels, alpha, target).value;
      state.u.at(r, c) = w.at(r, c) - state.z.at(r, c) + state.u.at(r, c);
    }
  }
}

double augmented_penalty(const WeightMatrix& w, const AdmmLayerState& state, double rho) {
  double acc = 0.0;
  for (std::size_t i = 0; i < w.data.size(); ++i) {
    const double d = w.data[i] - state.z.data[i] + state.u.data[i];
    acc += d * d;
  }
  return 0.5 * rho * acc;
}

void augmented_grad(const WeightMatrix& w, const AdmmLayerState& state, double rho,
                    std::span<double> grad_out) {
  require(grad_out.size() == w.data.size(), Errc::shape_mismatch,
          "gradient buffer does not match weights");
  for (std::size_t i = 0; i < w.data.size(); ++i)
    grad_out[i] += rho * (w.data[i] - state.z.data[i] + state.u.data[i]);
}

// ---------------------------------------------------------------------------
// NetEngine

NetEngine::NetEngine(NetworkIR net, Shape input_dims, std::size_t num_classes)
    : net_(std::move(net)), input_dims_(std::move(input_dims)), num_classes_(num_classes) {
  Shape shape = input_dims_;
  for (std::size_t i = 0; i < net_.layers.size(); ++i) {
    shape = layer_output_shape(net_.layers[i], shape);
    if (layer_is_quantizable(net_.layers[i])) {
      if (const auto* d = std::get_if<DenseLayer>(&net_.layers[i])) {
        grads_w_[i] = Tensor::zeros(d->weights.dims);
        grads_b_[i] = Tensor::zeros(d->bias.dims);
      } else if (const auto* c = std::get_if<Conv2dLayer>(&net_.layers[i])) {
        grads_w_[i] = Tensor::zeros(c->weights.dims);
        grads_b_[i] = Tensor::zeros(c->bias.dims);
      }
    }
    if (std::holds_alternative<ReluLayer>(net_.layers[i])) act_amax_[i] = 1.0;
  }
  require(shape.size() == 1 && shape[0] == num_classes_, Errc::shape_mismatch,
          "network output does not match the class count");
}

void NetEngine::enable_act_quant(int bits) {
  require(bits >= 2 && bits <= 8, Errc::validation, "activation bits must be in [2, 8]");
  act_quant_ = true;
  act_bits_ = bits;
}

void NetEngine::disable_act_quant() { act_quant_ = false; }

Tensor& NetEngine::grad_w(std::size_t layer_idx) { return grads_w_.at(layer_idx); }
Tensor& NetEngine::grad_b(std::size_t layer_idx) { return grads_b_.at(layer_idx); }

void NetEngine::zero_grads() {
  for (auto& [idx, g] : grads_w_) std::fill(g.data.begin(), g.data.end(), 0.0);
  for (auto& [idx, g] : grads_b_) std::fill(g.data.begin(), g.data.end(), 0.0);
}

namespace {

std::size_t batch_size_of(const Tensor& x) { return x.dims.empty() ? 0 : x.dims[0]; }

Tensor dense_forward(const DenseLayer& d, const Tensor& x) {
  const std::size_t n = batch_size_of(x);
  Tensor y = Tensor::zeros({n, d.out});
  for (std::size_t s = 0; s < n; ++s) {
    const double* xin = x.data.data() + s * d.in;
    double* yout = y.data.data() + s * d.out;
    for (std::size_t o = 0; o < d.out; ++o) {
      double acc = d.bias.data[o];
      const double* wrow = d.weights.data.data() + o * d.in;
      for (std::size_t i = 0; i < d.in; ++i) acc += wrow[i] * xin[i];
      yout[o] = acc;
    }
  }
  return y;
}

void dense_backward(const DenseLayer& d, const Tensor& x, const Tensor& dy, Tensor& dx,
                    Tensor& dw, Tensor& db) {
  const std::size_t n = batch_size_of(x);
  for (std::size_t s = 0; s < n; ++s) {
    const double* xin = x.data.data() + s * d.in;
    const double* g = dy.data.data() + s * d.out;
    double* dxs = dx.data.data() + s * d.in;
    for (std::size_t o = 0; o < d.out; ++o) {
      const double go = g[o];
      db.data[o] += go;
      double* dwrow = dw.data.data() + o * d.in;
      const double* wrow = d.weights.data.data() + o * d.in;
      for (std::size_t i = 0; i < d.in; ++i) {
        dwrow[i] += go * xin[i];
        dxs[i] += go * wrow[i];
      }
    }
  }
}

struct ConvDims {
  std::size_t h, w, oh, ow;
};

ConvDims conv_dims(const Conv2dLayer& c, const Tensor& x) {
  ConvDims d;
  d.h = x.dims[2];
  d.w = x.dims[3];
  d.oh = (d.h + 2 * c.pad - c.k) / c.stride + 1;
  d.ow = (d.w + 2 * c.pad - c.k) / c.stride + 1;
  return d;
}

Tensor conv_forward(const Conv2dLayer& c, const Tensor& x) {
  const std::size_t n = batch_size_of(x);
  const ConvDims cd = conv_dims(c, x);
  Tensor y = Tensor::zeros({n, c.out_ch, cd.oh, cd.ow});
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t o = 0; o < c.out_ch; ++o)
      for (std::size_t yh = 0; yh < cd.oh; ++yh)
        for (std::size_t yw = 0; yw < cd.ow; ++yw) {
          double acc = c.bias.data[o];
          for (std::size_t ci = 0; ci < c.in_ch; ++ci)
            for (std::size_t kh = 0; kh < c.k; ++kh) {
              const std::ptrdiff_t ih =
                  static_cast<std::ptrdiff_t>(yh * c.stride + kh) -
                  static_cast<std::ptrdiff_t>(c.pad);
              if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(cd.h)) continue;
              for (std::size_t kw = 0; kw < c.k; ++kw) {
                const std::ptrdiff_t iw =
                    static_cast<std::ptrdiff_t>(yw * c.stride + kw) -
                    static_cast<std::ptrdiff_t>(c.pad);
                if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(cd.w)) continue;
                acc += x.data[((s * c.in_ch + ci) * cd.h + ih) * cd.w + iw] *
                       c.weights.data[((o * c.in_ch + ci) * c.k + kh) * c.k + kw];
              }
            }
          y.data[((s * c.out_ch + o) * cd.oh + yh) * cd.ow + yw] = acc;
        }
  return y;
}

void conv_backward(const Conv2dLayer& c, const Tensor& x, const Tensor& dy, Tensor& dx,
                   Tensor& dw, Tensor& db) {
  const std::size_t n = batch_size_of(x);
  const ConvDims cd = conv_dims(c, x);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t o = 0; o < c.out_ch; ++o)
      for (std::size_t yh = 0; yh < cd.oh; ++yh)
        for (std::size_t yw = 0; yw < cd.ow; ++yw) {
          const double g = dy.data[((s * c.out_ch + o) * cd.oh + yh) * cd.ow + yw];
          db.data[o] += g;
          for (std::size_t ci = 0; ci < c.in_ch; ++ci)
            for (std::size_t kh = 0; kh < c.k; ++kh) {
              const std::ptrdiff_t ih =
                  static_cast<std::ptrdiff_t>(yh * c.stride + kh) -
                  static_cast<std::ptrdiff_t>(c.pad);
              if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(cd.h)) continue;
              for (std::size_t kw = 0; kw < c.k; ++kw) {
                const std::ptrdiff_t iw =
                    static_cast<std::ptrdiff_t>(yw * c.stride + kw) -
                    static_cast<std::ptrdiff_t>(c.pad);
                if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(cd.w)) continue;
                const std::size_t xi = ((s * c.in_ch + ci) * cd.h + ih) * cd.w + iw;
                const std::size_t wi = ((o * c.in_ch + ci) * c.k + kh) * c.k + kw;
                dw.data[wi] += g * x.data[xi];
                dx.data[xi] += g * c.weights.data[wi];
              }
            }
        }
}

}  // namespace

Tensor NetEngine::run(const Tensor& x, bool cache) {
  require(x.rank() == input_dims_.size() + 1, Errc::shape_mismatch, "bad input batch rank");
  for (std::size_t i = 0; i < input_dims_.size(); ++i)
    require(x.dims[i + 1] == input_dims_[i], Errc::shape_mismatch, "bad input batch shape");
  if (cache) {
    cache_in_.clear();
    cache_argmax_.clear();
    cache_in_.resize(net_.layers.size());
    cache_argmax_.resize(net_.layers.size());
  }
  Tensor cur = x;
  if (act_quant_) {
    const ActQuant q{act_bits_, input_amax_};
    for (double& v : cur.data) v = ste_forward(v, q);
  }
  for (std::size_t i = 0; i < net_.layers.size(); ++i) {
    Layer& layer = net_.layers[i];
    if (auto* d = std::get_if<DenseLayer>(&layer)) {
      if (cache) cache_in_[i] = cur;
      cur = dense_forward(*d, cur);
    } else if (auto* c = std::get_if<Conv2dLayer>(&layer)) {
      if (cache) cache_in_[i] = cur;
      cur = conv_forward(*c, cur);
    } else if (std::holds_alternative<ReluLayer>(layer)) {
      if (cache) cache_in_[i] = cur;
      for (double& v : cur.data) v = v > 0.0 ? v : 0.0;
      if (act_quant_) {
        const ActQuant q{act_bits_, act_amax_.at(i)};
        for (double& v : cur.data) v = ste_forward(v, q);
      }
    } else if (std::holds_alternative<MaxPool2x2Layer>(layer)) {
      const std::size_t n = cur.dims[0], ch = cur.dims[1], h = cur.dims[2], w = cur.dims[3];
      const std::size_t oh = h / 2, ow = w / 2;
      Tensor y = Tensor::zeros({n, ch, oh, ow});
      std::vector<std::size_t> arg(n * ch * oh * ow);
      for (std::size_t s = 0; s < n; ++s)
        for (std::size_t ci = 0; ci < ch; ++ci)
          for (std::size_t yh = 0; yh < oh; ++yh)
            for (std::size_t yw = 0; yw < ow; ++yw) {
              std::size_t best = ((s * ch + ci) * h + 2 * yh) * w + 2 * yw;
              double bv = cur.data[best];
              for (std::size_t dh = 0; dh < 2; ++dh)
                for (std::size_t dw2 = 0; dw2 < 2; ++dw2) {
                  const std::size_t idx = ((s * ch + ci) * h + 2 * yh + dh) * w + 2 * yw + dw2;
                  if (cur.data[idx] > bv) {
                    bv = cur.data[idx];
                    best = idx;
                  }
                }
              const std::size_t oi = ((s * ch + ci) * oh + yh) * ow + yw;
              y.data[oi] = bv;
              arg[oi] = best;
            }
      if (cache) {
        cache_in_[i] = cur;
        cache_argmax_[i] = std::move(arg);
      }
      cur = std::move(y);
    } else {  // flatten
      if (cache) cache_in_[i] = Tensor::zeros(cur.dims);  // only dims needed
      cur = Tensor({cur.dims[0], cur.numel() / cur.dims[0]}, std::move(cur.data));
    }
  }
  return cur;
}

Tensor NetEngine::forward(const Tensor& x) { return run(x, false); }

void NetEngine::backward(const Tensor& dlogits) {
  Tensor d = dlogits;
  for (std::size_t ri = net_.layers.size(); ri-- > 0;) {
    Layer& layer = net_.layers[ri];
    if (auto* dl = std::get_if<DenseLayer>(&layer)) {
      const Tensor& xin = cache_in_[ri];
      Tensor dx = Tensor::zeros(xin.dims);
      dense_backward(*dl, xin, d, dx, grads_w_.at(ri), grads_b_.at(ri));
      d = std::move(dx);
    } else if (auto* cl = std::get_if<Conv2dLayer>(&layer)) {
      const Tensor& xin = cache_in_[ri];
      Tensor dx = Tensor::zeros(xin.dims);
      conv_backward(*cl, xin, d, dx, grads_w_.at(ri), grads_b_.at(ri));
      d = std::move(dx);
    } else if (std::holds_alternative<ReluLayer>(layer)) {
      const Tensor& pre = cache_in_[ri];
      if (act_quant_) {
        const ActQuant q{act_bits_, act_amax_.at(ri)};
        for (std::size_t i = 0; i < d.data.size(); ++i) {
          const double y = pre.data[i] > 0.0 ? pre.data[i] : 0.0;  // relu output
          d.data[i] *= ste_mask(y, q);
        }
      }
      for (std::size_t i = 0; i < d.data.size(); ++i)
        if (pre.data[i] <= 0.0) d.data[i] = 0.0;
    } else if (std::holds_alternative<MaxPool2x2Layer>(layer)) {
      const Tensor& xin = cache_in_[ri];
      Tensor dx = Tensor::zeros(xin.dims);
      const auto& arg = cache_argmax_[ri];
      for (std::size_t i = 0; i < d.data.size(); ++i) dx.data[arg[i]] += d.data[i];
      d = std::move(dx);
    } else {  // flatten
      d = Tensor(cache_in_[ri].dims, std::move(d.data));
    }
  }
}

double NetEngine::loss_and_grad(const Tensor& x, const std::vector<int>& labels) {
  const std::size_t n = batch_size_of(x);
  require(labels.size() == n, Errc::shape_mismatch, "labels do not match batch");
  Tensor logits = run(x, true);
  const std::size_t k = num_classes_;
  Tensor dlogits = Tensor::zeros(logits.dims);
  double loss = 0.0;
  for (std::size_t s = 0; s < n; ++s) {
    const double* l = logits.data.data() + s * k;
    double m = l[0];
    for (std::size_t j = 1; j < k; ++j) m = std::max(m, l[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) sum += std::exp(l[j] - m);
    const int y = labels[s];
    loss += -(l[y] - m - std::log(sum));
    for (std::size_t j = 0; j < k; ++j) {
      double p = std::exp(l[j] - m) / sum;
      dlogits.data[s * k + j] =
          (p - (static_cast<int>(j) == y ? 1.0 : 0.0)) / static_cast<double>(n);
    }
  }
  backward(dlogits);
  return loss / static_cast<double>(n);
}

double NetEngine::accuracy(const Dataset& data, std::size_t batch) {
  require(data.size() > 0, Errc::validation, "accuracy undefined on an empty dataset");
  const std::size_t per = data.sample_numel();
  std::size_t correct = 0;
  for (std::size_t start = 0; start < data.size(); start += batch) {
    const std::size_t n = std::min(batch, data.size() - start);
    Shape dims = data.samples.dims;
    dims[0] = n;
    Tensor x(dims, {data.samples.data.begin() + start * per,
                    data.samples.data.begin() + (start + n) * per});
    Tensor logits = forward(x);
    const std::size_t k = num_classes_;
    for (std::size_t s = 0; s < n; ++s) {
      const double* l = logits.data.data() + s * k;
      std::size_t best = 0;
      for (std::size_t j = 1; j < k; ++j)
        if (l[j] > l[best]) best = j;
      if (static_cast<int>(best) == data.labels[start + s]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

namespace {

double percentile_999(std::vector<double> values) {
  if (values.empty()) return 1.0;
  std::sort(values.begin(), values.end());
  const double n = static_cast<double>(values.size());
  std::size_t idx = static_cast<std::size_t>(std::ceil(0.999 * n));
  idx = idx == 0 ? 0 : idx - 1;
  idx = std::min(idx, values.size() - 1);
  const double v = values[idx];
  return v > 0.0 ? v : 1.0;
}

}  // namespace

void NetEngine::calibrate(const Tensor& batch) {
  const bool was_quant = act_quant_;
  act_quant_ = false;
  input_amax_ = percentile_999(batch.data);

  // Walk the float forward, capturing each relu's pre-activation tensor.
  Tensor cur = batch;
  for (std::size_t i = 0; i < net_.layers.size(); ++i) {
    Layer& layer = net_.layers[i];
    if (std::holds_alternative<ReluLayer>(layer)) {
      act_amax_[i] = percentile_999(cur.data);
      for (double& v : cur.data) v = v > 0.0 ? v : 0.0;
    } else if (auto* d = std::get_if<DenseLayer>(&layer)) {
      cur = dense_forward(*d, cur);
    } else if (auto* c = std::get_if<Conv2dLayer>(&layer)) {
      cur = conv_forward(*c, cur);
    } else if (std::holds_alternative<MaxPool2x2Layer>(layer)) {
      const std::size_t n = cur.dims[0], ch = cur.dims[1], h = cur.dims[2], w = cur.dims[3];
      const std::size_t oh = h / 2, ow = w / 2;
      Tensor y = Tensor::zeros({n, ch, oh, ow});
      for (std::size_t s = 0; s < n; ++s)
        for (std::size_t ci = 0; ci < ch; ++ci)
          for (std::size_t yh = 0; yh < oh; ++yh)
            for (std::size_t yw = 0; yw < ow; ++yw) {
              double bv = cur.data[((s * ch + ci) * h + 2 * yh) * w + 2 * yw];
              for (std::size_t dh = 0; dh < 2; ++dh)
                for (std::size_t dw2 = 0; dw2 < 2; ++dw2)
                  bv = std::max(bv,
                                cur.data[((s * ch + ci) * h + 2 * yh + dh) * w + 2 * yw + dw2]);
              y.data[((s * ch + ci) * oh + yh) * ow + yw] = bv;
            }
      cur = std::move(y);
    } else {  // flatten
      cur = Tensor({cur.dims[0], cur.numel() / cur.dims[0]}, std::move(cur.data));
    }
  }
  act_quant_ = was_quant;
}

void NetEngine::sgd_step(double lr, double l2,
                         const std::map<std::size_t, double>* weight_step_scale) {
  for (auto& [idx, gw] : grads_w_) {
    Layer& layer = net_.layers[idx];
    Tensor& w = std::holds_alternative<DenseLayer>(layer)
                    ? std::get<DenseLayer>(layer).weights
                    : std::get<Conv2dLayer>(layer).weights;
    Tensor& b = std::holds_alternative<DenseLayer>(layer) ? std::get<DenseLayer>(layer).bias
                                                          : std::get<Conv2dLayer>(layer).bias;
    double wlr = lr;
    if (weight_step_scale && weight_step_scale->count(idx))
      wlr = lr * weight_step_scale->at(idx);
    for (std::size_t i = 0; i < w.data.size(); ++i)
      w.data[i] -= wlr * (gw.data[i] + l2 * w.data[i]);
    Tensor& gb = grads_b_.at(idx);
    for (std::size_t i = 0; i < b.data.size(); ++i) b.data[i] -= lr * gb.data[i];
  }
}

// ---------------------------------------------------------------------------
// Training loop

void TrainConfig::validate() const {
  require(epochs >= 1 && batch >= 1 && lr > 0 && l2 >= 0 && rho >= 0 && rho_growth >= 1 &&
              admm_period >= 1 &&
              pretrain_epochs >= 0,
          Errc::validation, "invalid training configuration");
}

namespace {

double lr_at(const TrainConfig& cfg, int epoch, int total) {
  if (cfg.schedule == TrainConfig::Schedule::step)
    return cfg.lr * std::pow(cfg.gamma, std::floor(static_cast<double>(epoch) /
                                                   static_cast<double>(cfg.step_size)));
  return cfg.lr * 0.5 *
         (1.0 + std::cos(3.14159265358979323846 * static_cast<double>(epoch) /
                         static_cast<double>(std::max(1, total))));
}

Tensor gather_batch(const Dataset& data, const std::vector<std::size_t>& order,
                    std::size_t start, std::size_t n, std::vector<int>& labels_out) {
  const std::size_t per = data.sample_numel();
  Shape dims = data.samples.dims;
  dims[0] = n;
  Tensor x = Tensor::zeros(dims);
  labels_out.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t src = order[start + i];
    std::copy_n(data.samples.data.begin() + src * per, per, x.data.begin() + i * per);
    labels_out[i] = data.labels[src];
  }
  return x;
}

double feasibility_gap_of(NetworkIR& net, const std::map<std::size_t, SchemeMap>& maps,
                          const SchemeTables& tables) {
  double gap = 0.0;
  for (const auto& [idx, map] : maps) {
    WeightMatrix w = reshape_to_gemm(net.layers[idx]);
    for (std::size_t r = 0; r < w.rows; ++r) {
      const LevelSet& levels = tables.for_row(map.rows[r]);
      for (double v : w.row(r))
        gap = std::max(gap, std::fabs(v - project_nearest(levels, map.alpha[r], v).value));
    }
  }
  return gap;
}

void run_float_epochs(NetEngine& engine, const Dataset& train_data, const Dataset& test_data,
                      const TrainConfig& cfg, int epochs, Rng& rng,
                      std::vector<EpochLog>* log) {
  std::vector<std::size_t> order(train_data.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<int> labels;
  for (int e = 0; e < epochs; ++e) {
    rng.shuffle(order);
    const double lr = lr_at(cfg, e, epochs);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < train_data.size(); start += cfg.batch) {
      const std::size_t n = std::min(cfg.batch, train_data.size() - start);
      Tensor x = gather_batch(train_data, order, start, n, labels);
      engine.zero_grads();
      const double loss = engine.loss_and_grad(x, labels);
      require(std::isfinite(loss), Errc::divergence, "training diverged (non-finite loss)");
      engine.sgd_step(lr, cfg.l2);
      loss_sum += loss;
      ++batches;
    }
    if (log) {
      EpochLog row;
      row.epoch = e;
      row.task_loss = loss_sum / static_cast<double>(batches);
      row.train_acc = engine.accuracy(train_data);
      row.test_acc = engine.accuracy(test_data);
      log->push_back(row);
    }
  }
}

}  // namespace

TrainResult train(const NetworkIR& net, const Shape& input_dims, std::size_t num_classes,
                  const Dataset& train_data, const Dataset& test_data, const TrainConfig& cfg) {
  cfg.validate();
  require(train_data.size() >= cfg.batch || train_data.size() >= 1, Errc::validation,
          "empty training set");
  Rng rng(cfg.seed);
  NetEngine engine(net, input_dims, num_classes);

  TrainResult result;

  // Float phase: the quantization-aware phase continues from this model.
  run_float_epochs(engine, train_data, test_data, cfg, cfg.pretrain_epochs, rng,
                   cfg.quantize ? nullptr : &result.log);
  result.float_baseline_test_acc =
      cfg.pretrain_epochs > 0 ? engine.accuracy(test_data) : engine.accuracy(test_data);

  if (!cfg.quantize) {
    result.model.net = engine.net();
    result.model.input_dims = input_dims;
    result.model.num_classes = num_classes;
    result.final_test_acc = result.float_baseline_test_acc;
    return result;
  }

  // Calibrate activation clips on the first batch, then freeze them.
  const std::size_t calib_n = std::min(train_data.size(), cfg.batch);
  {
    std::vector<std::size_t> ident(calib_n);
    std::iota(ident.begin(), ident.end(), 0);
    std::vector<int> unused;
    Tensor first = gather_batch(train_data, ident, 0, calib_n, unused);
    engine.calibrate(first);
  }
  QuantConfig qconfig = cfg.qconfig;
  engine.enable_act_quant(qconfig.act_bits);

  // Scheme maps are computed once from the float weights and frozen.
  const SchemeTables tables = qconfig.tables();
  std::map<std::size_t, SchemeMap> maps;
  std::map<std::size_t, AdmmLayerState> admm;
  for (std::size_t idx : engine.net().quantizable_indices()) {
    WeightMatrix w = reshape_to_gemm(engine.net().layers[idx]);
    RowStats stats = row_stats(w, tables.fixed_low);
    maps.emplace(idx, assign(w, qconfig.ratio, stats));
    AdmmLayerState st;
    st.z = WeightMatrix(w.rows, w.cols);
    st.u = WeightMatrix(w.rows, w.cols);
    admm.emplace(idx, std::move(st));
  }

  std::vector<std::size_t> order(train_data.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<int> labels;
  double rho_prev = cfg.rho;
  for (int e = 0; e < cfg.epochs; ++e) {
    const double rho_e =
        std::min(cfg.rho * std::pow(cfg.rho_growth, static_cast<double>(e)), 1e8);
    if (e % cfg.admm_period == 0) {
      // Scaled-dual rescaling for a varying penalty: U carries lambda / rho.
      if (rho_e != rho_prev && rho_e > 0) {
        const double rescale = rho_prev / rho_e;
        for (auto& [idx, st] : admm)
          for (double& u : st.u.data) u *= rescale;
      }
      rho_prev = rho_e;
      for (auto& [idx, st] : admm) {
        WeightMatrix w = reshape_to_gemm(engine.net().layers[idx]);
        admm_update(w, maps.at(idx), tables, qconfig.alpha, /*refit_alpha=*/true, st);
      }
    }
    rng.shuffle(order);
    const double lr = lr_at(cfg, e, cfg.epochs);
    // Proximal damping of the quadratic penalty keeps lr * rho stable.
    std::map<std::size_t, double> step_scale;
    for (const auto& [idx, st] : admm) step_scale[idx] = 1.0 / (1.0 + lr * rho_e);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < train_data.size(); start += cfg.batch) {
      const std::size_t n = std::min(cfg.batch, train_data.size() - start);
      Tensor x = gather_batch(train_data, order, start, n, labels);
      engine.zero_grads();
      const double loss = engine.loss_and_grad(x, labels);
      require(std::isfinite(loss), Errc::divergence, "training diverged (non-finite loss)");
      if (cfg.rho != 0.0) {
        for (auto& [idx, st] : admm) {
          WeightMatrix w = reshape_to_gemm(engine.net().layers[idx]);
          augmented_grad(w, st, rho_e, engine.grad_w(idx).data);
        }
      }
      engine.sgd_step(lr, cfg.l2, cfg.rho != 0.0 ? &step_scale : nullptr);
      loss_sum += loss;
      ++batches;
    }

    EpochLog row;
    row.epoch = e;
    row.task_loss = loss_sum / static_cast<double>(batches);
    double penalty = 0.0;
    for (auto& [idx, st] : admm)
      penalty += augmented_penalty(reshape_to_gemm(engine.net().layers[idx]), st, rho_e);
    row.penalty = penalty;
    row.feasibility_gap = feasibility_gap_of(engine.net(), maps, tables);
    row.train_acc = engine.accuracy(train_data);
    row.test_acc = engine.accuracy(test_data);
    result.log.push_back(row);
  }

  result.final_feasibility_gap =
      result.log.empty() ? 0.0 : result.log.back().feasibility_gap;

  // Hard projection: refit alpha, project row-wise, freeze codes.
  Model model;
  model.input_dims = input_dims;
  model.num_classes = num_classes;
  model.net = engine.net();
  QuantInfo info;
  info.config = qconfig;
  info.finalized = true;
  info.input_amax = engine.input_amax();
  info.act_amax = engine.act_amax();
  for (auto& [idx, map] : maps) {
    WeightMatrix w = reshape_to_gemm(model.net.layers[idx]);
    QuantLayer layer;
    layer.map = map;
    layer.codes = quantize_rows(w, layer.map, qconfig, tables);
    assign_from_gemm(model.net.layers[idx], w);
    info.layers.emplace(idx, std::move(layer));
  }
  model.quant = std::move(info);

  NetEngine final_engine(model.net, input_dims, num_classes);
  final_engine.enable_act_quant(qconfig.act_bits);
  final_engine.set_input_amax(model.quant->input_amax);
  final_engine.act_amax() = model.quant->act_amax;
  result.final_test_acc = final_engine.accuracy(test_data);
  result.model = std::move(model);
  return result;
}

void calibrate_activations(Model& model, const Dataset& data, std::size_t max_samples) {
  require(model.quant.has_value(), Errc::validation,
          "activation calibration needs a quantized model");
  const std::size_t n = std::min(max_samples, data.size());
  require(n > 0, Errc::validation, "calibration dataset is empty");
  NetEngine engine(model.net, model.input_dims, model.num_classes);
  std::vector<std::size_t> ident(n);
  std::iota(ident.begin(), ident.end(), 0);
  std::vector<int> unused;
  Tensor batch = gather_batch(data, ident, 0, n, unused);
  engine.calibrate(batch);
  model.quant->input_amax = engine.input_amax();
  model.quant->act_amax = engine.act_amax();
}

void write_training_log_csv(const std::filesystem::path& path,
                            const std::vector<EpochLog>& log) {
  std::ofstream out(path, std::ios::trunc);
  require(out.good(), Errc::io, "cannot write " + path.string());
  out << "epoch,task_loss,penalty,feasibility_gap,train_acc,test_acc\n";
  char buf[256];
  for (const EpochLog& row : log) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g,%.17g\n", row.epoch,
                  row.task_loss, row.penalty, row.feasibility_gap, row.train_acc, row.test_acc);
    out << buf;
  }
}

}  // namespace msp
