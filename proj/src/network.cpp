#include "msp/network.hpp"

#include <cmath>
#include <sstream>

#include "msp/rng.hpp"

namespace msp {

bool layer_is_quantizable(const Layer& layer) {
  return std::holds_alternative<DenseLayer>(layer) || std::holds_alternative<Conv2dLayer>(layer);
}

std::string layer_kind_name(const Layer& layer) {
  if (std::holds_alternative<DenseLayer>(layer)) return "dense";
  if (std::holds_alternative<Conv2dLayer>(layer)) return "conv2d";
  if (std::holds_alternative<ReluLayer>(layer)) return "relu";
  if (std::holds_alternative<MaxPool2x2Layer>(layer)) return "maxpool2x2";
  return "flatten";
}

std::vector<std::size_t> NetworkIR::quantizable_indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < layers.size(); ++i)
    if (layer_is_quantizable(layers[i])) out.push_back(i);
  return out;
}

static std::size_t conv_out_hw(std::size_t in, std::size_t k, std::size_t stride,
                               std::size_t pad) {
  require(in + 2 * pad >= k, Errc::shape_mismatch, "conv kernel larger than padded input");
  return (in + 2 * pad - k) / stride + 1;
}

Shape layer_output_shape(const Layer& layer, const Shape& in) {
  if (const auto* d = std::get_if<DenseLayer>(&layer)) {
    require(in.size() == 1 && in[0] == d->in, Errc::shape_mismatch,
            "dense layer input size mismatch");
    return {d->out};
  }
  if (const auto* c = std::get_if<Conv2dLayer>(&layer)) {
    require(in.size() == 3 && in[0] == c->in_ch, Errc::shape_mismatch,
            "conv layer input channel mismatch");
    return {c->out_ch, conv_out_hw(in[1], c->k, c->stride, c->pad),
            conv_out_hw(in[2], c->k, c->stride, c->pad)};
  }
  if (std::holds_alternative<MaxPool2x2Layer>(layer)) {
    require(in.size() == 3 && in[1] >= 2 && in[2] >= 2, Errc::shape_mismatch,
            "maxpool needs a spatial input of at least 2x2");
    return {in[0], in[1] / 2, in[2] / 2};
  }
  if (std::holds_alternative<FlattenLayer>(layer)) return {shape_numel(in)};
  return in;  // relu
}

WeightMatrix reshape_to_gemm(const Layer& layer) {
  if (const auto* d = std::get_if<DenseLayer>(&layer)) {
    WeightMatrix m(d->out, d->in);
    m.data = d->weights.data;
    return m;
  }
  if (const auto* c = std::get_if<Conv2dLayer>(&layer)) {
    // Row-major O,I,k,k flattens per output channel to I*k*k columns.
    WeightMatrix m(c->out_ch, c->in_ch * c->k * c->k);
    m.data = c->weights.data;
    return m;
  }
  fail(Errc::validation, "layer kind '" + layer_kind_name(layer) + "' is not quantizable");
}

void assign_from_gemm(Layer& layer, const WeightMatrix& m) {
  if (auto* d = std::get_if<DenseLayer>(&layer)) {
    require(m.rows == d->out && m.cols == d->in, Errc::shape_mismatch,
            "GEMM matrix does not match dense shape");
    d->weights.data = m.data;
    return;
  }
  if (auto* c = std::get_if<Conv2dLayer>(&layer)) {
    require(m.rows == c->out_ch && m.cols == c->in_ch * c->k * c->k, Errc::shape_mismatch,
            "GEMM matrix does not match conv shape");
    c->weights.data = m.data;
    return;
  }
  fail(Errc::validation, "layer kind '" + layer_kind_name(layer) + "' is not quantizable");
}

OpCounts count_ops(const NetworkIR& net, const Shape& input_dims) {
  OpCounts counts;
  counts.per_layer.assign(net.layers.size(), 0);
  Shape shape = input_dims;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const Layer& layer = net.layers[i];
    Shape out = layer_output_shape(layer, shape);
    if (const auto* d = std::get_if<DenseLayer>(&layer)) {
      counts.per_layer[i] = static_cast<std::uint64_t>(d->in) * d->out;
    } else if (const auto* c = std::get_if<Conv2dLayer>(&layer)) {
      counts.per_layer[i] = static_cast<std::uint64_t>(out[1]) * out[2] * c->out_ch * c->in_ch *
                            c->k * c->k;
    }
    counts.total += counts.per_layer[i];
    shape = std::move(out);
  }
  return counts;
}

namespace {

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) parts.push_back(item);
  return parts;
}

std::size_t parse_size(const std::string& s, const std::string& what) {
  try {
    std::size_t pos = 0;
    unsigned long long v = std::stoull(s, &pos);
    require(pos == s.size() && v > 0, Errc::validation, "bad " + what + ": '" + s + "'");
    return static_cast<std::size_t>(v);
  } catch (const Error&) {
    throw;
  } catch (const std::exception&) {
    fail(Errc::validation, "bad " + what + ": '" + s + "'");
  }
}

Tensor he_init(std::vector<std::size_t> dims, std::size_t fan_in, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(dims));
  double scale = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (double& v : t.data) v = scale * rng.normal();
  return t;
}

}  // namespace

Shape parse_input_shape(const std::string& arch) {
  auto tokens = split(arch, ',');
  require(!tokens.empty(), Errc::validation, "empty arch string");
  auto dims = split(tokens[0], 'x');
  Shape shape;
  for (const auto& d : dims) shape.push_back(parse_size(d, "input dim"));
  require(shape.size() == 1 || shape.size() == 3, Errc::validation,
          "input shape must be F or CxHxW");
  return shape;
}

NetworkIR build_network(const std::string& arch, std::uint64_t seed) {
  Rng rng(seed);
  auto tokens = split(arch, ',');
  Shape shape = parse_input_shape(arch);
  NetworkIR net;
  for (std::size_t t = 1; t < tokens.size(); ++t) {
    const std::string& tok = tokens[t];
    require(!tok.empty(), Errc::validation, "empty arch token");
    if (tok == "relu") {
      net.layers.emplace_back(ReluLayer{});
    } else if (tok == "pool") {
      net.layers.emplace_back(MaxPool2x2Layer{});
    } else if (tok == "flat") {
      net.layers.emplace_back(FlattenLayer{});
    } else if (tok[0] == 'd') {
      require(shape.size() == 1, Errc::validation,
              "dense layer needs a flat input (insert 'flat')");
      DenseLayer d;
      d.in = shape[0];
      d.out = parse_size(tok.substr(1), "dense width");
      d.weights = he_init({d.out, d.in}, d.in, rng);
      d.bias = Tensor::zeros({d.out});
      net.layers.emplace_back(std::move(d));
    } else if (tok[0] == 'c') {
      // cOUTkKsSpP, e.g. c8k3s1p1
      require(shape.size() == 3, Errc::validation, "conv layer needs a CxHxW input");
      std::size_t kpos = tok.find('k'), spos = tok.find('s'), ppos = tok.find('p');
      require(kpos != std::string::npos && spos != std::string::npos && ppos != std::string::npos,
              Errc::validation, "conv token must look like c8k3s1p1: '" + tok + "'");
      Conv2dLayer c;
      c.in_ch = shape[0];
      c.out_ch = parse_size(tok.substr(1, kpos - 1), "conv channels");
      c.k = parse_size(tok.substr(kpos + 1, spos - kpos - 1), "conv kernel");
      c.stride = parse_size(tok.substr(spos + 1, ppos - spos - 1), "conv stride");
      std::string pstr = tok.substr(ppos + 1);
      c.pad = pstr == "0" ? 0 : parse_size(pstr, "conv pad");
      c.weights = he_init({c.out_ch, c.in_ch, c.k, c.k}, c.in_ch * c.k * c.k, rng);
      c.bias = Tensor::zeros({c.out_ch});
      net.layers.emplace_back(std::move(c));
    } else {
      fail(Errc::validation, "unknown arch token: '" + tok + "'");
    }
    shape = layer_output_shape(net.layers.back(), shape);
  }
  return net;
}

}  // namespace msp
