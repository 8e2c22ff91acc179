#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "msp/tensor.hpp"

namespace msp {

struct DenseLayer {
  std::size_t in = 0, out = 0;
  Tensor weights;  // dims {out, in}
  Tensor bias;     // dims {out}
};

struct Conv2dLayer {
  std::size_t in_ch = 0, out_ch = 0, k = 0, stride = 1, pad = 0;
  Tensor weights;  // dims {out_ch, in_ch, k, k}
  Tensor bias;     // dims {out_ch}
};

struct ReluLayer {};
struct MaxPool2x2Layer {};
struct FlattenLayer {};

using Layer = std::variant<DenseLayer, Conv2dLayer, ReluLayer, MaxPool2x2Layer, FlattenLayer>;

bool layer_is_quantizable(const Layer& layer);
std::string layer_kind_name(const Layer& layer);

struct NetworkIR {
  std::vector<Layer> layers;

  std::vector<std::size_t> quantizable_indices() const;
};

// Shape of the data flowing between layers: {features} or {channels, h, w}.
using Shape = std::vector<std::size_t>;

// Propagates an input shape through one layer; errors on mismatch.
Shape layer_output_shape(const Layer& layer, const Shape& in);

// GEMM view: conv O x I x k x k flattens rows to O, cols to I*k*k in
// (in_ch, k_row, k_col) order; dense passes through.
WeightMatrix reshape_to_gemm(const Layer& layer);

// Writes a GEMM matrix back into the layer's weight tensor (inverse reshape).
void assign_from_gemm(Layer& layer, const WeightMatrix& m);

struct OpCounts {
  std::vector<std::uint64_t> per_layer;  // aligned with layers, 0 for non-MAC layers
  std::uint64_t total = 0;
};

// Multiply-accumulate counts per layer for one input sample.
OpCounts count_ops(const NetworkIR& net, const Shape& input_dims);

// Builds a randomly initialized network from a compact arch string, e.g.
// "2,d16,relu,d16,relu,d2" or "1x28x28,c8k3s1p1,relu,pool,flat,d10".
// Dense input sizes are inferred from the propagated shape.
NetworkIR build_network(const std::string& arch, std::uint64_t seed);

Shape parse_input_shape(const std::string& arch);

}  // namespace msp
