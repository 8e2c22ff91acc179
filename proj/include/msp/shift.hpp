#pragma once

#include "msp/dataset.hpp"
#include "msp/qmodel.hpp"
#include "msp/train.hpp"

namespace msp {

// Quantized activation plane: unsigned codes plus the shared layer scale
// s_a = amax / (2^bits - 1); code * s_a reproduces the STE forward value.
struct ActCodes {
  std::vector<std::uint16_t> codes;
  Shape dims;  // per-sample dims; batch size separate
  std::size_t batch = 0;
  int bits = 4;
  double scale = 1.0;
};

// One SPoT weight as shift-add instructions: two left-shift amounts in the
// fixed-point frame with S = 2^m1 - 1 fractional bits (-1 = term absent).
struct SpotWeightCode {
  std::int8_t sign = 1;
  std::int8_t shift1 = -1;
  std::int8_t shift2 = -1;
};

// sign * ((a << shift1) + (a << shift2)); exactly a * raw_numerator.
inline std::int64_t spot_mac(std::uint32_t a, const SpotWeightCode& w) {
  std::int64_t acc = 0;
  if (w.shift1 >= 0) acc += static_cast<std::int64_t>(a) << w.shift1;
  if (w.shift2 >= 0) acc += static_cast<std::int64_t>(a) << w.shift2;
  return w.sign < 0 ? -acc : acc;
}

// Decodes an m-bit SPoT code into shift instructions for the given scheme.
SpotWeightCode spot_code_from_bits(std::uint32_t code, const QuantScheme& scheme);

// Row kernel of a quantized GEMM layer: either shift-add (LUT path) or
// integer multiply (DSP path), with the per-row dequantization scale factor
// applied once after accumulation.
struct RowKernel {
  RowScheme scheme = RowScheme::Fixed4;
  std::vector<SpotWeightCode> spot;   // LUT path
  std::vector<std::int16_t> fixed;    // DSP path, signed magnitude codes
  double denom = 1.0;                 // alpha * (acc / denom) * s_a dequantizes
  double alpha = 1.0;
};

struct LayerKernel {
  std::vector<RowKernel> rows;
  std::size_t cols = 0;
};

// Builds row kernels and checks the accumulator bound: worst-case |acc| for
// the layer fan-in must fit a signed 64-bit accumulator.
LayerKernel build_layer_kernel(const QuantLayer& qlayer, const QuantConfig& config,
                               std::size_t cols, int act_bits);

// Worst-case accumulator magnitude for C columns at the given widths.
std::uint64_t accumulator_bound(std::size_t cols, int act_bits, const QuantConfig& config);

// Heterogeneous GEMM: activations [n x cols] as codes, output [n x rows]
// dequantized floats (no bias). Each row runs entirely on its scheme's
// integer path.
std::vector<double> hetero_gemm(const ActCodes& a, const LayerKernel& kernel);

enum class Engine { float_ref, shift };

struct InferResult {
  double accuracy = 0.0;
  std::vector<int> predictions;
  std::vector<std::uint64_t> layer_checksums;  // FNV-1a over each layer output
};

// Runs a finalized quantized model. Both engines implement the same network
// function; they differ only in the GEMM arithmetic path.
InferResult infer(const Model& model, const Dataset& data, Engine engine);

struct EngineComparison {
  bool predictions_match = true;
  double max_rel_diff = 0.0;  // over final logits
  InferResult float_ref;
  InferResult shift;
};

EngineComparison compare_engines(const Model& model, const Dataset& data);

// Per-sample logits for one engine (for equivalence tests).
std::vector<double> infer_logits(const Model& model, const Dataset& data, Engine engine);

}  // namespace msp
