#pragma once

#include <filesystem>
#include <map>
#include <optional>

#include "msp/network.hpp"
#include "msp/scheme.hpp"

namespace msp {

// Per-scheme level sets used by one model (built once, shared).
struct SchemeTables {
  LevelSet spot;
  LevelSet fixed_low;
  LevelSet fixed8;

  const LevelSet& for_row(RowScheme s) const {
    switch (s) {
      case RowScheme::Spot4: return spot;
      case RowScheme::Fixed4: return fixed_low;
      default: return fixed8;
    }
  }
};

struct QuantConfig {
  int weight_bits = 4;
  int m1 = 2;
  int m2 = 1;
  int act_bits = 4;
  SchemeRatio ratio = SchemeRatio::msp();
  AlphaPolicy alpha;

  SchemeTables tables() const;
  int row_bits(RowScheme s) const { return s == RowScheme::Fixed8 ? 8 : weight_bits; }
};

// Quantized state of one GEMM layer: assignment map plus per-row codes.
struct QuantLayer {
  SchemeMap map;
  std::vector<std::vector<std::uint32_t>> codes;  // rows x cols
};

struct QuantInfo {
  QuantConfig config;
  bool finalized = false;
  double input_amax = 1.0;
  std::map<std::size_t, double> act_amax;     // relu layer index -> clip value
  std::map<std::size_t, QuantLayer> layers;   // quantizable layer index -> state
};

// A model on disk or in memory: the network plus optional quantization state.
// For quantized models the net's weight tensors hold the decoded values
// alpha * unit_level, so float execution needs no code lookups.
struct Model {
  NetworkIR net;
  Shape input_dims;
  std::size_t num_classes = 0;
  std::optional<QuantInfo> quant;

  bool finalized() const { return quant && quant->finalized; }
};

// One-shot post-training projection: every quantizable layer (first and last
// included) is reshaped, assigned row-wise, and projected under its scheme.
Model quantize_model(const Model& float_model, const QuantConfig& config);

// Quantizes a single GEMM matrix in place given an assignment; fills per-row
// alpha and returns the codes.
std::vector<std::vector<std::uint32_t>> quantize_rows(WeightMatrix& w, SchemeMap& map,
                                                      const QuantConfig& config,
                                                      const SchemeTables& tables);

// Mean absolute reconstruction error per scheme group of a quantized layer
// against reference weights (for summaries).
std::array<double, 3> group_mean_abs_error(const WeightMatrix& reference,
                                           const WeightMatrix& quantized, const SchemeMap& map);

// Model directory format: manifest.json plus tensor containers and packed
// code arrays. Deterministic byte-for-byte for identical inputs.
void save_model(const std::filesystem::path& dir, const Model& model);
Model load_model(const std::filesystem::path& dir);

}  // namespace msp
