#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "msp/qmodel.hpp"

namespace msp {

struct DeviceProfile {
  std::string name;
  double dsp_total = 0;
  double lut_total = 0;
  double bram36_total = 0;
  double ff_total = 0;
  double frequency_mhz = 100.0;

  void validate() const;
  static DeviceProfile xc7z020();
  static DeviceProfile xc7z045();
  static DeviceProfile preset(const std::string& name);  // preset name or JSON path
};

// Per-PE resource costs and derates, calibrated against measured utilization
// and throughput tables (see scripts/fit_cost_model.py). LUT/BRAM/FF usage is
// affine in the PE counts: base + per_fixed * (pe4 + pe8) + per_spot * spot.
struct CostModel {
  double dsp_per_fixed4_pe = 1.0;
  double dsp_per_fixed8_pe = 4.0;
  double macs_per_pe_per_cycle = 1.0;

  double lut_base = 0, lut_per_fixed_pe = 0, lut_per_spot_pe = 0;
  double bram_base = 0, bram_per_fixed_pe = 0, bram_per_spot_pe = 0;
  double ff_base = 0, ff_per_fixed_pe = 0, ff_per_spot_pe = 0;

  // Fraction of ideal PE throughput actually achieved.
  double efficiency = 1.0;
  // Cycles per MAC (relative to a fixed4 PE) for unquantized float layers.
  double float_cost_factor = 14.0;

  static CostModel defaults();
  static CostModel load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
};

struct ResourceUsage {
  double dsp = 0, lut = 0, bram36 = 0, ff = 0;
};

// PE array sizing (continuous units; 1 PE = macs_per_pe_per_cycle MACs/cycle).
struct PEPlan {
  double pe_spot = 0;
  double pe_fixed4 = 0;
  double pe_fixed8 = 0;
  ResourceUsage usage;
};

// Sizes the cores for a device and workload ratio: all DSPs are consumed
// whenever any fixed workload exists, split between the fixed4/fixed8 cores
// in proportion to their shares; the SPoT core grows to the balanced-finish
// point or until the LUT budget is exhausted, whichever is smaller.
PEPlan plan_cores(const DeviceProfile& device, const SchemeRatio& ratio, const CostModel& cost);

ResourceUsage plan_usage(const PEPlan& plan, const CostModel& cost);

struct UtilizationReport {
  double dsp_pct = 0, lut_pct = 0, bram_pct = 0, ff_pct = 0;
};

UtilizationReport utilization_report(const PEPlan& plan, const DeviceProfile& device);

// One layer's workload: MAC count and how its rows split across the paths.
// float_frac models an unquantized layer executed on the fixed4 core at
// float_cost_factor cycles per MAC.
struct LayerLoad {
  std::string name;
  double macs = 0;
  double spot_frac = 0, fixed4_frac = 0, fixed8_frac = 0, float_frac = 0;
};

enum class FirstLastPolicy {
  auto_policy,   // quantize_all when eight_frac > 0, else eight_bit
  quantize_all,  // every layer split by the ratio
  eight_bit,     // first/last run as 8-bit workload on the DSP cores
  unquantized,   // first/last run as float workload on the DSP cores
};

// Expands a per-layer MAC profile into loads under a ratio and policy.
std::vector<LayerLoad> loads_from_profile(const std::vector<LayerLoad>& macs_profile,
                                          const SchemeRatio& ratio, FirstLastPolicy policy);

// Actual per-layer loads of a quantized model (row fractions from its maps).
std::vector<LayerLoad> loads_from_model(const Model& model);

struct LayerPerf {
  std::string name;
  double macs = 0;
  double time_ms = 0;
  std::string bottleneck;
};

struct PerfReport {
  double gops = 0;
  double latency_ms = 0;
  double total_macs = 0;
  std::vector<LayerPerf> per_layer;
};

// Balanced-finish timing: per layer each core processes its share, layer
// time is the max over cores, latency sums layers, GOPS counts 2 ops per MAC.
PerfReport estimate_perf(const std::vector<LayerLoad>& loads, const PEPlan& plan,
                         const DeviceProfile& device, const CostModel& cost);

// Conv/fc MAC profile shaped like an 18-layer residual classifier at 224x224
// (first and last entries flagged by name "first"/"last").
std::vector<LayerLoad> resnet18_like_profile();

bool profile_entry_is_first_or_last(const LayerLoad& l);

}  // namespace msp
