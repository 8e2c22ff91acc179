#include "msp/estimator.hpp"

#include <cmath>
#include <fstream>

#include "json.hpp"

namespace msp {

void DeviceProfile::validate() const {
  require(dsp_total >= 0 && lut_total >= 0 && bram36_total >= 0 && ff_total >= 0,
          Errc::validation, "device resource totals must be non-negative");
  require(frequency_mhz > 0, Errc::validation, "device frequency must be positive");
}

DeviceProfile DeviceProfile::xc7z020() {
  return {"xc7z020", 220, 53200, 70, 106400, 100.0};
}

DeviceProfile DeviceProfile::xc7z045() {
  return {"xc7z045", 900, 218600, 545, 437200, 100.0};
}

DeviceProfile DeviceProfile::preset(const std::string& name) {
  if (name == "xc7z020") return xc7z020();
  if (name == "xc7z045") return xc7z045();
  std::ifstream in(name);
  require(in.good(), Errc::io, "unknown device preset and no such file: " + name);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::bad_format, "device JSON parse error: " + std::string(e.what()));
  }
  DeviceProfile d;
  d.name = j.value("name", name);
  d.dsp_total = j.at("dsp_total").get<double>();
  d.lut_total = j.at("lut_total").get<double>();
  d.bram36_total = j.value("bram36_total", 0.0);
  d.ff_total = j.value("ff_total", 0.0);
  d.frequency_mhz = j.value("frequency_mhz", 100.0);
  d.validate();
  return d;
}

CostModel CostModel::defaults() {
  // Constants produced by scripts/fit_cost_model.py; keep in sync with
  // calibration/xc7z-default.json.
  CostModel c;
  c.dsp_per_fixed4_pe = 1.0;
  c.dsp_per_fixed8_pe = 4.0;
  c.macs_per_pe_per_cycle = 1.0;
  c.lut_base = 521.2906;
  c.lut_per_fixed_pe = 46.1538;
  c.lut_per_spot_pe = 57.0448;
  c.bram_base = 2.823555;
  c.bram_per_fixed_pe = 0.174623;
  c.bram_per_spot_pe = 0.036869;
  c.ff_base = 0.0;
  c.ff_per_fixed_pe = 32.8192;
  c.ff_per_spot_pe = 44.0;
  c.efficiency = 0.836177;
  c.float_cost_factor = 14.1616;
  return c;
}

CostModel CostModel::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), Errc::io, "cannot open calibration: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::bad_format, "calibration JSON parse error: " + std::string(e.what()));
  }
  CostModel c;
  c.dsp_per_fixed4_pe = j.at("dsp_per_fixed4_pe").get<double>();
  c.dsp_per_fixed8_pe = j.at("dsp_per_fixed8_pe").get<double>();
  c.macs_per_pe_per_cycle = j.at("macs_per_pe_per_cycle").get<double>();
  c.lut_base = j.at("lut_base").get<double>();
  c.lut_per_fixed_pe = j.at("lut_per_fixed_pe").get<double>();
  c.lut_per_spot_pe = j.at("lut_per_spot_pe").get<double>();
  c.bram_base = j.at("bram_base").get<double>();
  c.bram_per_fixed_pe = j.at("bram_per_fixed_pe").get<double>();
  c.bram_per_spot_pe = j.at("bram_per_spot_pe").get<double>();
  c.ff_base = j.at("ff_base").get<double>();
  c.ff_per_fixed_pe = j.at("ff_per_fixed_pe").get<double>();
  c.ff_per_spot_pe = j.at("ff_per_spot_pe").get<double>();
  c.efficiency = j.at("efficiency").get<double>();
  c.float_cost_factor = j.at("float_cost_factor").get<double>();
  require(c.dsp_per_fixed4_pe > 0 && c.dsp_per_fixed8_pe > 0 && c.macs_per_pe_per_cycle > 0 &&
              c.lut_per_spot_pe > 0 && c.efficiency > 0 && c.float_cost_factor > 0,
          Errc::validation, "calibration constants must be positive");
  return c;
}

void CostModel::save(const std::filesystem::path& path) const {
  nlohmann::ordered_json j;
  j["dsp_per_fixed4_pe"] = dsp_per_fixed4_pe;
  j["dsp_per_fixed8_pe"] = dsp_per_fixed8_pe;
  j["macs_per_pe_per_cycle"] = macs_per_pe_per_cycle;
  j["lut_base"] = lut_base;
  j["lut_per_fixed_pe"] = lut_per_fixed_pe;
  j["lut_per_spot_pe"] = lut_per_spot_pe;
  j["bram_base"] = bram_base;
  j["bram_per_fixed_pe"] = bram_per_fixed_pe;
  j["bram_per_spot_pe"] = bram_per_spot_pe;
  j["ff_base"] = ff_base;
  j["ff_per_fixed_pe"] = ff_per_fixed_pe;
  j["ff_per_spot_pe"] = ff_per_spot_pe;
  j["efficiency"] = efficiency;
  j["float_cost_factor"] = float_cost_factor;
  std::ofstream out(path, std::ios::trunc);
  require(out.good(), Errc::io, "cannot write calibration: " + path.string());
  out << j.dump(2) << '\n';
}

ResourceUsage plan_usage(const PEPlan& plan, const CostModel& cost) {
  ResourceUsage u;
  const double fixed = plan.pe_fixed4 + plan.pe_fixed8;
  if (fixed == 0 && plan.pe_spot == 0) return u;  // empty plan uses nothing
  u.dsp = cost.dsp_per_fixed4_pe * plan.pe_fixed4 + cost.dsp_per_fixed8_pe * plan.pe_fixed8;
  u.lut = cost.lut_base + cost.lut_per_fixed_pe * fixed + cost.lut_per_spot_pe * plan.pe_spot;
  u.bram36 =
      cost.bram_base + cost.bram_per_fixed_pe * fixed + cost.bram_per_spot_pe * plan.pe_spot;
  u.ff = cost.ff_base + cost.ff_per_fixed_pe * fixed + cost.ff_per_spot_pe * plan.pe_spot;
  return u;
}

PEPlan plan_cores(const DeviceProfile& device, const SchemeRatio& ratio, const CostModel& cost) {
  device.validate();
  ratio.validate();
  PEPlan plan;
  const double s = ratio.spot_frac, f = ratio.fixed_frac, e = ratio.eight_frac;
  if (f + e > 0) {
    require(device.dsp_total > 0, Errc::infeasible,
            "ratio needs fixed-point PEs but the device has no DSPs");
    // All DSPs consumed; fixed4:fixed8 PE counts proportional to workload.
    const double denom = cost.dsp_per_fixed4_pe * f + cost.dsp_per_fixed8_pe * e;
    const double scale = device.dsp_total / denom;
    plan.pe_fixed4 = f * scale;
    plan.pe_fixed8 = e * scale;
  }
  if (s > 0) {
    require(device.lut_total > 0, Errc::infeasible,
            "ratio needs a SPoT core but the device has no LUTs");
    const double fixed = plan.pe_fixed4 + plan.pe_fixed8;
    const double lut_avail =
        device.lut_total - cost.lut_base - cost.lut_per_fixed_pe * fixed;
    require(lut_avail > 0, Errc::infeasible, "no LUT budget left for the SPoT core");
    const double cap = lut_avail / cost.lut_per_spot_pe;
    double balance = cap;
    if (f > 0)
      balance = s * plan.pe_fixed4 / f;
    else if (e > 0)
      balance = s * plan.pe_fixed8 / e;
    plan.pe_spot = std::min(balance, cap);
  }
  plan.usage = plan_usage(plan, cost);
  require(plan.usage.dsp <= device.dsp_total + 1e-9 &&
              plan.usage.lut <= device.lut_total + 1e-9 &&
              plan.usage.bram36 <= device.bram36_total + 1e-9 &&
              plan.usage.ff <= device.ff_total + 1e-9,
          Errc::infeasible, "plan exceeds device resources");
  return plan;
}

UtilizationReport utilization_report(const PEPlan& plan, const DeviceProfile& device) {
  UtilizationReport r;
  auto pct = [](double used, double total) { return total > 0 ? 100.0 * used / total : 0.0; };
  r.dsp_pct = pct(plan.usage.dsp, device.dsp_total);
  r.lut_pct = pct(plan.usage.lut, device.lut_total);
  r.bram_pct = pct(plan.usage.bram36, device.bram36_total);
  r.ff_pct = pct(plan.usage.ff, device.ff_total);
  return r;
}

bool profile_entry_is_first_or_last(const LayerLoad& l) {
  return l.name == "first" || l.name == "last";
}

std::vector<LayerLoad> loads_from_profile(const std::vector<LayerLoad>& macs_profile,
                                          const SchemeRatio& ratio, FirstLastPolicy policy) {
  ratio.validate();
  if (policy == FirstLastPolicy::auto_policy)
    policy = ratio.eight_frac > 0 ? FirstLastPolicy::quantize_all : FirstLastPolicy::eight_bit;
  std::vector<LayerLoad> loads;
  loads.reserve(macs_profile.size());
  for (const LayerLoad& src : macs_profile) {
    LayerLoad l;
    l.name = src.name;
    l.macs = src.macs;
    if (policy != FirstLastPolicy::quantize_all && profile_entry_is_first_or_last(src)) {
      if (policy == FirstLastPolicy::eight_bit)
        l.fixed8_frac = 1.0;
      else
        l.float_frac = 1.0;
    } else {
      l.spot_frac = ratio.spot_frac;
      l.fixed4_frac = ratio.fixed_frac;
      l.fixed8_frac = ratio.eight_frac;
    }
    loads.push_back(std::move(l));
  }
  return loads;
}

std::vector<LayerLoad> loads_from_model(const Model& model) {
  require(model.quant.has_value(), Errc::validation, "load extraction needs a quantized model");
  OpCounts counts = count_ops(model.net, model.input_dims);
  std::vector<LayerLoad> loads;
  for (const auto& [idx, qlayer] : model.quant->layers) {
    LayerLoad l;
    l.name = layer_kind_name(model.net.layers[idx]) + std::to_string(idx);
    l.macs = static_cast<double>(counts.per_layer[idx]);
    const double rows = static_cast<double>(qlayer.map.rows.size());
    l.spot_frac = static_cast<double>(qlayer.map.count(RowScheme::Spot4)) / rows;
    l.fixed4_frac = static_cast<double>(qlayer.map.count(RowScheme::Fixed4)) / rows;
    l.fixed8_frac = static_cast<double>(qlayer.map.count(RowScheme::Fixed8)) / rows;
    loads.push_back(std::move(l));
  }
  return loads;
}

PerfReport estimate_perf(const std::vector<LayerLoad>& loads, const PEPlan& plan,
                         const DeviceProfile& device, const CostModel& cost) {
  device.validate();
  PerfReport report;
  const double cycle_rate =
      device.frequency_mhz * 1e6 * cost.macs_per_pe_per_cycle * cost.efficiency;
  const double fixed8_fold = cost.dsp_per_fixed8_pe / cost.dsp_per_fixed4_pe;
  for (const LayerLoad& l : loads) {
    double t_spot = 0, t_fixed4 = 0, t_fixed8 = 0;
    if (l.spot_frac > 0) {
      require(plan.pe_spot > 0, Errc::infeasible, "SPoT workload with a zero-PE SPoT core");
      t_spot = l.spot_frac * l.macs / (plan.pe_spot * cycle_rate);
    }
    double fixed4_work = l.fixed4_frac;
    double fixed8_work = l.fixed8_frac;
    if (fixed8_work > 0 && plan.pe_fixed8 == 0) {
      // No 8-bit core: 8-bit MACs fold onto the fixed4 core at the DSP
      // cost ratio in cycles.
      fixed4_work += fixed8_fold * fixed8_work;
      fixed8_work = 0;
    }
    if (l.float_frac > 0) fixed4_work += cost.float_cost_factor * l.float_frac;
    if (fixed4_work > 0) {
      require(plan.pe_fixed4 > 0, Errc::infeasible,
              "fixed-point workload with a zero-PE fixed core");
      t_fixed4 = fixed4_work * l.macs / (plan.pe_fixed4 * cycle_rate);
    }
    if (fixed8_work > 0) {
      t_fixed8 = fixed8_work * l.macs / (plan.pe_fixed8 * cycle_rate);
    }
    LayerPerf lp;
    lp.name = l.name;
    lp.macs = l.macs;
    const double t = std::max({t_spot, t_fixed4, t_fixed8});
    lp.time_ms = t * 1e3;
    lp.bottleneck = t == t_spot && l.spot_frac > 0 ? "spot"
                    : t == t_fixed4 && fixed4_work > 0 ? "fixed4"
                                                       : "fixed8";
    report.per_layer.push_back(std::move(lp));
    report.latency_ms += t * 1e3;
    report.total_macs += l.macs;
  }
  require(report.latency_ms > 0, Errc::validation, "empty workload");
  report.gops = 2.0 * report.total_macs / (report.latency_ms * 1e-3) / 1e9;
  return report;
}

std::vector<LayerLoad> resnet18_like_profile() {
  std::vector<LayerLoad> p;
  auto add = [&p](const std::string& name, double macs) {
    LayerLoad l;
    l.name = name;
    l.macs = macs;
    p.push_back(std::move(l));
  };
  add("first", 112.0 * 112 * 64 * 3 * 49);  // 7x7 stem conv, stride 2
  int block = 0;
  const struct {
    double hw, ch;
  } stages[4] = {{56, 64}, {28, 128}, {14, 256}, {7, 512}};
  for (const auto& st : stages) {
    const double hw2 = st.hw * st.hw;
    if (st.ch == 64) {
      for (int i = 0; i < 4; ++i)
        add("conv" + std::to_string(block++), hw2 * st.ch * st.ch * 9);
    } else {
      add("conv" + std::to_string(block++), hw2 * st.ch * (st.ch / 2) * 9);
      add("conv" + std::to_string(block++), hw2 * st.ch * st.ch * 9);
      add("conv" + std::to_string(block++), hw2 * st.ch * (st.ch / 2));  // 1x1 downsample
      add("conv" + std::to_string(block++), hw2 * st.ch * st.ch * 9);
      add("conv" + std::to_string(block++), hw2 * st.ch * st.ch * 9);
    }
  }
  add("last", 512.0 * 1000);
  return p;
}

}  // namespace msp
