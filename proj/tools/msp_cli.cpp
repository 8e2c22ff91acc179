// msp: quantize, train, run, and size desk-scale networks with mixed
// SPoT / fixed-point row schemes.

#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"

#include "msp/dataset.hpp"
#include "msp/estimator.hpp"
#include "msp/qmodel.hpp"
#include "msp/shift.hpp"
#include "msp/train.hpp"

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;
using namespace msp;

namespace {

void check_keys(const ordered_json& obj, std::initializer_list<const char*> allowed,
                const std::string& where) {
  for (const auto& [key, value] : obj.items()) {
    bool ok = false;
    for (const char* a : allowed)
      if (key == a) ok = true;
    require(ok, Errc::validation, "unknown key '" + key + "' in " + where);
  }
}

SchemeRatio ratio_for_scheme(const std::string& scheme, const std::string& ratio_flag) {
  if (!ratio_flag.empty()) return SchemeRatio::parse_percent(ratio_flag);
  if (scheme == "msp") return SchemeRatio::msp();
  if (scheme == "ms") return {0.65, 0.35, 0.0};
  if (scheme == "spot") return {1.0, 0.0, 0.0};
  if (scheme == "fixed") return {0.0, 1.0, 0.0};
  fail(Errc::validation, "unknown scheme '" + scheme + "'");
}

AlphaPolicy::Mode alpha_mode_from(const std::string& s) {
  if (s == "max_abs") return AlphaPolicy::Mode::max_abs;
  if (s == "least_squares" || s == "lsq") return AlphaPolicy::Mode::least_squares;
  fail(Errc::validation, "unknown alpha mode '" + s + "'");
}

void write_json_file(const fs::path& path, const ordered_json& j) {
  std::ofstream out(path, std::ios::trunc);
  require(out.good(), Errc::io, "cannot write " + path.string());
  out << j.dump(2) << '\n';
}

// ---------------------------------------------------------------------------

int cmd_make_model(const std::string& arch, std::uint64_t seed, const std::string& out) {
  NetworkIR net = build_network(arch, seed);
  Model model;
  model.input_dims = parse_input_shape(arch);
  Shape shape = model.input_dims;
  for (const Layer& l : net.layers) shape = layer_output_shape(l, shape);
  require(shape.size() == 1, Errc::validation, "model must end in a flat output");
  model.num_classes = shape[0];
  model.net = std::move(net);
  save_model(out, model);
  std::cout << "wrote float model to " << out << "\n";
  return 0;
}

int cmd_quantize(const std::string& in, const std::string& out, const std::string& scheme,
                 int bits, int m1, int m2, const std::string& ratio_flag,
                 const std::string& alpha, const std::string& calibrate_spec) {
  Model float_model = load_model(in);
  require(!float_model.quant.has_value(), Errc::validation,
          "input model is already quantized");
  QuantConfig cfg;
  cfg.weight_bits = bits;
  cfg.m1 = m1;
  cfg.m2 = m2;
  cfg.ratio = ratio_for_scheme(scheme, ratio_flag);
  cfg.alpha.mode = alpha_mode_from(alpha);
  QuantScheme::spot(bits, m1, m2).validate();

  Model qm = quantize_model(float_model, cfg);
  if (!calibrate_spec.empty()) {
    Dataset data = load_dataset_spec(calibrate_spec);
    calibrate_activations(qm, data);
  }
  save_model(out, qm);

  ordered_json summary;
  summary["scheme"] = scheme;
  summary["ratio"] = cfg.ratio.to_string();
  summary["weight_bits"] = bits;
  ordered_json layers = ordered_json::array();
  for (const auto& [idx, qlayer] : qm.quant->layers) {
    WeightMatrix before = reshape_to_gemm(float_model.net.layers[idx]);
    WeightMatrix after = reshape_to_gemm(qm.net.layers[idx]);
    auto err = group_mean_abs_error(before, after, qlayer.map);
    ordered_json e;
    e["layer"] = idx;
    e["rows"] = qlayer.map.rows.size();
    e["spot"] = qlayer.map.count(RowScheme::Spot4);
    e["fixed4"] = qlayer.map.count(RowScheme::Fixed4);
    e["fixed8"] = qlayer.map.count(RowScheme::Fixed8);
    e["theta"] = qlayer.map.theta;
    e["mean_abs_err_spot"] = err[0];
    e["mean_abs_err_fixed4"] = err[1];
    e["mean_abs_err_fixed8"] = err[2];
    layers.push_back(std::move(e));
  }
  summary["layers"] = std::move(layers);
  write_json_file(fs::path(out) / "quantize_summary.json", summary);
  std::cout << summary.dump(2) << "\n";
  return 0;
}

TrainConfig train_config_from_json(const ordered_json& cfg) {
  TrainConfig tc;
  const std::string scheme = cfg.value("scheme", "msp");
  tc.quantize = scheme != "float";
  if (tc.quantize)
    tc.qconfig.ratio = ratio_for_scheme(scheme, cfg.value("ratio", ""));
  tc.qconfig.weight_bits = cfg.value("bits", 4);
  tc.qconfig.m1 = cfg.value("m1", 2);
  tc.qconfig.m2 = cfg.value("m2", 1);
  if (tc.quantize)
    QuantScheme::spot(tc.qconfig.weight_bits, tc.qconfig.m1, tc.qconfig.m2).validate();
  tc.seed = cfg.value("seed", 7ull);

  if (cfg.contains("training")) {
    const auto& t = cfg.at("training");
    check_keys(t, {"epochs", "pretrain_epochs", "batch", "lr", "schedule", "step_size", "gamma",
                   "l2", "rho", "rho_growth", "admm_period", "act_bits", "alpha"},
               "training");
    tc.epochs = t.value("epochs", tc.epochs);
    tc.pretrain_epochs = t.value("pretrain_epochs", tc.pretrain_epochs);
    tc.batch = t.value("batch", tc.batch);
    tc.lr = t.value("lr", tc.lr);
    const std::string sched = t.value("schedule", "cosine");
    require(sched == "cosine" || sched == "step", Errc::validation,
            "schedule must be 'step' or 'cosine'");
    tc.schedule =
        sched == "step" ? TrainConfig::Schedule::step : TrainConfig::Schedule::cosine;
    tc.step_size = t.value("step_size", tc.step_size);
    tc.gamma = t.value("gamma", tc.gamma);
    tc.l2 = t.value("l2", tc.l2);
    tc.rho = t.value("rho", tc.rho);
    tc.rho_growth = t.value("rho_growth", tc.rho_growth);
    tc.admm_period = t.value("admm_period", tc.admm_period);
    tc.qconfig.act_bits = t.value("act_bits", tc.qconfig.act_bits);
    tc.qconfig.alpha.mode = alpha_mode_from(t.value("alpha", "least_squares"));
  }
  tc.validate();
  return tc;
}

int cmd_train(const std::string& config_path) {
  std::ifstream in(config_path);
  require(in.good(), Errc::io, "cannot open config: " + config_path);
  ordered_json cfg;
  try {
    in >> cfg;
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::validation, "config parse error: " + std::string(e.what()));
  }
  check_keys(cfg, {"scheme", "ratio", "bits", "m1", "m2", "training", "device", "seed", "paths",
                   "arch"},
             "config");
  require(cfg.contains("paths"), Errc::validation, "config needs a 'paths' section");
  const auto& paths = cfg.at("paths");
  check_keys(paths, {"out", "data", "test_data", "test_count", "model_in"}, "paths");
  require(paths.contains("out") && paths.contains("data"), Errc::validation,
          "paths needs 'out' and 'data'");

  Dataset all = load_dataset_spec(paths.at("data").get<std::string>());
  Dataset train_data = all, test_data;
  if (paths.contains("test_data")) {
    test_data = load_dataset_spec(paths.at("test_data").get<std::string>());
  } else {
    const std::size_t test_count = paths.value("test_count", all.size() / 3);
    require(test_count > 0 && test_count < all.size(), Errc::validation,
            "test_count must split the dataset");
    train_data = all.head(all.size() - test_count);
    test_data = all.tail_from(all.size() - test_count);
  }

  NetworkIR net;
  Shape input_dims;
  std::size_t num_classes = train_data.num_classes;
  if (paths.contains("model_in")) {
    Model m = load_model(paths.at("model_in").get<std::string>());
    require(!m.quant.has_value(), Errc::validation, "model_in must be a float model");
    net = std::move(m.net);
    input_dims = m.input_dims;
    num_classes = m.num_classes;
  } else {
    require(cfg.contains("arch"), Errc::validation, "config needs 'arch' or paths.model_in");
    const std::string arch = cfg.at("arch").get<std::string>();
    net = build_network(arch, cfg.value("seed", 7ull));
    input_dims = parse_input_shape(arch);
  }

  TrainConfig tc = train_config_from_json(cfg);
  TrainResult result = train(net, input_dims, num_classes, train_data, test_data, tc);

  const fs::path out_dir = paths.at("out").get<std::string>();
  fs::create_directories(out_dir);
  save_model(out_dir / "model", result.model);
  write_training_log_csv(out_dir / "log.csv", result.log);

  ordered_json metrics;
  metrics["scheme"] = cfg.value("scheme", "msp");
  metrics["quantized"] = tc.quantize;
  if (tc.quantize) metrics["ratio"] = tc.qconfig.ratio.to_string();
  metrics["weight_bits"] = tc.qconfig.weight_bits;
  metrics["act_bits"] = tc.qconfig.act_bits;
  metrics["seed"] = tc.seed;
  metrics["epochs"] = tc.epochs;
  metrics["float_baseline_test_acc"] = result.float_baseline_test_acc;
  metrics["final_test_acc"] = result.final_test_acc;
  metrics["final_feasibility_gap"] = result.final_feasibility_gap;
  write_json_file(out_dir / "metrics.json", metrics);
  std::cout << metrics.dump(2) << "\n";
  return 0;
}

int cmd_infer(const std::string& model_path, const std::string& dataset_spec,
              const std::string& engine, const std::string& out_path) {
  Model model = load_model(model_path);
  Dataset data = load_dataset_spec(dataset_spec);
  ordered_json report;
  if (engine == "both") {
    EngineComparison cmp = compare_engines(model, data);
    std::printf("accuracy: %.4f (%zu/%zu)\n", cmp.shift.accuracy,
                static_cast<std::size_t>(cmp.shift.accuracy * data.size() + 0.5), data.size());
    std::printf("engines agree: %s\n", cmp.predictions_match ? "true" : "false");
    std::printf("max relative logit difference: %.3g\n", cmp.max_rel_diff);
    report["accuracy"] = cmp.shift.accuracy;
    report["engines_agree"] = cmp.predictions_match;
    report["max_rel_diff"] = cmp.max_rel_diff;
    if (!cmp.predictions_match) {
      if (!out_path.empty()) write_json_file(out_path, report);
      return 3;
    }
  } else {
    require(engine == "shift" || engine == "float_ref", Errc::validation,
            "engine must be shift, float_ref, or both");
    InferResult r = infer(model, data, engine == "shift" ? Engine::shift : Engine::float_ref);
    std::printf("accuracy: %.4f (%zu/%zu)\n", r.accuracy,
                static_cast<std::size_t>(r.accuracy * data.size() + 0.5), data.size());
    report["accuracy"] = r.accuracy;
    report["engine"] = engine;
  }
  if (!out_path.empty()) write_json_file(out_path, report);
  return 0;
}

FirstLastPolicy policy_from(const std::string& s) {
  if (s == "auto") return FirstLastPolicy::auto_policy;
  if (s == "quantized") return FirstLastPolicy::quantize_all;
  if (s == "eight_bit") return FirstLastPolicy::eight_bit;
  if (s == "float") return FirstLastPolicy::unquantized;
  fail(Errc::validation, "unknown first-last policy '" + s + "'");
}

SchemeRatio parse_ratio_lenient(const std::string& text) {
  try {
    return SchemeRatio::parse_percent(text);
  } catch (const Error&) {
    return SchemeRatio::parse_proportions(text);
  }
}

int cmd_estimate(const std::string& model_path, const std::string& device_name,
                 const std::string& ratio_flag, const std::string& calibration,
                 const std::string& first_last, const std::string& out_path) {
  DeviceProfile device = DeviceProfile::preset(device_name);
  CostModel cost = calibration.empty() ? CostModel::defaults() : CostModel::load(calibration);

  SchemeRatio ratio = SchemeRatio::msp();
  std::vector<LayerLoad> loads;
  if (!model_path.empty()) {
    Model model = load_model(model_path);
    require(model.quant.has_value(), Errc::validation, "estimate needs a quantized model");
    ratio = ratio_flag.empty() ? model.quant->config.ratio : parse_ratio_lenient(ratio_flag);
    loads = loads_from_model(model);
  } else {
    if (!ratio_flag.empty()) ratio = parse_ratio_lenient(ratio_flag);
    loads = loads_from_profile(resnet18_like_profile(), ratio, policy_from(first_last));
  }

  PEPlan plan = plan_cores(device, ratio, cost);
  PerfReport perf = estimate_perf(loads, plan, device, cost);
  UtilizationReport util = utilization_report(plan, device);

  ordered_json j;
  j["device"] = {{"name", device.name},
                 {"dsp_total", device.dsp_total},
                 {"lut_total", device.lut_total},
                 {"bram36_total", device.bram36_total},
                 {"ff_total", device.ff_total},
                 {"frequency_mhz", device.frequency_mhz}};
  j["ratio"] = ordered_json::array({ratio.spot_frac, ratio.fixed_frac, ratio.eight_frac});
  j["plan"] = {{"pe_spot", plan.pe_spot},
               {"pe_fixed4", plan.pe_fixed4},
               {"pe_fixed8", plan.pe_fixed8}};
  j["utilization"] = {{"dsp_util", util.dsp_pct / 100.0},
                      {"lut_util", util.lut_pct / 100.0},
                      {"bram_util", util.bram_pct / 100.0},
                      {"ff_util", util.ff_pct / 100.0},
                      {"dsp", plan.usage.dsp},
                      {"lut", plan.usage.lut},
                      {"bram36", plan.usage.bram36},
                      {"ff", plan.usage.ff}};
  j["gops"] = perf.gops;
  j["latency_ms"] = perf.latency_ms;
  ordered_json per_layer = ordered_json::array();
  for (const LayerPerf& lp : perf.per_layer)
    per_layer.push_back(ordered_json{{"name", lp.name},
                                     {"macs", lp.macs},
                                     {"time_ms", lp.time_ms},
                                     {"bottleneck", lp.bottleneck}});
  j["per_layer"] = std::move(per_layer);

  std::cout << j.dump(2) << "\n";
  if (!out_path.empty()) write_json_file(out_path, j);
  return 0;
}

int cmd_report(const std::string& runs_dir, const std::string& out_dir_flag) {
  require(fs::is_directory(runs_dir), Errc::io, "not a directory: " + runs_dir);
  const fs::path out_dir = out_dir_flag.empty() ? fs::path(runs_dir) : fs::path(out_dir_flag);
  fs::create_directories(out_dir);

  std::vector<std::pair<std::string, ordered_json>> metrics, estimates;
  std::vector<fs::path> paths;
  for (const auto& entry : fs::recursive_directory_iterator(runs_dir))
    if (entry.is_regular_file() && entry.path().extension() == ".json")
      paths.push_back(entry.path());
  std::sort(paths.begin(), paths.end());
  for (const fs::path& p : paths) {
    std::ifstream in(p);
    ordered_json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception&) {
      continue;
    }
    const std::string run = p.parent_path().filename().string();
    if (j.contains("final_test_acc"))
      metrics.emplace_back(run, std::move(j));
    else if (j.contains("gops") && j.contains("plan"))
      estimates.emplace_back(run, std::move(j));
  }

  if (metrics.empty() && estimates.empty()) {
    std::cout << "warning: no run artifacts found under " << runs_dir << "; tables are empty\n";
  }

  char buf[512];
  {
    std::ofstream csv(out_dir / "accuracy_table.csv", std::ios::trunc);
    std::ofstream md(out_dir / "accuracy_table.md", std::ios::trunc);
    csv << "run,scheme,ratio,weight_bits,act_bits,float_acc,quant_acc,gap\n";
    md << "| run | scheme | ratio | bits | float acc | quant acc |\n"
       << "|---|---|---|---|---|---|\n";
    for (const auto& [run, j] : metrics) {
      const std::string ratio = j.value("ratio", "-");
      std::snprintf(buf, sizeof buf, "%s,%s,%s,%d,%d,%.6f,%.6f,%.3g\n", run.c_str(),
                    j.value("scheme", "?").c_str(), ratio.c_str(), j.value("weight_bits", 0),
                    j.value("act_bits", 0), j.value("float_baseline_test_acc", 0.0),
                    j.value("final_test_acc", 0.0), j.value("final_feasibility_gap", 0.0));
      csv << buf;
      std::snprintf(buf, sizeof buf, "| %s | %s | %s | %d/%d | %.4f | %.4f |\n", run.c_str(),
                    j.value("scheme", "?").c_str(), ratio.c_str(), j.value("weight_bits", 0),
                    j.value("act_bits", 0), j.value("float_baseline_test_acc", 0.0),
                    j.value("final_test_acc", 0.0));
      md << buf;
    }
  }
  {
    std::ofstream csv(out_dir / "performance_table.csv", std::ios::trunc);
    std::ofstream md(out_dir / "performance_table.md", std::ios::trunc);
    csv << "run,device,ratio,lut,lut_pct,dsp,dsp_pct,bram36,bram_pct,ff,ff_pct,gops,latency_ms\n";
    md << "| run | device | ratio | LUT | DSP | BRAM36 | FF | GOPS | latency (ms) |\n"
       << "|---|---|---|---|---|---|---|---|---|\n";
    for (const auto& [run, j] : estimates) {
      const auto& u = j.at("utilization");
      const auto& r = j.at("ratio");
      std::snprintf(buf, sizeof buf, "%g:%g:%g", r[0].get<double>() * 100,
                    r[1].get<double>() * 100, r[2].get<double>() * 100);
      std::string ratio = buf;
      std::snprintf(buf, sizeof buf, "%s,%s,%s,%.0f,%.1f,%.0f,%.1f,%.1f,%.1f,%.0f,%.1f,%.1f,%.3f\n",
                    run.c_str(), j.at("device").at("name").get<std::string>().c_str(),
                    ratio.c_str(), u.at("lut").get<double>(),
                    u.at("lut_util").get<double>() * 100, u.at("dsp").get<double>(),
                    u.at("dsp_util").get<double>() * 100, u.at("bram36").get<double>(),
                    u.at("bram_util").get<double>() * 100, u.at("ff").get<double>(),
                    u.at("ff_util").get<double>() * 100, j.at("gops").get<double>(),
                    j.at("latency_ms").get<double>());
      csv << buf;
      std::snprintf(buf, sizeof buf,
                    "| %s | %s | %s | %.0f (%.0f%%) | %.0f (%.0f%%) | %.0f (%.0f%%) | %.0f "
                    "(%.0f%%) | %.1f | %.2f |\n",
                    run.c_str(), j.at("device").at("name").get<std::string>().c_str(),
                    ratio.c_str(), u.at("lut").get<double>(),
                    u.at("lut_util").get<double>() * 100, u.at("dsp").get<double>(),
                    u.at("dsp_util").get<double>() * 100, u.at("bram36").get<double>(),
                    u.at("bram_util").get<double>() * 100, u.at("ff").get<double>(),
                    u.at("ff_util").get<double>() * 100, j.at("gops").get<double>(),
                    j.at("latency_ms").get<double>());
      md << buf;
    }
  }
  std::cout << "wrote accuracy_table.{csv,md} and performance_table.{csv,md} to "
            << out_dir.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mixed-scheme quantization toolkit"};
  app.require_subcommand(1);

  // make-model
  auto* mk = app.add_subcommand("make-model", "create a randomly initialized float model");
  std::string mk_arch, mk_out;
  std::uint64_t mk_seed = 7;
  mk->add_option("--arch", mk_arch, "arch string, e.g. 2,d16,relu,d16,relu,d2")->required();
  mk->add_option("--seed", mk_seed, "init seed");
  mk->add_option("out", mk_out, "output model directory")->required();

  // quantize
  auto* qz = app.add_subcommand("quantize", "post-training quantization of a float model");
  std::string qz_in, qz_out, qz_scheme = "msp", qz_ratio, qz_alpha = "least_squares",
              qz_calib;
  int qz_bits = 4, qz_m1 = 2, qz_m2 = 1;
  qz->add_option("model_in", qz_in)->required();
  qz->add_option("model_out", qz_out)->required();
  qz->add_option("--scheme", qz_scheme, "msp|ms|spot|fixed");
  qz->add_option("--bits", qz_bits, "weight bits for the s/f groups");
  qz->add_option("--m1", qz_m1);
  qz->add_option("--m2", qz_m2);
  qz->add_option("--ratio", qz_ratio, "integer percent triple, e.g. 65:30:5");
  qz->add_option("--alpha", qz_alpha, "max_abs|least_squares");
  qz->add_option("--calibrate", qz_calib, "dataset spec for activation calibration");

  // train
  auto* tr = app.add_subcommand("train", "quantization-aware training from a JSON config");
  std::string tr_config;
  tr->add_option("--config", tr_config)->required();

  // infer
  auto* inf = app.add_subcommand("infer", "run a quantized model on a dataset");
  std::string inf_model, inf_dataset, inf_engine = "both", inf_out;
  inf->add_option("model", inf_model)->required();
  inf->add_option("--dataset", inf_dataset, "idx:DIR | moons:N:SEED | gaussians:N:SEED")
      ->required();
  inf->add_option("--engine", inf_engine, "shift|float_ref|both");
  inf->add_option("-o,--out", inf_out, "write a JSON result file");

  // estimate
  auto* es = app.add_subcommand("estimate", "FPGA resource/throughput/latency model");
  std::string es_model, es_device = "xc7z045", es_ratio, es_calib, es_first_last = "auto",
              es_out;
  es->add_option("--model", es_model, "quantized model directory (row fractions from its maps)");
  es->add_option("--device", es_device, "xc7z020|xc7z045|profile.json");
  es->add_option("--ratio", es_ratio, "percent triple (65:30:5) or proportions (2:1:0)");
  es->add_option("--calibration", es_calib, "cost model JSON (default: shipped calibration)");
  es->add_option("--first-last", es_first_last, "auto|quantized|eight_bit|float");
  es->add_option("-o,--out", es_out, "write the JSON report to a file");

  // report
  auto* rp = app.add_subcommand("report", "aggregate run artifacts into tables");
  std::string rp_dir, rp_out;
  rp->add_option("runs", rp_dir)->required();
  rp->add_option("-o,--out", rp_out, "output directory (default: runs dir)");

  try {
    app.parse(argc, argv);
    if (mk->parsed()) return cmd_make_model(mk_arch, mk_seed, mk_out);
    if (qz->parsed())
      return cmd_quantize(qz_in, qz_out, qz_scheme, qz_bits, qz_m1, qz_m2, qz_ratio, qz_alpha,
                          qz_calib);
    if (tr->parsed()) return cmd_train(tr_config);
    if (inf->parsed()) return cmd_infer(inf_model, inf_dataset, inf_engine, inf_out);
    if (es->parsed())
      return cmd_estimate(es_model, es_device, es_ratio, es_calib, es_first_last, es_out);
    if (rp->parsed()) return cmd_report(rp_dir, rp_out);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
