#include "msp/qmodel.hpp"

#include <fstream>

#include "json.hpp"

namespace msp {

using ordered_json = nlohmann::ordered_json;

SchemeTables QuantConfig::tables() const {
  return {build_levels(QuantScheme::spot(weight_bits, m1, m2)),
          build_levels(QuantScheme::fixed(weight_bits)),
          build_levels(QuantScheme::fixed(8))};
}

std::vector<std::vector<std::uint32_t>> quantize_rows(WeightMatrix& w, SchemeMap& map,
                                                      const QuantConfig& config,
                                                      const SchemeTables& tables) {
  require(map.rows.size() == w.rows, Errc::shape_mismatch, "scheme map does not match matrix");
  std::vector<std::vector<std::uint32_t>> codes(w.rows);
  for (std::size_t r = 0; r < w.rows; ++r) {
    const LevelSet& levels = tables.for_row(map.rows[r]);
    auto row = w.row(r);
    const double alpha = fit_alpha(row, levels, config.alpha);
    map.alpha[r] = alpha;
    codes[r].resize(w.cols);
    for (std::size_t c = 0; c < w.cols; ++c) {
      QuantValue q = project_nearest(levels, alpha, row[c]);
      row[c] = q.value;
      codes[r][c] = q.code;
    }
  }
  return codes;
}

Model quantize_model(const Model& float_model, const QuantConfig& config) {
  config.ratio.validate();
  require(!float_model.net.quantizable_indices().empty(), Errc::validation,
          "model has no quantizable layers");
  Model out = float_model;
  QuantInfo info;
  info.config = config;
  info.finalized = true;
  if (float_model.quant) {  // keep calibrated activation clips if present
    info.input_amax = float_model.quant->input_amax;
    info.act_amax = float_model.quant->act_amax;
  }
  const SchemeTables tables = config.tables();
  for (std::size_t idx : out.net.quantizable_indices()) {
    WeightMatrix w = reshape_to_gemm(out.net.layers[idx]);
    RowStats stats = row_stats(w, tables.fixed_low);
    SchemeMap map = assign(w, config.ratio, stats);
    QuantLayer layer;
    layer.codes = quantize_rows(w, map, config, tables);
    layer.map = std::move(map);
    assign_from_gemm(out.net.layers[idx], w);
    info.layers.emplace(idx, std::move(layer));
  }
  out.quant = std::move(info);
  return out;
}

std::array<double, 3> group_mean_abs_error(const WeightMatrix& reference,
                                           const WeightMatrix& quantized, const SchemeMap& map) {
  std::array<double, 3> err{0.0, 0.0, 0.0};
  std::array<std::size_t, 3> count{0, 0, 0};
  for (std::size_t r = 0; r < reference.rows; ++r) {
    auto g = static_cast<std::size_t>(map.rows[r]);
    for (std::size_t c = 0; c < reference.cols; ++c)
      err[g] += std::fabs(reference.at(r, c) - quantized.at(r, c));
    count[g] += reference.cols;
  }
  for (std::size_t g = 0; g < 3; ++g)
    if (count[g] > 0) err[g] /= static_cast<double>(count[g]);
  return err;
}

namespace {

std::string layer_file_stem(std::size_t idx) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "l%03zu", idx);
  return buf;
}

ordered_json ratio_json(const SchemeRatio& r) {
  return ordered_json::array({r.spot_frac, r.fixed_frac, r.eight_frac});
}

SchemeRatio ratio_from_json(const ordered_json& j) {
  require(j.is_array() && j.size() == 3, Errc::bad_format, "ratio must be a 3-array");
  SchemeRatio r{j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
  r.validate();
  return r;
}

void check_keys(const ordered_json& obj, std::initializer_list<const char*> allowed,
                const std::string& where) {
  for (const auto& [key, value] : obj.items()) {
    bool ok = false;
    for (const char* a : allowed)
      if (key == a) ok = true;
    require(ok, Errc::bad_format, "unknown key '" + key + "' in " + where);
  }
}

}  // namespace

void save_model(const std::filesystem::path& dir, const Model& model) {
  std::filesystem::create_directories(dir);
  ordered_json manifest;
  manifest["format"] = "msp-model";
  manifest["version"] = 1;
  manifest["input_dims"] = model.input_dims;
  manifest["num_classes"] = model.num_classes;

  ordered_json layers = ordered_json::array();
  for (std::size_t i = 0; i < model.net.layers.size(); ++i) {
    const Layer& layer = model.net.layers[i];
    ordered_json entry;
    entry["kind"] = layer_kind_name(layer);
    const std::string stem = layer_file_stem(i);
    const bool quantized = model.quant && model.quant->layers.count(i) > 0;
    if (const auto* d = std::get_if<DenseLayer>(&layer)) {
      entry["in"] = d->in;
      entry["out"] = d->out;
      if (!quantized) {
        entry["weights"] = stem + "_w.mspt";
        save_tensor(dir / (stem + "_w.mspt"), d->weights);
      }
      entry["bias"] = stem + "_b.mspt";
      save_tensor(dir / (stem + "_b.mspt"), d->bias);
    } else if (const auto* c = std::get_if<Conv2dLayer>(&layer)) {
      entry["in_ch"] = c->in_ch;
      entry["out_ch"] = c->out_ch;
      entry["k"] = c->k;
      entry["stride"] = c->stride;
      entry["pad"] = c->pad;
      if (!quantized) {
        entry["weights"] = stem + "_w.mspt";
        save_tensor(dir / (stem + "_w.mspt"), c->weights);
      }
      entry["bias"] = stem + "_b.mspt";
      save_tensor(dir / (stem + "_b.mspt"), c->bias);
    }
    layers.push_back(std::move(entry));
  }
  manifest["layers"] = std::move(layers);

  if (model.quant) {
    const QuantInfo& q = *model.quant;
    ordered_json qj;
    qj["weight_bits"] = q.config.weight_bits;
    qj["m1"] = q.config.m1;
    qj["m2"] = q.config.m2;
    qj["act_bits"] = q.config.act_bits;
    qj["ratio"] = ratio_json(q.config.ratio);
    qj["alpha_mode"] =
        q.config.alpha.mode == AlphaPolicy::Mode::max_abs ? "max_abs" : "least_squares";
    qj["n_raw"] = 1.5;
    qj["finalized"] = q.finalized;
    qj["input_amax"] = q.input_amax;
    ordered_json acts = ordered_json::array();
    for (const auto& [idx, amax] : q.act_amax)
      acts.push_back(ordered_json{{"layer", idx}, {"amax", amax}});
    qj["act_amax"] = std::move(acts);

    ordered_json qlayers = ordered_json::array();
    for (const auto& [idx, layer] : q.layers) {
      ordered_json entry;
      entry["layer"] = idx;
      std::string tags(layer.map.rows.size(), 'f');
      for (std::size_t r = 0; r < layer.map.rows.size(); ++r)
        tags[r] = row_scheme_tag(layer.map.rows[r]);
      entry["rows"] = tags;
      entry["theta"] = layer.map.theta;
      entry["alpha"] = layer.map.alpha;
      const std::string codes_file = layer_file_stem(idx) + "_codes.bin";
      entry["codes"] = codes_file;
      std::vector<std::uint8_t> packed;
      for (std::size_t r = 0; r < layer.codes.size(); ++r)
        pack_row(packed, layer.codes[r], q.config.row_bits(layer.map.rows[r]));
      std::ofstream bin(dir / codes_file, std::ios::binary | std::ios::trunc);
      require(bin.good(), Errc::io, "cannot write " + codes_file);
      bin.write(reinterpret_cast<const char*>(packed.data()),
                static_cast<std::streamsize>(packed.size()));
      qlayers.push_back(std::move(entry));
    }
    qj["layers"] = std::move(qlayers);
    manifest["quantization"] = std::move(qj);
  } else {
    manifest["quantization"] = nullptr;
  }

  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  require(out.good(), Errc::io, "cannot write manifest.json in " + dir.string());
  out << manifest.dump(2) << '\n';
}

Model load_model(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  require(in.good(), Errc::io, "cannot open " + (dir / "manifest.json").string());
  ordered_json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::bad_format, "manifest.json parse error: " + std::string(e.what()));
  }
  check_keys(manifest, {"format", "version", "input_dims", "num_classes", "layers",
                        "quantization"},
             "manifest");
  require(manifest.value("format", "") == "msp-model", Errc::bad_format,
          "not a model manifest");

  Model model;
  model.input_dims = manifest.at("input_dims").get<Shape>();
  model.num_classes = manifest.at("num_classes").get<std::size_t>();

  for (const auto& entry : manifest.at("layers")) {
    const std::string kind = entry.at("kind").get<std::string>();
    if (kind == "dense") {
      DenseLayer d;
      d.in = entry.at("in").get<std::size_t>();
      d.out = entry.at("out").get<std::size_t>();
      if (entry.contains("weights"))
        d.weights = load_tensor(dir / entry.at("weights").get<std::string>());
      else
        d.weights = Tensor::zeros({d.out, d.in});
      d.bias = load_tensor(dir / entry.at("bias").get<std::string>());
      model.net.layers.emplace_back(std::move(d));
    } else if (kind == "conv2d") {
      Conv2dLayer c;
      c.in_ch = entry.at("in_ch").get<std::size_t>();
      c.out_ch = entry.at("out_ch").get<std::size_t>();
      c.k = entry.at("k").get<std::size_t>();
      c.stride = entry.at("stride").get<std::size_t>();
      c.pad = entry.at("pad").get<std::size_t>();
      if (entry.contains("weights"))
        c.weights = load_tensor(dir / entry.at("weights").get<std::string>());
      else
        c.weights = Tensor::zeros({c.out_ch, c.in_ch, c.k, c.k});
      c.bias = load_tensor(dir / entry.at("bias").get<std::string>());
      model.net.layers.emplace_back(std::move(c));
    } else if (kind == "relu") {
      model.net.layers.emplace_back(ReluLayer{});
    } else if (kind == "maxpool2x2") {
      model.net.layers.emplace_back(MaxPool2x2Layer{});
    } else if (kind == "flatten") {
      model.net.layers.emplace_back(FlattenLayer{});
    } else {
      fail(Errc::bad_format, "unknown layer kind '" + kind + "'");
    }
  }

  const auto& qj = manifest.at("quantization");
  if (!qj.is_null()) {
    check_keys(qj, {"weight_bits", "m1", "m2", "act_bits", "ratio", "alpha_mode", "n_raw",
                    "finalized", "input_amax", "act_amax", "layers"},
               "quantization");
    QuantInfo info;
    info.config.weight_bits = qj.at("weight_bits").get<int>();
    info.config.m1 = qj.at("m1").get<int>();
    info.config.m2 = qj.at("m2").get<int>();
    info.config.act_bits = qj.at("act_bits").get<int>();
    info.config.ratio = ratio_from_json(qj.at("ratio"));
    info.config.alpha.mode = qj.at("alpha_mode").get<std::string>() == "max_abs"
                                 ? AlphaPolicy::Mode::max_abs
                                 : AlphaPolicy::Mode::least_squares;
    info.finalized = qj.at("finalized").get<bool>();
    info.input_amax = qj.at("input_amax").get<double>();
    for (const auto& a : qj.at("act_amax"))
      info.act_amax[a.at("layer").get<std::size_t>()] = a.at("amax").get<double>();

    const SchemeTables tables = info.config.tables();
    for (const auto& entry : qj.at("layers")) {
      const std::size_t idx = entry.at("layer").get<std::size_t>();
      require(idx < model.net.layers.size() && layer_is_quantizable(model.net.layers[idx]),
              Errc::bad_format, "quantization entry for a non-quantizable layer");
      WeightMatrix w = reshape_to_gemm(model.net.layers[idx]);
      QuantLayer layer;
      const std::string tags = entry.at("rows").get<std::string>();
      require(tags.size() == w.rows, Errc::length_mismatch,
              "row tags do not match layer row count");
      layer.map.rows.resize(w.rows);
      for (std::size_t r = 0; r < w.rows; ++r)
        layer.map.rows[r] = row_scheme_from_tag(tags[r]);
      layer.map.theta = entry.at("theta").get<double>();
      layer.map.alpha = entry.at("alpha").get<std::vector<double>>();
      layer.map.ratio = info.config.ratio;
      require(layer.map.alpha.size() == w.rows, Errc::length_mismatch,
              "alpha array does not match layer row count");

      std::ifstream bin(dir / entry.at("codes").get<std::string>(), std::ios::binary);
      require(bin.good(), Errc::io, "cannot open codes for layer " + std::to_string(idx));
      std::vector<std::uint8_t> packed((std::istreambuf_iterator<char>(bin)),
                                       std::istreambuf_iterator<char>());
      std::size_t cursor = 0;
      layer.codes.resize(w.rows);
      for (std::size_t r = 0; r < w.rows; ++r) {
        const int bits = info.config.row_bits(layer.map.rows[r]);
        std::size_t row_bytes = (w.cols * static_cast<std::size_t>(bits) + 7) / 8;
        require(cursor + row_bytes <= packed.size(), Errc::truncated,
                "packed codes truncated for layer " + std::to_string(idx));
        std::size_t row_cursor = cursor;
        layer.codes[r] = unpack_row(packed, w.cols, bits, row_cursor);
        cursor += row_bytes;  // rows are byte-aligned
        const LevelSet& levels = tables.for_row(layer.map.rows[r]);
        for (std::size_t c = 0; c < w.cols; ++c)
          w.at(r, c) = layer.map.alpha[r] * levels.decode(layer.codes[r][c]);
      }
      require(cursor == packed.size(), Errc::length_mismatch,
              "packed codes longer than expected for layer " + std::to_string(idx));
      assign_from_gemm(model.net.layers[idx], w);
      info.layers.emplace(idx, std::move(layer));
    }
    model.quant = std::move(info);
  }
  return model;
}

}  // namespace msp
