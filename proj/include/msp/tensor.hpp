#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "msp/common.hpp"

namespace msp {

// Dense row-major tensor of 64-bit floats.
struct Tensor {
  std::vector<std::size_t> dims;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::vector<std::size_t> d, std::vector<double> values);

  static Tensor zeros(std::vector<std::size_t> d);
  static Tensor full(std::vector<std::size_t> d, double value);

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return dims.size(); }

  double& at(std::size_t i) { return data[i]; }
  double at(std::size_t i) const { return data[i]; }

  bool same_shape(const Tensor& other) const { return dims == other.dims; }
};

std::size_t shape_numel(const std::vector<std::size_t>& dims);

// Binary tensor container: magic "MSPT", u32 LE rank, rank x u64 LE dims,
// then numel x f64 LE payload. Round-trips bit-exactly.
void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

// 2-D view of a quantizable layer's weights, one row per output channel.
struct WeightMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  WeightMatrix() = default;
  WeightMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
  double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
};

}  // namespace msp
