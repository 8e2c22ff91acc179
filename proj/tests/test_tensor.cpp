#include <cstring>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "msp/network.hpp"
#include "msp/rng.hpp"
#include "msp/tensor.hpp"

using namespace msp;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
  auto dir = fs::temp_directory_path() / "msp_tensor_tests";
  fs::create_directories(dir);
  return dir;
}

std::vector<char> read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("tensor container round-trips a 3x4 tensor of ones byte-identically") {
  auto dir = temp_dir();
  Tensor t = Tensor::full({3, 4}, 1.0);
  save_tensor(dir / "ones_a.mspt", t);
  Tensor back = load_tensor(dir / "ones_a.mspt");
  CHECK(back.dims == t.dims);
  CHECK(back.data == t.data);
  save_tensor(dir / "ones_b.mspt", back);
  CHECK(read_bytes(dir / "ones_a.mspt") == read_bytes(dir / "ones_b.mspt"));
}

TEST_CASE("tensor container rejects a bad magic") {
  auto dir = temp_dir();
  save_tensor(dir / "bad.mspt", Tensor::full({2}, 0.5));
  auto bytes = read_bytes(dir / "bad.mspt");
  std::memcpy(bytes.data(), "XXXX", 4);
  std::ofstream(dir / "bad.mspt", std::ios::binary).write(bytes.data(), bytes.size());
  try {
    load_tensor(dir / "bad.mspt");
    FAIL("expected bad magic error");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::bad_magic);
  }
}

TEST_CASE("tensor container distinguishes truncation from length mismatch") {
  auto dir = temp_dir();
  save_tensor(dir / "t.mspt", Tensor::full({2, 2}, 1.5));
  auto bytes = read_bytes(dir / "t.mspt");

  std::ofstream(dir / "trunc.mspt", std::ios::binary).write(bytes.data(), bytes.size() - 9);
  try {
    load_tensor(dir / "trunc.mspt");
    FAIL("expected truncation error");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::truncated);
  }

  auto longer = bytes;
  longer.push_back(0);
  std::ofstream(dir / "long.mspt", std::ios::binary).write(longer.data(), longer.size());
  try {
    load_tensor(dir / "long.mspt");
    FAIL("expected length mismatch error");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::length_mismatch);
  }
}

TEST_CASE("tensor round-trip is bit-exact for awkward doubles") {
  auto dir = temp_dir();
  Tensor t({2, 2}, {1.5, -0.25, 0.0, 7.0});
  save_tensor(dir / "bits.mspt", t);
  Tensor back = load_tensor(dir / "bits.mspt");
  REQUIRE(back.numel() == 4);
  CHECK(std::memcmp(back.data.data(), t.data.data(), 4 * sizeof(double)) == 0);
}

TEST_CASE("tensor round-trip is bit-exact for random finite payloads") {
  auto dir = temp_dir();
  Rng rng(42);
  for (int iter = 0; iter < 20; ++iter) {
    std::size_t rank = 1 + rng.below(3);
    std::vector<std::size_t> dims(rank);
    for (auto& d : dims) d = 1 + rng.below(5);
    Tensor t = Tensor::zeros(dims);
    for (double& v : t.data) {
      switch (rng.below(5)) {
        case 0: v = rng.normal() * 1e100; break;
        case 1: v = rng.normal() * 1e-300; break;  // subnormal territory
        case 2: v = -0.0; break;
        case 3: v = rng.normal(); break;
        default: v = rng.uniform(-1, 1); break;
      }
    }
    save_tensor(dir / "rand.mspt", t);
    Tensor back = load_tensor(dir / "rand.mspt");
    REQUIRE(back.dims == t.dims);
    CHECK(std::memcmp(back.data.data(), t.data.data(), t.numel() * sizeof(double)) == 0);
  }
}

TEST_CASE("conv weights reshape to an O x I*k*k GEMM matrix") {
  Conv2dLayer c;
  c.in_ch = 3;
  c.out_ch = 8;
  c.k = 3;
  c.weights = Tensor::zeros({8, 3, 3, 3});
  c.bias = Tensor::zeros({8});
  WeightMatrix m = reshape_to_gemm(Layer{c});
  CHECK(m.rows == 8);
  CHECK(m.cols == 27);
}

TEST_CASE("dense weights pass through reshape unchanged") {
  DenseLayer d;
  d.in = 64;
  d.out = 10;
  d.weights = Tensor::zeros({10, 64});
  for (std::size_t i = 0; i < d.weights.numel(); ++i) d.weights.data[i] = double(i);
  d.bias = Tensor::zeros({10});
  WeightMatrix m = reshape_to_gemm(Layer{d});
  CHECK(m.rows == 10);
  CHECK(m.cols == 64);
  CHECK(m.data == d.weights.data);
}

TEST_CASE("conv rows flatten in (in_ch, k_row, k_col) order") {
  Conv2dLayer c;
  c.in_ch = 1;
  c.out_ch = 2;
  c.k = 2;
  std::vector<double> w(8);
  for (int i = 0; i < 8; ++i) w[i] = i + 1;
  c.weights = Tensor({2, 1, 2, 2}, w);
  c.bias = Tensor::zeros({2});
  WeightMatrix m = reshape_to_gemm(Layer{c});
  CHECK(std::vector<double>(m.row(0).begin(), m.row(0).end()) ==
        std::vector<double>{1, 2, 3, 4});
  CHECK(std::vector<double>(m.row(1).begin(), m.row(1).end()) ==
        std::vector<double>{5, 6, 7, 8});
}

TEST_CASE("reshape followed by its inverse is the identity on random shapes") {
  Rng rng(7);
  for (int iter = 0; iter < 30; ++iter) {
    Layer layer;
    if (rng.below(2) == 0) {
      DenseLayer d;
      d.in = 1 + rng.below(9);
      d.out = 1 + rng.below(9);
      d.weights = Tensor::zeros({d.out, d.in});
      for (double& v : d.weights.data) v = rng.normal();
      d.bias = Tensor::zeros({d.out});
      layer = d;
    } else {
      Conv2dLayer c;
      c.in_ch = 1 + rng.below(4);
      c.out_ch = 1 + rng.below(4);
      c.k = 1 + rng.below(3);
      c.weights = Tensor::zeros({c.out_ch, c.in_ch, c.k, c.k});
      for (double& v : c.weights.data) v = rng.normal();
      c.bias = Tensor::zeros({c.out_ch});
      layer = c;
    }
    const std::vector<double> original =
        std::holds_alternative<DenseLayer>(layer) ? std::get<DenseLayer>(layer).weights.data
                                                  : std::get<Conv2dLayer>(layer).weights.data;
    WeightMatrix m = reshape_to_gemm(layer);
    assign_from_gemm(layer, m);
    const std::vector<double>& after =
        std::holds_alternative<DenseLayer>(layer) ? std::get<DenseLayer>(layer).weights.data
                                                  : std::get<Conv2dLayer>(layer).weights.data;
    CHECK(after == original);
  }
}

TEST_CASE("reshape rejects non-quantizable layers") {
  CHECK_THROWS_AS(reshape_to_gemm(Layer{ReluLayer{}}), Error);
}

TEST_CASE("count_ops matches the MAC formulas") {
  SUBCASE("dense 64 -> 10 is 640 MACs") {
    NetworkIR net = build_network("64,d10", 1);
    CHECK(count_ops(net, {64}).total == 640);
  }
  SUBCASE("conv 1 -> 4, k=3, 8x8, stride 1, pad 1 is 2304 MACs") {
    NetworkIR net = build_network("1x8x8,c4k3s1p1", 1);
    CHECK(count_ops(net, {1, 8, 8}).total == 8 * 8 * 4 * 1 * 9);
  }
  SUBCASE("empty network counts zero") {
    NetworkIR net;
    CHECK(count_ops(net, {5}).total == 0);
  }
  SUBCASE("incompatible dims throw") {
    NetworkIR net = build_network("64,d10", 1);
    CHECK_THROWS_AS(count_ops(net, {32}), Error);
  }
}

TEST_CASE("count_ops is additive over layer concatenation") {
  NetworkIR a = build_network("1x8x8,c4k3s1p1,relu", 3);
  NetworkIR b = build_network("4x8x8,c2k3s1p1,relu,flat,d10", 4);
  NetworkIR both = a;
  for (const Layer& l : b.layers) both.layers.push_back(l);
  CHECK(count_ops(both, {1, 8, 8}).total ==
        count_ops(a, {1, 8, 8}).total + count_ops(b, {4, 8, 8}).total);
}
