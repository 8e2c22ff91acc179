#include "msp/tensor.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace msp {

namespace {

constexpr char kMagic[4] = {'M', 'S', 'P', 'T'};

void put_bytes(std::ofstream& out, const void* p, std::size_t n) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void get_bytes(std::ifstream& in, void* p, std::size_t n, const std::string& what) {
  in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n)
    fail(Errc::truncated, "tensor container truncated while reading " + what);
}

void put_u32(std::ofstream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  put_bytes(out, b, 4);
}

void put_u64(std::ofstream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  put_bytes(out, b, 8);
}

std::uint32_t get_u32(std::ifstream& in, const std::string& what) {
  unsigned char b[4];
  get_bytes(in, b, 4, what);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

std::uint64_t get_u64(std::ifstream& in, const std::string& what) {
  unsigned char b[8];
  get_bytes(in, b, 8, what);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace

std::size_t shape_numel(const std::vector<std::size_t>& dims) {
  std::size_t n = 1;
  for (std::size_t d : dims) n *= d;
  return n;
}

Tensor::Tensor(std::vector<std::size_t> d, std::vector<double> values)
    : dims(std::move(d)), data(std::move(values)) {
  for (std::size_t dim : dims)
    require(dim > 0, Errc::validation, "tensor dims must be positive");
  require(shape_numel(dims) == data.size(), Errc::length_mismatch,
          "tensor dims do not match payload length");
}

Tensor Tensor::zeros(std::vector<std::size_t> d) {
  std::size_t n = shape_numel(d);
  return Tensor(std::move(d), std::vector<double>(n, 0.0));
}

Tensor Tensor::full(std::vector<std::size_t> d, double value) {
  std::size_t n = shape_numel(d);
  return Tensor(std::move(d), std::vector<double>(n, value));
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), Errc::io, "cannot open for write: " + path.string());
  put_bytes(out, kMagic, 4);
  put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.dims) put_u64(out, d);
  for (double v : t.data) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(out, bits);
  }
  out.flush();
  require(out.good(), Errc::io, "write failed: " + path.string());
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), Errc::io, "cannot open: " + path.string());
  char magic[4];
  get_bytes(in, magic, 4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0)
    fail(Errc::bad_magic, "not a tensor container: " + path.string());
  std::uint32_t rank = get_u32(in, "rank");
  std::vector<std::size_t> dims(rank);
  for (std::uint32_t i = 0; i < rank; ++i) {
    dims[i] = static_cast<std::size_t>(get_u64(in, "dims"));
    require(dims[i] > 0, Errc::bad_format, "zero dimension in container");
  }
  std::size_t n = shape_numel(dims);
  std::vector<double> data(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::uint64_t bits = get_u64(in, "payload");
    std::memcpy(&data[i], &bits, 8);
  }
  // Trailing garbage means the file disagrees with its own header.
  char extra;
  in.read(&extra, 1);
  if (in.gcount() != 0)
    fail(Errc::length_mismatch, "container payload longer than dims imply: " + path.string());
  return Tensor(std::move(dims), std::move(data));
}

}  // namespace msp
