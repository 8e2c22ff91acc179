#include "msp/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "msp/rng.hpp"

namespace msp {

std::vector<std::size_t> Dataset::sample_dims() const {
  return {samples.dims.begin() + 1, samples.dims.end()};
}

Dataset Dataset::head(std::size_t n) const {
  require(n <= size(), Errc::validation, "head beyond dataset size");
  Dataset out;
  std::size_t per = sample_numel();
  out.samples = Tensor(
      [&] {
        auto d = samples.dims;
        d[0] = n;
        return d;
      }(),
      std::vector<double>(samples.data.begin(), samples.data.begin() + n * per));
  out.labels.assign(labels.begin(), labels.begin() + n);
  out.num_classes = num_classes;
  out.split = split;
  return out;
}

Dataset Dataset::tail_from(std::size_t start) const {
  require(start < size(), Errc::validation, "tail beyond dataset size");
  Dataset out;
  std::size_t per = sample_numel();
  out.samples = Tensor(
      [&] {
        auto d = samples.dims;
        d[0] = size() - start;
        return d;
      }(),
      std::vector<double>(samples.data.begin() + start * per, samples.data.end()));
  out.labels.assign(labels.begin() + start, labels.end());
  out.num_classes = num_classes;
  out.split = split;
  return out;
}

namespace {

constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

std::uint32_t read_be_u32(std::ifstream& in, const std::string& what) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (in.gcount() != 4) fail(Errc::truncated, "IDX file truncated while reading " + what);
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) |
         std::uint32_t(b[3]);
}

void write_be_u32(std::ofstream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace

void write_idx_images(const std::filesystem::path& path,
                      const std::vector<std::uint8_t>& pixels, std::size_t n, std::size_t h,
                      std::size_t w) {
  require(pixels.size() == n * h * w, Errc::length_mismatch, "pixel buffer size mismatch");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), Errc::io, "cannot open for write: " + path.string());
  write_be_u32(out, kIdxImagesMagic);
  write_be_u32(out, static_cast<std::uint32_t>(n));
  write_be_u32(out, static_cast<std::uint32_t>(h));
  write_be_u32(out, static_cast<std::uint32_t>(w));
  out.write(reinterpret_cast<const char*>(pixels.data()),
            static_cast<std::streamsize>(pixels.size()));
  require(out.good(), Errc::io, "write failed: " + path.string());
}

void write_idx_labels(const std::filesystem::path& path,
                      const std::vector<std::uint8_t>& labels) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), Errc::io, "cannot open for write: " + path.string());
  write_be_u32(out, kIdxLabelsMagic);
  write_be_u32(out, static_cast<std::uint32_t>(labels.size()));
  out.write(reinterpret_cast<const char*>(labels.data()),
            static_cast<std::streamsize>(labels.size()));
  require(out.good(), Errc::io, "write failed: " + path.string());
}

Dataset load_idx_pair(const std::filesystem::path& images, const std::filesystem::path& labels) {
  std::ifstream img(images, std::ios::binary);
  require(img.good(), Errc::io, "cannot open: " + images.string());
  if (read_be_u32(img, "image magic") != kIdxImagesMagic)
    fail(Errc::bad_magic, "bad IDX image magic in " + images.string());
  std::size_t n = read_be_u32(img, "image count");
  std::size_t h = read_be_u32(img, "rows");
  std::size_t w = read_be_u32(img, "cols");
  std::vector<std::uint8_t> pixels(n * h * w);
  img.read(reinterpret_cast<char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  if (static_cast<std::size_t>(img.gcount()) != pixels.size())
    fail(Errc::truncated, "IDX image payload truncated in " + images.string());

  std::ifstream lab(labels, std::ios::binary);
  require(lab.good(), Errc::io, "cannot open: " + labels.string());
  if (read_be_u32(lab, "label magic") != kIdxLabelsMagic)
    fail(Errc::bad_magic, "bad IDX label magic in " + labels.string());
  std::size_t ln = read_be_u32(lab, "label count");
  if (ln != n)
    fail(Errc::length_mismatch, "IDX image/label counts differ: " + std::to_string(n) + " vs " +
                                    std::to_string(ln));
  std::vector<std::uint8_t> raw(ln);
  lab.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(lab.gcount()) != raw.size())
    fail(Errc::truncated, "IDX label payload truncated in " + labels.string());

  Dataset ds;
  std::vector<double> values(pixels.size());
  for (std::size_t i = 0; i < pixels.size(); ++i) values[i] = pixels[i] / 255.0;
  ds.samples = Tensor({n, 1, h, w}, std::move(values));
  ds.labels.assign(raw.begin(), raw.end());
  int max_label = 0;
  for (int v : ds.labels) max_label = std::max(max_label, v);
  ds.num_classes = static_cast<std::size_t>(max_label) + 1;
  ds.split = "idx";
  return ds;
}

Dataset load_idx_dataset(const std::filesystem::path& dir) {
  require(std::filesystem::is_directory(dir), Errc::io, "not a directory: " + dir.string());
  std::vector<std::filesystem::path> image_files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (name.find("idx3-ubyte") != std::string::npos) image_files.push_back(entry.path());
  }
  std::sort(image_files.begin(), image_files.end());
  require(image_files.size() == 1, Errc::io,
          "expected exactly one *-idx3-ubyte file in " + dir.string() + ", found " +
              std::to_string(image_files.size()));
  std::string label_name = image_files[0].filename().string();
  auto pos = label_name.find("images-idx3-ubyte");
  if (pos != std::string::npos)
    label_name.replace(pos, std::string("images-idx3-ubyte").size(), "labels-idx1-ubyte");
  else {
    pos = label_name.find("idx3-ubyte");
    label_name.replace(pos, std::string("idx3-ubyte").size(), "idx1-ubyte");
  }
  auto label_path = dir / label_name;
  require(std::filesystem::exists(label_path), Errc::io,
          "label file not found: " + label_path.string());
  return load_idx_pair(image_files[0], label_path);
}

Dataset gen_synthetic(SyntheticKind kind, std::size_t n, std::uint64_t seed) {
  require(n >= 2, Errc::validation, "synthetic dataset needs n >= 2");
  Rng rng(seed);
  std::vector<double> values(2 * n);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    int cls = static_cast<int>(i % 2);
    double x, y;
    if (kind == SyntheticKind::moons) {
      double t = rng.uniform() * 3.14159265358979323846;
      double nx = 0.1 * rng.normal();
      double ny = 0.1 * rng.normal();
      if (cls == 0) {
        x = std::cos(t) + nx;
        y = std::sin(t) + ny;
      } else {
        x = 1.0 - std::cos(t) + nx;
        y = 0.5 - std::sin(t) + ny;
      }
      // Affine map into the unit square; features stay non-negative so the
      // unsigned activation grid applies to raw inputs as well.
      x = (x + 1.5) / 4.0;
      y = (y + 1.0) / 3.0;
    } else {
      double cx = cls == 0 ? 0.35 : 0.65;
      double cy = cls == 0 ? 0.35 : 0.65;
      x = cx + 0.08 * rng.normal();
      y = cy + 0.08 * rng.normal();
    }
    values[2 * i] = x;
    values[2 * i + 1] = y;
    labels[i] = cls;
  }
  Dataset ds;
  ds.samples = Tensor({n, 2}, std::move(values));
  ds.labels = std::move(labels);
  ds.num_classes = 2;
  ds.split = kind == SyntheticKind::moons ? "moons" : "gaussians";
  return ds;
}

Dataset load_dataset_spec(const std::string& spec) {
  auto first = spec.find(':');
  require(first != std::string::npos, Errc::validation,
          "dataset spec must be kind:..., got '" + spec + "'");
  std::string kind = spec.substr(0, first);
  std::string rest = spec.substr(first + 1);
  if (kind == "idx") return load_idx_dataset(rest);
  if (kind == "moons" || kind == "gaussians") {
    auto second = rest.find(':');
    require(second != std::string::npos, Errc::validation,
            "synthetic spec must be kind:N:SEED, got '" + spec + "'");
    std::size_t n = 0;
    std::uint64_t seed = 0;
    try {
      n = std::stoull(rest.substr(0, second));
      seed = std::stoull(rest.substr(second + 1));
    } catch (const std::exception&) {
      fail(Errc::validation, "bad synthetic spec: '" + spec + "'");
    }
    return gen_synthetic(kind == "moons" ? SyntheticKind::moons : SyntheticKind::gaussians, n,
                         seed);
  }
  fail(Errc::validation, "unknown dataset kind: '" + kind + "'");
}

}  // namespace msp
