#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "msp/dataset.hpp"
#include "msp/rng.hpp"
#include "msp/train.hpp"

using namespace msp;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// Seeded blob-per-class images, enough structure for loader tests.
void write_fake_idx(const fs::path& dir, std::size_t n, const std::string& prefix) {
  Rng rng(123);
  std::vector<std::uint8_t> pixels(n * 28 * 28);
  std::vector<std::uint8_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = static_cast<std::uint8_t>(i % 10);
    const std::size_t cx = 6 + (labels[i] % 5) * 4;
    const std::size_t cy = 8 + (labels[i] / 5) * 10;
    for (std::size_t y = 0; y < 28; ++y)
      for (std::size_t x = 0; x < 28; ++x) {
        const double d2 = double(x - cx) * double(x - cx) + double(y - cy) * double(y - cy);
        const double v = 255.0 * std::exp(-d2 / 18.0) + 12.0 * rng.uniform();
        pixels[(i * 28 + y) * 28 + x] = static_cast<std::uint8_t>(std::min(v, 255.0));
      }
  }
  write_idx_images(dir / (prefix + "-images-idx3-ubyte"), pixels, n, 28, 28);
  write_idx_labels(dir / (prefix + "-labels-idx1-ubyte"), labels);
}

}  // namespace

TEST_CASE("IDX loader reads counts and shapes from the headers") {
  auto dir = fresh_dir("msp_idx_10k");
  write_fake_idx(dir, 10000, "t10k");
  Dataset ds = load_idx_dataset(dir);
  CHECK(ds.size() == 10000);
  CHECK(ds.sample_dims() == Shape{1, 28, 28});
  CHECK(ds.num_classes == 10);
}

TEST_CASE("IDX pixel byte 255 scales to exactly 1.0") {
  auto dir = fresh_dir("msp_idx_scale");
  std::vector<std::uint8_t> pixels(4, 0);
  pixels[0] = 255;
  pixels[3] = 128;
  write_idx_images(dir / "p-images-idx3-ubyte", pixels, 1, 2, 2);
  write_idx_labels(dir / "p-labels-idx1-ubyte", {3});
  Dataset ds = load_idx_dataset(dir);
  CHECK(ds.samples.data[0] == 1.0);
  CHECK(ds.samples.data[1] == 0.0);
  CHECK(ds.samples.data[3] == doctest::Approx(128.0 / 255.0));
}

TEST_CASE("IDX loader reports truncation, bad magic, and count mismatch distinctly") {
  auto dir = fresh_dir("msp_idx_bad");
  write_fake_idx(dir, 8, "t");

  SUBCASE("truncated payload") {
    auto img = dir / "t-images-idx3-ubyte";
    std::ifstream in(img, std::ios::binary);
    std::vector<char> bytes{std::istreambuf_iterator<char>(in),
                            std::istreambuf_iterator<char>()};
    in.close();
    std::ofstream(img, std::ios::binary).write(bytes.data(), 16);  // header only
    try {
      load_idx_dataset(dir);
      FAIL("expected truncation");
    } catch (const Error& e) {
      CHECK(e.code() == Errc::truncated);
    }
  }
  SUBCASE("bad magic") {
    auto img = dir / "t-images-idx3-ubyte";
    std::fstream f(img, std::ios::binary | std::ios::in | std::ios::out);
    f.seekp(0);
    const char zeros[4] = {0x12, 0x34, 0x56, 0x78};
    f.write(zeros, 4);
    f.close();
    try {
      load_idx_dataset(dir);
      FAIL("expected bad magic");
    } catch (const Error& e) {
      CHECK(e.code() == Errc::bad_magic);
    }
  }
  SUBCASE("image/label count mismatch") {
    write_idx_labels(dir / "t-labels-idx1-ubyte", std::vector<std::uint8_t>(5, 0));
    try {
      load_idx_dataset(dir);
      FAIL("expected count mismatch");
    } catch (const Error& e) {
      CHECK(e.code() == Errc::length_mismatch);
    }
  }
}

TEST_CASE("synthetic datasets are deterministic for a fixed seed") {
  Dataset a = gen_synthetic(SyntheticKind::moons, 1000, 7);
  Dataset b = gen_synthetic(SyntheticKind::moons, 1000, 7);
  CHECK(a.samples.data == b.samples.data);
  CHECK(a.labels == b.labels);
  Dataset c = gen_synthetic(SyntheticKind::moons, 1000, 8);
  CHECK(a.samples.data != c.samples.data);
}

TEST_CASE("synthetic classes are balanced") {
  Dataset ds = gen_synthetic(SyntheticKind::gaussians, 10, 1);
  int c0 = 0;
  for (int y : ds.labels) c0 += y == 0 ? 1 : 0;
  CHECK(c0 == 5);
  // Any prefix split stays balanced because classes interleave.
  Dataset head = ds.head(6);
  int h0 = 0;
  for (int y : head.labels) h0 += y == 0 ? 1 : 0;
  CHECK(h0 == 3);
}

TEST_CASE("synthetic generation rejects n < 2") {
  CHECK_THROWS_AS(gen_synthetic(SyntheticKind::moons, 1, 3), Error);
}

TEST_CASE("moons features live in the unit square") {
  Dataset ds = gen_synthetic(SyntheticKind::moons, 2000, 11);
  for (double v : ds.samples.data) {
    CHECK(v > -0.05);
    CHECK(v < 1.05);
  }
}

TEST_CASE("a linear classifier underperforms a small MLP on moons") {
  Dataset data = gen_synthetic(SyntheticKind::moons, 200, 3);
  TrainConfig cfg;
  cfg.quantize = false;
  cfg.pretrain_epochs = 120;
  cfg.epochs = 1;
  cfg.lr = 0.5;
  cfg.seed = 3;

  TrainResult linear =
      train(build_network("2,d2", 3), {2}, 2, data, data, cfg);
  TrainResult mlp =
      train(build_network("2,d16,relu,d16,relu,d2", 3), {2}, 2, data, data, cfg);
  // Scores are on the training points; the boundary is not linearly separable.
  CHECK(linear.final_test_acc < mlp.final_test_acc);
  CHECK(mlp.final_test_acc > 0.9);
}

TEST_CASE("dataset spec parser handles synthetic and rejects junk") {
  Dataset ds = load_dataset_spec("gaussians:50:9");
  CHECK(ds.size() == 50);
  CHECK_THROWS_AS(load_dataset_spec("moons"), Error);
  CHECK_THROWS_AS(load_dataset_spec("planets:10:1"), Error);
  CHECK_THROWS_AS(load_dataset_spec("moons:abc:1"), Error);
}
