#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "msp/tensor.hpp"

namespace msp {

struct Dataset {
  Tensor samples;           // dims {n, ...} batch-major
  std::vector<int> labels;  // in [0, num_classes)
  std::size_t num_classes = 0;
  std::string split;

  std::size_t size() const { return labels.size(); }
  std::size_t sample_numel() const { return samples.numel() / std::max<std::size_t>(1, size()); }
  std::vector<std::size_t> sample_dims() const;
  // First n samples / remaining samples.
  Dataset head(std::size_t n) const;
  Dataset tail_from(std::size_t start) const;
};

// IDX image/label pair from a directory (magic 0x00000803 / 0x00000801);
// pixels are scaled to [0, 1]. The directory must contain exactly one
// *-idx3-ubyte file and its matching *-idx1-ubyte file.
Dataset load_idx_dataset(const std::filesystem::path& dir);
Dataset load_idx_pair(const std::filesystem::path& images, const std::filesystem::path& labels);

// Raw IDX writers, used for fixtures and export.
void write_idx_images(const std::filesystem::path& path,
                      const std::vector<std::uint8_t>& pixels, std::size_t n, std::size_t h,
                      std::size_t w);
void write_idx_labels(const std::filesystem::path& path, const std::vector<std::uint8_t>& labels);

enum class SyntheticKind { moons, gaussians };

// Two balanced classes, class of sample i is i % 2, features in the unit
// square. Deterministic for a fixed seed.
Dataset gen_synthetic(SyntheticKind kind, std::size_t n, std::uint64_t seed);

// Parses "moons:N:SEED", "gaussians:N:SEED" or "idx:DIR".
Dataset load_dataset_spec(const std::string& spec);

}  // namespace msp
