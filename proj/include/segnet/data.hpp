#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "segnet/sample.hpp"

namespace segnet::data {

struct Dataset {
  std::vector<Sample> samples;
  std::uint64_t generator_seed = 0;

  std::vector<std::string> ids() const;
  /// Index of `id` in `samples`; throws std::out_of_range if absent.
  std::size_t index_of(const std::string& id) const;
  const Sample& get(const std::string& id) const { return samples[index_of(id)]; }
};

/// Synthetic four-modality slices. Each sample has an elliptical "brain"
/// and nested tumour ellipses WT ⊇ TC ⊇ ET (each clipped to its parent),
/// with per-region, per-channel intensities plus Gaussian noise. Sample i
/// draws from its own stream derive_seed(seed, i), so any prefix of a larger
/// dataset equals the smaller one.
Dataset generate_synthetic_dataset(std::size_t n, std::size_t size, std::uint64_t seed,
                                   std::size_t channels = 4);

Sample generate_sample(std::size_t index, std::size_t size, std::uint64_t seed, std::size_t channels = 4);

/// Sample ids are "s" followed by the zero-padded index.
std::string sample_id(std::size_t index);

struct SplitRatios {
  double train = 0.70;
  double val = 0.15;
  double test = 0.15;

  void validate() const;
  friend bool operator==(const SplitRatios&, const SplitRatios&) = default;
};

struct DatasetSplit {
  std::vector<std::string> train;
  std::vector<std::string> val;
  std::vector<std::string> test;
  std::uint64_t split_seed = 0;

  const std::vector<std::string>& part(const std::string& name) const;
  friend bool operator==(const DatasetSplit&, const DatasetSplit&) = default;
};

/// Seeded shuffle, then train takes floor(train * n), val floor(val * n) and
/// test the remainder.
DatasetSplit split_dataset(const std::vector<std::string>& ids, const SplitRatios& ratios, std::uint64_t seed);

/// A permutation of [0, n) keyed by (seed, epoch), cut into batches of
/// `batch_size`; the last batch may be short.
std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                    std::uint64_t epoch);

std::vector<std::vector<std::string>> batch_iter(const std::vector<std::string>& ids, std::size_t batch_size,
                                                 std::uint64_t seed, std::uint64_t epoch);

/// Writes manifest.json plus <id>_image.sgt (f32) and <id>_masks.sgt (u8,
/// (S, S, 3)) per sample.
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace segnet::data
