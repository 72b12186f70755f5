#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "sfl/metrics.hpp"
#include "sfl/tensor.hpp"

namespace sfl {

// Image channels-first in [0,1] (after normalization, any range), mask of
// class ids on the same grid.
struct Sample {
  std::string id;
  int channels = 3;
  int height = 0;
  int width = 0;
  std::vector<float> image;
  std::vector<ClassId> mask;
};

struct SyntheticOptions {
  int num_classes = 5;
  double noise_std = 0.12;
  // Scale of per-sample intensity jitter around the class means.
  double intensity_jitter = 0.08;
};

// Concentric randomized ellipses: background 0, outer ring 1, inner ring 2,
// interior 3, and a blob 4 that always lies inside the interior. Each sample
// depends only on (seed, index, size).
std::vector<Sample> generate_synthetic_dataset(int n, int size, std::uint64_t seed,
                                               const SyntheticOptions& options = {});

struct PartitionSpec {
  std::vector<int> client_counts;
  int test_count = 0;
  std::uint64_t seed = 0;
};

struct PartitionResult {
  std::vector<std::vector<Sample>> clients;
  std::vector<Sample> test;
};

// Seeded shuffle, then contiguous slices: client 0, client 1, ..., test.
PartitionResult partition_dataset(const std::vector<Sample>& samples, const PartitionSpec& spec);

struct TrainVal {
  std::vector<Sample> train;
  std::vector<Sample> val;
};

// 15% (at least one sample when n >= 2) goes to validation.
std::int64_t validation_count(std::int64_t n);
TrainVal train_val_split(const std::vector<Sample>& shard, std::uint64_t seed);

// Fisher-Yates over 0..n-1 driven by mt19937_64(seed).
std::vector<std::size_t> seeded_permutation(std::size_t n, std::uint64_t seed);

struct DatasetPreset {
  std::string name;
  std::vector<int> client_counts;
  int test_count = 0;
  int num_classes = 5;
};

const std::vector<DatasetPreset>& dataset_presets();
const DatasetPreset& dataset_preset(const std::string& name);

struct AugmentConfig {
  double hflip_prob = 0.5;
  double vflip_prob = 0.5;
  bool rot90 = false;
  double max_rotation_deg = 0.0;  // small-angle nearest-neighbor, reflect padded
  double rgb_shift = 0.0;         // uniform per-channel offset bound
  double brightness = 0.0;        // uniform multiplicative bound
  double contrast = 0.0;
  bool normalize = false;
  std::array<float, 3> mean{0.5f, 0.5f, 0.5f};
  std::array<float, 3> std{0.25f, 0.25f, 0.25f};
};

Sample hflip(const Sample& s);
Sample vflip(const Sample& s);
// Counter-clockwise quarter turns.
Sample rot90(const Sample& s, int quarter_turns);
Sample rotate_small(const Sample& s, double degrees);
Sample normalize(const Sample& s, const std::array<float, 3>& mean, const std::array<float, 3>& std);

Sample augment_sample(const Sample& s, const AugmentConfig& config, std::mt19937_64& rng);

struct Batch {
  Tensor images;  // (N,C,H,W)
  std::vector<ClassId> masks;
};

Batch make_batch(const std::vector<Sample>& samples, std::span<const std::size_t> indices, DType dtype = DType::f32);
Batch make_batch(const std::vector<Sample>& samples, DType dtype = DType::f32);

}  // namespace sfl
