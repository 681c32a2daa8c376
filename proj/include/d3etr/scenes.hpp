#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "d3etr/matching.hpp"

namespace d3etr::scene {

struct DatasetSpec {
  std::uint64_t seed = 2023;
  std::size_t n_scenes = 2222;  // 2000 train / 222 val after the 90/10 split
  std::size_t grid_h = 16;
  std::size_t grid_w = 16;
  std::size_t c_in = 3;
  std::size_t n_classes = 5;
  std::size_t max_objects = 4;
  // Shape palette, sizes in grid cells.
  std::size_t min_size = 3;
  std::size_t max_size = 7;
  double intensity_min = 0.6;
  double intensity_max = 1.0;
  double noise_std = 0.05;
  // Overlap policy: pairwise IoU cap; with a cap of 0 boxes must also keep
  // min_gap empty cells between them.
  double max_iou = 0.0;
  std::size_t min_gap = 1;

  void validate() const;
  friend bool operator==(const DatasetSpec&, const DatasetSpec&) = default;
};

inline constexpr std::size_t kMaxPatterns = 8;

struct SceneSample {
  std::size_t grid_h = 0, grid_w = 0, c_in = 0;
  std::vector<double> grid;  // (y * grid_w + x) * c_in + channel
  std::vector<match::GroundTruth> gts;
  std::uint64_t dataset_seed = 0;
  std::size_t index = 0;

  double cell(std::size_t y, std::size_t x, std::size_t c) const {
    return grid[(y * grid_w + x) * c_in + c];
  }
  friend bool operator==(const SceneSample&, const SceneSample&) = default;
};

// Pure function of (spec.seed, index).
SceneSample generate_scene(const DatasetSpec& spec, std::size_t index);

struct Split {
  std::vector<std::size_t> train, val;
};

// Exact 90/10 partition ordered by a per-index hash; both lists sorted.
Split split(const DatasetSpec& spec);

// Deterministic shuffle keyed by epoch_seed; the last partial batch is kept.
std::vector<std::vector<std::size_t>> batch_iter(std::span<const std::size_t> indices,
                                                 std::size_t batch_size, std::uint64_t epoch_seed);

DatasetSpec load_spec(const std::filesystem::path& path);
void save_spec(const DatasetSpec& spec, const std::filesystem::path& path);

}  // namespace d3etr::scene
