// Copyright (c) 2026 The SSF-PEFT Authors
// SPDX-License-Identifier: Apache-2.0
//
// Image classification datasets: in-memory splits, the procedural synthetic
// tasks, and the on-disk directory format (labels.csv + one .ssft per image).

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "ssf/tensor.h"

namespace ssf {

/// One split. Images are stored contiguously as [n, channels, side, side].
struct Dataset {
  std::size_t channels = 3;
  std::size_t image_side = 16;
  std::size_t num_classes = 4;
  std::vector<float> pixels;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t image_numel() const { return channels * image_side * image_side; }
  std::span<const float> image(std::size_t i) const;
  void push(std::span<const float> image, int label);
  /// Throws ConfigError on bad labels or a pixel buffer of the wrong size.
  void validate() const;

  template <typename T>
  Tensor<T> batch_images(std::span<const std::size_t> indices) const;
  std::vector<int> batch_labels(std::span<const std::size_t> indices) const;
};

struct DatasetSplits {
  Dataset train;
  Dataset val;
};

enum class TaskId { upstream_shapes, downstream_shifted };

std::string_view to_string(TaskId task);
TaskId parse_task(std::string_view text);

struct SyntheticParams {
  std::size_t num_classes = 4;
  std::size_t image_side = 16;
  std::size_t train_size = 2000;
  std::size_t val_size = 500;
  /// Per-channel distortion x -> gain·x + offset (downstream only).
  std::array<double, 3> gain = {0.3, 0.2, 0.25};
  std::array<double, 3> offset = {1.2, -1.0, 0.8};
  /// Downstream label y becomes num_classes-1-y when set.
  bool reverse_labels = true;

  nlohmann::json to_json() const;
  static SyntheticParams from_json(const nlohmann::json& j);
};

/// Stripe/checker/blob/ring textures with random phase, frequency, colour and
/// noise; labels are assigned round-robin. The downstream task draws from the
/// same generator and applies the per-channel distortion and label remap.
DatasetSplits generate_synthetic(TaskId task, const SyntheticParams& params, std::uint64_t seed);

/// Raw pattern field in [0,1] for class `label` (exposed for tests).
std::vector<double> synthetic_pattern(std::size_t label, std::size_t side, double freq, double phase,
                                      double cx, double cy);

inline constexpr std::size_t kMaxSyntheticClasses = 8;

/// Writes <dir>/dataset.json and <dir>/{train,val}/{labels.csv,*.ssft}.
void save_dataset(const DatasetSplits& splits, const std::filesystem::path& dir,
                  const nlohmann::json& info = nlohmann::json::object());
Dataset load_split(const std::filesystem::path& split_dir, std::size_t num_classes);
DatasetSplits load_dataset(const std::filesystem::path& dir);

struct DatasetSpec {
  enum class Source { synthetic, directory } source = Source::synthetic;
  TaskId task = TaskId::upstream_shapes;
  SyntheticParams params;
  std::uint64_t seed = 0;
  std::filesystem::path path;
  /// Optional caps on the split sizes; 0 keeps everything.
  std::size_t train_limit = 0;
  std::size_t val_limit = 0;
};

DatasetSplits load(const DatasetSpec& spec);

}  // namespace ssf
