// Copyright (c) 2026 The SSF-PEFT Authors
// SPDX-License-Identifier: Apache-2.0

#include "ssf/data.h"

#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include <fmt/format.h>

#include "ssf/checkpoint.h"
#include "ssf/errors.h"
#include "ssf/rng.h"

namespace ssf {

std::span<const float> Dataset::image(std::size_t i) const {
  return std::span<const float>(pixels).subspan(i * image_numel(), image_numel());
}

void Dataset::push(std::span<const float> img, int label) {
  if (img.size() != image_numel()) {
    throw ShapeError(fmt::format("image has {} values, dataset expects {}", img.size(), image_numel()));
  }
  pixels.insert(pixels.end(), img.begin(), img.end());
  labels.push_back(label);
}

void Dataset::validate() const {
  if (pixels.size() != labels.size() * image_numel()) {
    throw ConfigError(fmt::format("dataset holds {} pixels for {} images of {} values", pixels.size(),
                                  labels.size(), image_numel()));
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
      throw ConfigError(fmt::format("label {} outside [0, {})", y, num_classes));
    }
  }
}

template <typename T>
Tensor<T> Dataset::batch_images(std::span<const std::size_t> indices) const {
  Tensor<T> out(Shape{indices.size(), channels, image_side, image_side});
  auto dst = out.mutable_data();
  const std::size_t n = image_numel();
  for (std::size_t b = 0; b < indices.size(); ++b) {
    auto src = image(indices[b]);
    for (std::size_t j = 0; j < n; ++j) dst[b * n + j] = static_cast<T>(src[j]);
  }
  return out;
}

std::vector<int> Dataset::batch_labels(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(labels.at(i));
  return out;
}

template Tensor<float> Dataset::batch_images<float>(std::span<const std::size_t>) const;
template Tensor<double> Dataset::batch_images<double>(std::span<const std::size_t>) const;

std::string_view to_string(TaskId task) {
  return task == TaskId::upstream_shapes ? "upstream_shapes" : "downstream_shifted";
}

TaskId parse_task(std::string_view text) {
  if (text == "upstream_shapes" || text == "upstream") return TaskId::upstream_shapes;
  if (text == "downstream_shifted" || text == "downstream") return TaskId::downstream_shifted;
  throw ConfigError(fmt::format("unknown task '{}' (expected upstream_shapes|downstream_shifted)", text));
}

nlohmann::json SyntheticParams::to_json() const {
  return {{"num_classes", num_classes}, {"image_side", image_side}, {"train_size", train_size},
          {"val_size", val_size},       {"gain", gain},             {"offset", offset},
          {"reverse_labels", reverse_labels}};
}

SyntheticParams SyntheticParams::from_json(const nlohmann::json& j) {
  SyntheticParams p;
  p.num_classes = j.value("num_classes", p.num_classes);
  p.image_side = j.value("image_side", p.image_side);
  p.train_size = j.value("train_size", p.train_size);
  p.val_size = j.value("val_size", p.val_size);
  p.gain = j.value("gain", p.gain);
  p.offset = j.value("offset", p.offset);
  p.reverse_labels = j.value("reverse_labels", p.reverse_labels);
  return p;
}

std::vector<double> synthetic_pattern(std::size_t label, std::size_t side, double freq, double phase,
                                      double cx, double cy) {
  constexpr double kTwoPi = 2.0 * std::numbers::pi;
  const double s = static_cast<double>(side);
  std::vector<double> m(side * side);
  for (std::size_t i = 0; i < side; ++i) {
    for (std::size_t j = 0; j < side; ++j) {
      const double u = static_cast<double>(i) / s;
      const double v = static_cast<double>(j) / s;
      double val = 0.0;
      switch (label) {
        case 0: val = 0.5 + 0.5 * std::sin(kTwoPi * freq * u + phase); break;
        case 1: val = 0.5 + 0.5 * std::sin(kTwoPi * freq * v + phase); break;
        case 2: val = 0.5 + 0.5 * std::sin(kTwoPi * freq * (u + v) / std::numbers::sqrt2 + phase); break;
        case 3: val = 0.5 + 0.5 * std::sin(kTwoPi * freq * (u - v) / std::numbers::sqrt2 + phase); break;
        case 4:
          val = 0.5 + 0.5 * std::sin(kTwoPi * freq * u + phase) * std::sin(kTwoPi * freq * v + phase);
          break;
        case 5: {
          const double r2 = (u - cx) * (u - cx) + (v - cy) * (v - cy);
          val = std::exp(-r2 / 0.02);
          break;
        }
        case 6: {
          const double r = std::sqrt((u - cx) * (u - cx) + (v - cy) * (v - cy));
          val = 0.5 + 0.5 * std::cos(kTwoPi * freq * r + phase);
          break;
        }
        default: {
          const double r2 = (u - cx) * (u - cx) + (v - cy) * (v - cy);
          val = 1.0 - std::exp(-r2 / 0.02);
          break;
        }
      }
      m[i * side + j] = val;
    }
  }
  return m;
}

namespace {

Dataset generate_split(TaskId task, const SyntheticParams& p, std::size_t n, Rng& rng) {
  Dataset ds;
  ds.channels = 3;
  ds.image_side = p.image_side;
  ds.num_classes = p.num_classes;
  ds.pixels.reserve(n * ds.image_numel());
  ds.labels.reserve(n);
  const std::size_t side = p.image_side;
  std::vector<float> img(ds.image_numel());
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t cls = k % p.num_classes;
    const double freq = rng.uniform(1.5, 3.0);
    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double cx = rng.uniform(0.25, 0.75);
    const double cy = rng.uniform(0.25, 0.75);
    const auto m = synthetic_pattern(cls, side, freq, phase, cx, cy);
    for (std::size_t c = 0; c < 3; ++c) {
      const double base = rng.uniform(0.3, 0.7);
      const double amp = rng.uniform(0.3, 0.8) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
      for (std::size_t q = 0; q < side * side; ++q) {
        double x = base + amp * (m[q] - 0.5) + rng.normal(0.0, 0.15);
        if (task == TaskId::downstream_shifted) x = p.gain[c] * x + p.offset[c];
        img[c * side * side + q] = static_cast<float>(x);
      }
    }
    int label = static_cast<int>(cls);
    if (task == TaskId::downstream_shifted && p.reverse_labels) {
      label = static_cast<int>(p.num_classes - 1 - cls);
    }
    ds.push(img, label);
  }
  return ds;
}

}  // namespace

DatasetSplits generate_synthetic(TaskId task, const SyntheticParams& p, std::uint64_t seed) {
  if (p.num_classes < 2 || p.num_classes > kMaxSyntheticClasses) {
    throw ConfigError(fmt::format("synthetic tasks support 2..{} classes, got {}",
                                  kMaxSyntheticClasses, p.num_classes));
  }
  if (p.image_side == 0) throw ConfigError("image_side must be positive");
  Rng train_rng(derive_seed(seed, "synthetic", 0));
  Rng val_rng(derive_seed(seed, "synthetic", 1));
  DatasetSplits out;
  out.train = generate_split(task, p, p.train_size, train_rng);
  out.val = generate_split(task, p, p.val_size, val_rng);
  return out;
}

namespace {

void save_split(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ostringstream csv;
  csv << "filename,label\n";
  const Shape shape{ds.channels, ds.image_side, ds.image_side};
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const std::string name = fmt::format("{:06d}.ssft", i);
    auto img = ds.image(i);
    save_tensor_file(Tensor<float>(shape, std::vector<float>(img.begin(), img.end())), dir / name);
    csv << name << ',' << ds.labels[i] << '\n';
  }
  const std::string text = csv.str();
  write_file_bytes(dir / "labels.csv",
                   std::as_bytes(std::span<const char>(text.data(), text.size())));
}

}  // namespace

void save_dataset(const DatasetSplits& splits, const std::filesystem::path& dir,
                  const nlohmann::json& info) {
  nlohmann::json meta = info;
  meta["num_classes"] = splits.train.num_classes;
  meta["image_side"] = splits.train.image_side;
  meta["channels"] = splits.train.channels;
  meta["train_size"] = splits.train.size();
  meta["val_size"] = splits.val.size();
  save_split(splits.train, dir / "train");
  save_split(splits.val, dir / "val");
  const std::string text = meta.dump(2) + "\n";
  write_file_bytes(dir / "dataset.json", std::as_bytes(std::span<const char>(text.data(), text.size())));
}

Dataset load_split(const std::filesystem::path& split_dir, std::size_t num_classes) {
  std::ifstream in(split_dir / "labels.csv");
  if (!in) throw FormatError(fmt::format("cannot open {}", (split_dir / "labels.csv").string()));
  Dataset ds;
  ds.num_classes = num_classes;
  std::string line;
  std::getline(in, line);
  if (line.rfind("filename,label", 0) != 0) {
    throw FormatError(fmt::format("{}: missing 'filename,label' header", (split_dir / "labels.csv").string()));
  }
  bool first = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto comma = line.rfind(',');
    if (comma == std::string::npos) throw FormatError(fmt::format("bad labels.csv row '{}'", line));
    int label = 0;
    try {
      label = std::stoi(line.substr(comma + 1));
    } catch (const std::exception&) {
      throw FormatError(fmt::format("bad label in row '{}'", line));
    }
    Tensor<float> img = load_tensor_file(split_dir / line.substr(0, comma));
    if (img.rank() != 3 || img.extent(1) != img.extent(2)) {
      throw FormatError(fmt::format("image {} has shape {}, expected [C,S,S]", line.substr(0, comma),
                                    shape_str(img.shape())));
    }
    if (first) {
      ds.channels = img.extent(0);
      ds.image_side = img.extent(1);
      first = false;
    }
    ds.push(img.data(), label);
  }
  ds.validate();
  return ds;
}

DatasetSplits load_dataset(const std::filesystem::path& dir) {
  const auto bytes = read_file_bytes(dir / "dataset.json");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(std::string(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(fmt::format("{}: {}", (dir / "dataset.json").string(), e.what()));
  }
  const std::size_t classes = meta.at("num_classes").get<std::size_t>();
  return DatasetSplits{load_split(dir / "train", classes), load_split(dir / "val", classes)};
}

namespace {

Dataset truncate(Dataset ds, std::size_t limit, const char* split) {
  if (limit == 0) return ds;
  if (limit > ds.size()) {
    throw ConfigError(fmt::format("{} split has {} samples, {} requested", split, ds.size(), limit));
  }
  ds.labels.resize(limit);
  ds.pixels.resize(limit * ds.image_numel());
  return ds;
}

}  // namespace

DatasetSplits load(const DatasetSpec& spec) {
  DatasetSplits splits = spec.source == DatasetSpec::Source::synthetic
                             ? generate_synthetic(spec.task, spec.params, spec.seed)
                             : load_dataset(spec.path);
  splits.train = truncate(std::move(splits.train), spec.train_limit, "train");
  splits.val = truncate(std::move(splits.val), spec.val_limit, "val");
  return splits;
}

}  // namespace ssf
