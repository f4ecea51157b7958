// Copyright (c) 2026 The SSF-PEFT Authors
// SPDX-License-Identifier: Apache-2.0
//
// On-disk layout, shared by checkpoints and single-tensor (.ssft) files:
//
//   "SSFCKPT1" | u64 LE manifest length | UTF-8 JSON manifest | zero pad to 64
//   | tensor payloads, raw little-endian f32, each starting at a 64-byte
//     aligned offset relative to the payload start
//
// The manifest lists {name, dtype, shape, frozen, offset, nbytes} per tensor
// in name order, plus format version and metadata.

#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "ssf/model_config.h"
#include "ssf/param_store.h"

namespace ssf {

inline constexpr std::string_view kCheckpointMagic = "SSFCKPT1";
inline constexpr int kCheckpointFormatVersion = 1;
inline constexpr std::size_t kTensorAlignment = 64;

struct CheckpointMeta {
  ModelConfig model;
  /// Fine-tuning method the tensors belong to (see MethodConfig).
  nlohmann::json method = nlohmann::json::object();
  /// Free-form origin records, e.g. fold source and plan digests.
  std::map<std::string, std::string> provenance;
};

struct Checkpoint {
  CheckpointMeta meta;
  ParamStore<float> params;
};

std::vector<std::byte> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(std::span<const std::byte> bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::vector<std::byte> serialize_tensor(const Tensor<float>& tensor);
Tensor<float> deserialize_tensor(std::span<const std::byte> bytes);
void save_tensor_file(const Tensor<float>& tensor, const std::filesystem::path& path);
Tensor<float> load_tensor_file(const std::filesystem::path& path);

std::vector<std::byte> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::byte> bytes);

nlohmann::json model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

/// SHA-256 over the raw values of one tensor.
template <typename T>
std::string tensor_digest(const Tensor<T>& t);

}  // namespace ssf
