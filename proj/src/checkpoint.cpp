// Copyright (c) 2026 The SSF-PEFT Authors
// SPDX-License-Identifier: Apache-2.0

#include "ssf/checkpoint.h"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>

#include <fmt/format.h>

#include "ssf/hash.h"

namespace ssf {
namespace {

static_assert(sizeof(float) == 4);

std::size_t align_up(std::size_t n) {
  return (n + kTensorAlignment - 1) / kTensorAlignment * kTensorAlignment;
}

void put_u64_le(std::vector<std::byte>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::byte>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64_le(std::span<const std::byte> in) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(in[i]) << (8 * i);
  return v;
}

void put_f32_le(std::byte* dst, float value) {
  const auto bits = std::bit_cast<std::uint32_t>(value);
  for (int i = 0; i < 4; ++i) dst[i] = static_cast<std::byte>((bits >> (8 * i)) & 0xff);
}

float get_f32_le(const std::byte* src) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(src[i]) << (8 * i);
  return std::bit_cast<float>(bits);
}

struct NamedTensor {
  std::string name;
  const Tensor<float>* tensor;
  bool frozen;
};

std::vector<std::byte> encode(nlohmann::json manifest, const std::vector<NamedTensor>& tensors) {
  nlohmann::json entries = nlohmann::json::array();
  std::size_t offset = 0;
  for (const NamedTensor& nt : tensors) {
    const std::size_t nbytes = nt.tensor->numel() * sizeof(float);
    entries.push_back({{"name", nt.name},
                       {"dtype", "f32"},
                       {"shape", nt.tensor->shape()},
                       {"frozen", nt.frozen},
                       {"offset", offset},
                       {"nbytes", nbytes}});
    offset = align_up(offset + nbytes);
  }
  manifest["tensors"] = std::move(entries);
  const std::string text = manifest.dump();

  std::vector<std::byte> out;
  for (char c : kCheckpointMagic) out.push_back(static_cast<std::byte>(c));
  put_u64_le(out, text.size());
  for (char c : text) out.push_back(static_cast<std::byte>(c));
  out.resize(align_up(out.size()), std::byte{0});
  const std::size_t payload = out.size();
  out.resize(payload + offset, std::byte{0});
  std::size_t cursor = 0;
  for (const NamedTensor& nt : tensors) {
    std::byte* dst = out.data() + payload + cursor;
    auto values = nt.tensor->data();
    for (std::size_t i = 0; i < values.size(); ++i) put_f32_le(dst + 4 * i, values[i]);
    cursor = align_up(cursor + values.size() * sizeof(float));
  }
  return out;
}

struct Decoded {
  nlohmann::json manifest;
  std::vector<std::tuple<std::string, Tensor<float>, bool>> tensors;
};

Decoded decode(std::span<const std::byte> bytes) {
  const std::size_t magic_len = kCheckpointMagic.size();
  if (bytes.size() < magic_len + 8 ||
      std::memcmp(bytes.data(), kCheckpointMagic.data(), magic_len) != 0) {
    throw FormatError("missing SSFCKPT1 magic");
  }
  const std::uint64_t manifest_len = get_u64_le(bytes.subspan(magic_len, 8));
  const std::size_t manifest_start = magic_len + 8;
  if (manifest_len > bytes.size() - manifest_start) {
    throw FormatError("manifest length exceeds file size");
  }
  Decoded out;
  try {
    const auto* first = reinterpret_cast<const char*>(bytes.data() + manifest_start);
    out.manifest = nlohmann::json::parse(first, first + manifest_len);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("manifest is not valid JSON: ") + e.what());
  }
  const std::size_t payload = align_up(manifest_start + manifest_len);
  try {
    if (out.manifest.at("format_version").get<int>() != kCheckpointFormatVersion) {
      throw FormatError("unsupported format version " + out.manifest.at("format_version").dump());
    }
    for (const auto& entry : out.manifest.at("tensors")) {
      const auto name = entry.at("name").get<std::string>();
      if (entry.at("dtype").get<std::string>() != "f32") {
        throw FormatError(fmt::format("tensor '{}' has unsupported dtype", name));
      }
      const auto shape = entry.at("shape").get<Shape>();
      const auto offset = entry.at("offset").get<std::size_t>();
      const auto nbytes = entry.at("nbytes").get<std::size_t>();
      if (shape.empty() || shape_numel(shape) * sizeof(float) != nbytes) {
        throw FormatError(fmt::format("tensor '{}' shape and nbytes disagree", name));
      }
      if (offset % kTensorAlignment != 0 || payload + offset + nbytes > bytes.size()) {
        throw FormatError(fmt::format("tensor '{}' has an invalid offset", name));
      }
      std::vector<float> values(nbytes / sizeof(float));
      const std::byte* src = bytes.data() + payload + offset;
      for (std::size_t i = 0; i < values.size(); ++i) values[i] = get_f32_le(src + 4 * i);
      out.tensors.emplace_back(name, Tensor<float>(shape, std::move(values)),
                               entry.at("frozen").get<bool>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed manifest: ") + e.what());
  } catch (const ShapeError& e) {
    throw FormatError(std::string("malformed tensor: ") + e.what());
  }
  return out;
}

}  // namespace

nlohmann::json model_config_to_json(const ModelConfig& cfg) {
  return {{"image_side", cfg.image_side}, {"patch_side", cfg.patch_side},
          {"channels", cfg.channels},     {"dim", cfg.dim},
          {"depth", cfg.depth},           {"heads", cfg.heads},
          {"mlp_ratio", cfg.mlp_ratio},   {"num_classes", cfg.num_classes},
          {"seed", cfg.seed},             {"eq1_literal", cfg.eq1_literal}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  try {
    cfg.image_side = j.at("image_side").get<std::size_t>();
    cfg.patch_side = j.at("patch_side").get<std::size_t>();
    cfg.channels = j.value("channels", std::size_t{3});
    cfg.dim = j.at("dim").get<std::size_t>();
    cfg.depth = j.at("depth").get<std::size_t>();
    cfg.heads = j.at("heads").get<std::size_t>();
    cfg.mlp_ratio = j.value("mlp_ratio", 4.0);
    cfg.num_classes = j.at("num_classes").get<std::size_t>();
    cfg.seed = j.value("seed", std::uint64_t{0});
    cfg.eq1_literal = j.value("eq1_literal", false);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid model config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

std::vector<std::byte> serialize_checkpoint(const Checkpoint& ckpt) {
  nlohmann::json manifest;
  manifest["format_version"] = kCheckpointFormatVersion;
  manifest["kind"] = "checkpoint";
  manifest["metadata"] = {{"model", model_config_to_json(ckpt.meta.model)},
                          {"method", ckpt.meta.method},
                          {"provenance", ckpt.meta.provenance}};
  std::vector<NamedTensor> tensors;
  for (const auto& [name, e] : ckpt.params) tensors.push_back({name, &e.value, e.frozen});
  return encode(std::move(manifest), tensors);
}

Checkpoint deserialize_checkpoint(std::span<const std::byte> bytes) {
  Decoded d = decode(bytes);
  if (d.manifest.value("kind", std::string()) != "checkpoint") {
    throw FormatError("file is not a checkpoint");
  }
  Checkpoint ckpt;
  try {
    const auto& meta = d.manifest.at("metadata");
    ckpt.meta.model = model_config_from_json(meta.at("model"));
    ckpt.meta.method = meta.at("method");
    ckpt.meta.provenance = meta.at("provenance").get<std::map<std::string, std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed checkpoint metadata: ") + e.what());
  }
  for (auto& [name, tensor, frozen] : d.tensors) {
    if (ckpt.params.contains(name)) throw FormatError("duplicate tensor '" + name + "'");
    ckpt.params.add(name, std::move(tensor), frozen);
  }
  return ckpt;
}

std::vector<std::byte> serialize_tensor(const Tensor<float>& tensor) {
  nlohmann::json manifest;
  manifest["format_version"] = kCheckpointFormatVersion;
  manifest["kind"] = "tensor";
  return encode(std::move(manifest), {NamedTensor{"tensor", &tensor, true}});
}

Tensor<float> deserialize_tensor(std::span<const std::byte> bytes) {
  Decoded d = decode(bytes);
  if (d.manifest.value("kind", std::string()) != "tensor" || d.tensors.size() != 1) {
    throw FormatError("file is not a single-tensor file");
  }
  return std::get<1>(d.tensors.front());
}

std::vector<std::byte> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::vector<std::byte> out(raw.size());
  std::memcpy(out.data(), raw.data(), raw.size());
  return out;
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::byte> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed for " + path.string());
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  write_file_bytes(path, serialize_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(read_file_bytes(path));
}

void save_tensor_file(const Tensor<float>& tensor, const std::filesystem::path& path) {
  write_file_bytes(path, serialize_tensor(tensor));
}

Tensor<float> load_tensor_file(const std::filesystem::path& path) {
  return deserialize_tensor(read_file_bytes(path));
}

template <typename T>
std::string tensor_digest(const Tensor<T>& t) {
  return sha256_of_values<T>(t.data());
}

template std::string tensor_digest<float>(const Tensor<float>&);
template std::string tensor_digest<double>(const Tensor<double>&);

}  // namespace ssf
