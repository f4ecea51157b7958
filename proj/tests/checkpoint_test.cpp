// Copyright (c) 2026 The SSF-PEFT Authors
// SPDX-License-Identifier: Apache-2.0

#include <cstring>
#include <filesystem>

#include <gtest/gtest.h>

#include "ssf/checkpoint.h"
#include "ssf/errors.h"
#include "ssf/hash.h"
#include "ssf/peft.h"
#include "ssf/rng.h"
#include "ssf/train.h"
#include "support/oracles.h"

namespace {

using namespace ssf;

Checkpoint random_checkpoint(std::uint64_t seed) {
  ModelConfig cfg = ModelConfig::toy();
  cfg.seed = seed;
  Model<float> m = build_model<float>(cfg);
  MethodConfig mc;
  mc.ssf.seed = seed;
  bind_method(m, mc, seed);
  Rng rng(seed);
  for (const auto& [name, e] : m.params) {
    for (float& v : m.params.at(name).mutable_data()) v = static_cast<float>(rng.normal(0.0, 1.0));
  }
  return make_checkpoint(m, mc, {{"origin", "test"}});
}

std::uint64_t read_u64(std::span<const std::byte> bytes, std::size_t at) {
  std::uint64_t v = 0;
  std::memcpy(&v, bytes.data() + at, sizeof v);
  return v;
}

TEST(Checkpoint, RoundTripIsByteIdentical) {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const Checkpoint a = random_checkpoint(seed);
    const auto bytes = serialize_checkpoint(a);
    const Checkpoint b = deserialize_checkpoint(bytes);
    EXPECT_EQ(serialize_checkpoint(b), bytes);
    EXPECT_EQ(b.meta.model, a.meta.model);
    EXPECT_EQ(b.meta.method, a.meta.method);
    EXPECT_EQ(b.meta.provenance, a.meta.provenance);
    ASSERT_EQ(b.params.size(), a.params.size());
    for (const auto& [name, e] : a.params) {
      EXPECT_EQ(b.params.frozen(name), e.frozen) << name;
      EXPECT_EQ(b.params.at(name).shape(), e.value.shape()) << name;
      EXPECT_EQ(oracle::to_vec(b.params.at(name).data()), oracle::to_vec(e.value.data())) << name;
    }
  }
}

TEST(Checkpoint, LayoutHasMagicManifestAndAlignedPayloads) {
  const auto bytes = serialize_checkpoint(random_checkpoint(1));
  ASSERT_GT(bytes.size(), 16u);
  EXPECT_EQ(std::memcmp(bytes.data(), kCheckpointMagic.data(), kCheckpointMagic.size()), 0);
  const std::uint64_t len = read_u64(bytes, 8);
  const std::string text(reinterpret_cast<const char*>(bytes.data() + 16), len);
  const auto manifest = nlohmann::json::parse(text);
  EXPECT_EQ(manifest.at("format_version").get<int>(), kCheckpointFormatVersion);
  const std::size_t payload = (16 + len + kTensorAlignment - 1) / kTensorAlignment * kTensorAlignment;
  EXPECT_EQ(payload % kTensorAlignment, 0u);
  std::size_t seen = 0;
  for (const auto& info : manifest.at("tensors")) {
    const std::size_t offset = info.at("offset").get<std::size_t>();
    EXPECT_EQ(offset % kTensorAlignment, 0u) << info.at("name");
    EXPECT_LE(payload + offset + info.at("nbytes").get<std::size_t>(), bytes.size()) << info.at("name");
    ++seen;
  }
  EXPECT_GT(seen, 0u);
}

TEST(Checkpoint, RejectsBadMagicAndTruncation) {
  auto bytes = serialize_checkpoint(random_checkpoint(2));
  auto bad = bytes;
  bad[0] = std::byte{'X'};
  EXPECT_THROW(deserialize_checkpoint(bad), FormatError);
  for (std::size_t cut : {std::size_t{0}, std::size_t{7}, std::size_t{12}, std::size_t{40}, bytes.size() - 1}) {
    EXPECT_THROW(deserialize_checkpoint(std::span<const std::byte>(bytes.data(), cut)), FormatError) << cut;
  }
  auto corrupt = bytes;
  corrupt[16] = std::byte{'!'};
  EXPECT_THROW(deserialize_checkpoint(corrupt), FormatError);
}

TEST(Checkpoint, FileRoundTripAndDigest) {
  const auto dir = std::filesystem::temp_directory_path() / "ssf_checkpoint_test";
  std::filesystem::create_directories(dir);
  const Checkpoint a = random_checkpoint(3);
  save_checkpoint(a, dir / "a.ckpt");
  const Checkpoint b = load_checkpoint(dir / "a.ckpt");
  save_checkpoint(b, dir / "b.ckpt");
  EXPECT_EQ(read_file_bytes(dir / "a.ckpt"), read_file_bytes(dir / "b.ckpt"));
  EXPECT_THROW(load_checkpoint(dir / "missing.ckpt"), FormatError);
  std::filesystem::remove_all(dir);

  const Tensor<float> t(Shape{2}, std::vector<float>{1.0f, 2.0f});
  EXPECT_EQ(tensor_digest(t), tensor_digest(t.clone()));
  Tensor<float> u = t.clone();
  u.mutable_data()[1] = std::nextafter(2.0f, 3.0f);
  EXPECT_NE(tensor_digest(t), tensor_digest(u));
}

TEST(Checkpoint, SingleTensorFormat) {
  const Tensor<float> t(Shape{3, 2, 2}, std::vector<float>{1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12});
  const auto bytes = serialize_tensor(t);
  const Tensor<float> back = deserialize_tensor(bytes);
  EXPECT_EQ(back.shape(), t.shape());
  EXPECT_EQ(oracle::to_vec(back.data()), oracle::to_vec(t.data()));
  EXPECT_THROW(deserialize_checkpoint(bytes), FormatError);
  EXPECT_THROW(deserialize_tensor(serialize_checkpoint(random_checkpoint(0))), FormatError);
}

TEST(Hash, KnownSha256) {
  EXPECT_EQ(sha256_hex(std::string_view("abc")),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

}  // namespace
