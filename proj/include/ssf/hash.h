// Copyright (c) 2026 The SSF-PEFT Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>

namespace ssf {

/// Lowercase hex SHA-256 digest.
std::string sha256_hex(std::span<const std::byte> bytes);
std::string sha256_hex(std::string_view text);

template <typename T>
std::string sha256_of_values(std::span<const T> values) {
  return sha256_hex(std::as_bytes(values));
}

}  // namespace ssf
