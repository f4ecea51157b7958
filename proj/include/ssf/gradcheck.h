// Copyright (c) 2026 The SSF-PEFT Authors
// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference verification of the reverse-mode gradients. Each case
// reduces its output to L = Σ out ⊙ R with a fixed random R and compares the
// tape gradient (in the requested dtype) against a five-point central
// difference evaluated in double precision.

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "ssf/train.h"

namespace ssf {

struct GradCheckCase {
  std::string name;
  std::size_t instances = 0;
  /// max over instances and inputs of ‖analytic − numeric‖∞ / ‖numeric‖∞;
  /// directional cases divide by the analytic gradient norm instead
  double max_rel_err = 0.0;
};

struct GradCheckReport {
  DType dtype = DType::f64;
  double tolerance = 0.0;
  std::vector<GradCheckCase> cases;

  double max_rel_err() const;
  bool passed() const { return max_rel_err() <= tolerance; }
  nlohmann::json to_json() const;
};

/// Default pass threshold per dtype: 1e-4 for f32, 1e-7 for f64.
double grad_check_tolerance(DType dtype);

/// Cases: ssf_ada, linear, layernorm, gelu, softmax, attention_core,
/// attention_block, adapter, cross_entropy and the SSF-attached toy model end
/// to end (checked along one random direction per tensor).
GradCheckReport run_grad_check(std::uint64_t seed, DType dtype, std::size_t instances = 30);

}  // namespace ssf
