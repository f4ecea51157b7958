// Copyright (c) 2026 The SSF-PEFT Authors
// SPDX-License-Identifier: Apache-2.0
//
// Folding trained scale/shift factors into the op that precedes each site:
//   gamma ⊙ (W t + b) + beta = (gamma ⊙ W) t + (gamma ⊙ b + beta)
// The folded parameters have exactly the plain backbone's structure.

#pragma once

#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "ssf/checkpoint.h"
#include "ssf/model_config.h"
#include "ssf/param_store.h"

namespace ssf {

struct FoldStep {
  std::string site_id;
  FoldKind kind;
  std::string weight_name;
  std::string bias_name;
};

struct FoldPlan {
  std::vector<FoldStep> steps;

  nlohmann::json to_json() const;
};

/// Plan for the given sites. Throws FoldError for unknown sites or sites
/// without a fold target.
FoldPlan make_fold_plan(const LayerGraph& graph, const std::vector<std::string>& site_ids);

/// Plan covering every site that has ssf.* tensors in params.
template <typename T>
FoldPlan plan_from_params(const ParamStore<T>& params, const LayerGraph& graph);

/// W'[c,:] = gamma[c]·W[c,:], b'[c] = gamma[c]·b[c] + beta[c]. A length-1
/// gamma scales every row. Computed in double and rounded once to T.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> fold_linear(const Tensor<T>& weight, const Tensor<T>& bias,
                                            const Tensor<T>& gamma, const Tensor<T>& beta);

/// g' = gamma ⊙ g, b' = gamma ⊙ b + beta.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> fold_layernorm(const Tensor<T>& g, const Tensor<T>& b,
                                               const Tensor<T>& gamma, const Tensor<T>& beta);

/// Returns the backbone with every planned site absorbed and no ssf.*
/// tensors. Refuses partial folds: a planned site missing its factors, an
/// ssf.* tensor outside the plan, or nothing to fold at all.
template <typename T>
ParamStore<T> fold_params(const ParamStore<T>& params, const FoldPlan& plan);

/// fold_params on a checkpoint; the result is tagged method "full" and
/// records the source and plan digests in its provenance.
Checkpoint fold_checkpoint(const Checkpoint& train, const FoldPlan& plan);
Checkpoint fold_checkpoint(const Checkpoint& train);

/// Max |logit(folded) − logit(hooked)| over `samples` random images, with
/// both models evaluated in T.
template <typename T>
double fold_max_deviation(const Checkpoint& train, std::size_t samples, std::uint64_t seed);

}  // namespace ssf
