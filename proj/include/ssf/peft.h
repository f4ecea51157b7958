// Copyright (c) 2026 The SSF-PEFT Authors
// SPDX-License-Identifier: Apache-2.0
//
// Fine-tuning strategies behind one MethodConfig, and closed-form budget
// accounting (trainable parameters, extra inference parameters and FLOPs).

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "ssf/model_config.h"
#include "ssf/ssf_adapters.h"
#include "ssf/vit.h"

namespace ssf {

enum class Method { full, linear, bias, adapter, vpt_shallow, vpt_deep, ssf };

std::string_view to_string(Method method);
Method parse_method(std::string_view text);

struct MethodConfig {
  Method method = Method::ssf;
  std::size_t adapter_dim = 8;  // d'
  std::size_t prompts = 1;      // n
  SsfConfig ssf;

  /// adapter: 1 <= d' < d; vpt: n >= 1.
  void validate(const ModelConfig& model) const;
  bool operator==(const MethodConfig&) const = default;
};

nlohmann::json method_to_json(const MethodConfig& cfg);
MethodConfig method_from_json(const nlohmann::json& j);

struct BudgetReport {
  std::string method;
  std::size_t total_params = 0;
  std::size_t trainable_params = 0;
  std::size_t extra_train_params = 0;
  std::size_t extra_infer_params = 0;
  std::uint64_t extra_train_flops = 0;
  std::uint64_t extra_infer_flops = 0;
};

/// Evaluated without building the model, so ViT-B/16 geometry is instant.
/// Adapter: 2Ldd' params and 2N²Ldd' FLOPs. VPT-shallow: nd and 2n(2N²+n)d.
/// VPT-deep: nLd and 2n(2N²+n)Ld. SSF: one parameter and one FLOP per token
/// for every trainable factor, none of either after folding.
BudgetReport budget(const MethodConfig& method, const ModelConfig& model);

nlohmann::json budget_to_json(const BudgetReport& report);
std::string format_budget_table(const BudgetReport& report);

/// Bottleneck [W_up·GELU(W_down·xᵀ)]ᵀ; returns the contribution only.
template <typename T>
Tensor<T> adapter_forward(const Tensor<T>& x, const Tensor<T>& w_down, const Tensor<T>& w_up);

/// Token concatenation [x; p].
template <typename T>
Tensor<T> vpt_prepend(const Tensor<T>& x, const Tensor<T>& prompts);

/// Sets frozen flags for every method except ssf (use attach) and returns
/// the trainable names. The head is always trainable.
template <typename T>
std::vector<std::string> freezing_policy(const MethodConfig& method, ParamStore<T>& params);

template <typename T>
struct MethodBinding {
  Hooks<T> hooks;
  std::vector<std::string> trainable;
  std::vector<std::string> warnings;
};

/// Adds the method's extra tensors when absent (adapter down-projections
/// truncated normal 0.02 and zero up-projections; prompts truncated normal
/// 0.02; SSF factors per cfg.ssf), applies the freezing policy and builds the hooks.
template <typename T>
MethodBinding<T> bind_method(Model<T>& model, const MethodConfig& method, std::uint64_t seed);

}  // namespace ssf
