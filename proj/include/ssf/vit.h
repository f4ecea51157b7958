// Copyright (c) 2026 The SSF-PEFT Authors
// SPDX-License-Identifier: Apache-2.0
//
// ViT-style encoder: patch embed, L pre-norm transformer blocks, final norm,
// linear head on the class token.

#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "ssf/model_config.h"
#include "ssf/param_store.h"
#include "ssf/tensor.h"

namespace ssf {

template <typename T>
using SiteHook = std::function<Tensor<T>(const Tensor<T>&)>;

/// Modifications applied during forward. Each site hook replaces the site's
/// output. prompts: empty for none; one tensor[n,d] appended once after the
/// embedding (shallow); or one per block, replacing the prompt slots at each
/// block input (deep).
template <typename T>
struct Hooks {
  std::map<std::string, SiteHook<T>, std::less<>> sites;
  std::vector<Tensor<T>> prompts;
  bool deep_prompts = false;
};

template <typename T>
struct Model {
  ModelConfig config;
  LayerGraph graph;
  ParamStore<T> params;
};

/// Deterministic init from cfg.seed: truncated-normal (std 0.02) weights and
/// token embeddings, zero biases, unit LayerNorm gains.
template <typename T>
Model<T> build_model(const ModelConfig& cfg);

/// Reassembles a model around existing parameters; checks every backbone
/// tensor is present with the expected shape.
template <typename T>
Model<T> model_from_params(const ModelConfig& cfg, ParamStore<T> params);

/// images[B,C,H,W] -> logits[B,num_classes].
template <typename T>
Tensor<T> forward(const Model<T>& model, const Tensor<T>& images, const Hooks<T>& hooks = {});

/// Multi-head self-attention on already projected qkv[B,T,3d] ([q|k|v] along
/// the last axis), returning the merged heads [B,T,d] before the output projection.
template <typename T>
Tensor<T> attention_core(const Tensor<T>& qkv, std::size_t heads, double logit_scale);

/// linear -> attention_core -> linear.
template <typename T>
Tensor<T> attention_block(const Tensor<T>& x, const Tensor<T>& w_qkv, const Tensor<T>& b_qkv,
                          const Tensor<T>& w_out, const Tensor<T>& b_out, std::size_t heads,
                          double logit_scale);

/// 1/√(d/heads), or 1/√d when cfg.eq1_literal.
double attention_scale(const ModelConfig& cfg);

/// Expected (name, shape) of every backbone tensor including the head.
std::vector<std::pair<std::string, Shape>> backbone_layout(const ModelConfig& cfg);

}  // namespace ssf
