// Copyright (c) 2026 The SSF-PEFT Authors
// SPDX-License-Identifier: Apache-2.0

#include "ssf/vit.h"

#include <cmath>

#include <fmt/format.h>

#include "ssf/ops.h"
#include "ssf/rng.h"

namespace ssf {

namespace pn = param_names;

std::vector<std::pair<std::string, Shape>> backbone_layout(const ModelConfig& cfg) {
  const std::size_t d = cfg.dim;
  const std::size_t h = cfg.mlp_hidden();
  std::vector<std::pair<std::string, Shape>> layout = {
      {std::string(pn::kPatchWeight), {d, cfg.patch_dim()}},
      {std::string(pn::kPatchBias), {d}},
      {std::string(pn::kClsToken), {1, d}},
      {std::string(pn::kPosEmbed), {cfg.tokens(), d}},
  };
  for (std::size_t l = 0; l < cfg.depth; ++l) {
    layout.emplace_back(pn::block(l, "ln1.weight"), Shape{d});
    layout.emplace_back(pn::block(l, "ln1.bias"), Shape{d});
    layout.emplace_back(pn::block(l, "attn.qkv.weight"), Shape{3 * d, d});
    layout.emplace_back(pn::block(l, "attn.qkv.bias"), Shape{3 * d});
    layout.emplace_back(pn::block(l, "attn.proj.weight"), Shape{d, d});
    layout.emplace_back(pn::block(l, "attn.proj.bias"), Shape{d});
    layout.emplace_back(pn::block(l, "ln2.weight"), Shape{d});
    layout.emplace_back(pn::block(l, "ln2.bias"), Shape{d});
    layout.emplace_back(pn::block(l, "mlp.fc1.weight"), Shape{h, d});
    layout.emplace_back(pn::block(l, "mlp.fc1.bias"), Shape{h});
    layout.emplace_back(pn::block(l, "mlp.fc2.weight"), Shape{d, h});
    layout.emplace_back(pn::block(l, "mlp.fc2.bias"), Shape{d});
  }
  layout.emplace_back(std::string(pn::kNormWeight), Shape{d});
  layout.emplace_back(std::string(pn::kNormBias), Shape{d});
  layout.emplace_back(std::string(pn::kHeadWeight), Shape{cfg.num_classes, d});
  layout.emplace_back(std::string(pn::kHeadBias), Shape{cfg.num_classes});
  return layout;
}

template <typename T>
Model<T> build_model(const ModelConfig& cfg) {
  LayerGraph graph = build_graph(cfg);
  Rng rng(derive_seed(cfg.seed, "backbone-init"));
  ParamStore<T> params;
  for (auto& [name, shape] : backbone_layout(cfg)) {
    Tensor<T> t(shape);
    const bool is_bias = name.ends_with(".bias");
    const bool is_ln_gain = name.ends_with("ln1.weight") || name.ends_with("ln2.weight") ||
                            name == pn::kNormWeight;
    if (is_ln_gain) {
      for (T& v : t.mutable_data()) v = T{1};
    } else if (!is_bias) {
      for (T& v : t.mutable_data()) v = static_cast<T>(rng.trunc_normal(0.0, 0.02));
    }
    params.add(name, std::move(t));
  }
  return Model<T>{cfg, std::move(graph), std::move(params)};
}

template <typename T>
Model<T> model_from_params(const ModelConfig& cfg, ParamStore<T> params) {
  LayerGraph graph = build_graph(cfg);
  for (const auto& [name, shape] : backbone_layout(cfg)) {
    if (!params.contains(name)) {
      throw ConfigError(fmt::format("parameters lack backbone tensor '{}'", name));
    }
    if (params.at(name).shape() != shape) {
      throw ShapeError(fmt::format("parameter '{}' has shape {}, expected {}", name,
                                   shape_str(params.at(name).shape()), shape_str(shape)));
    }
  }
  return Model<T>{cfg, std::move(graph), std::move(params)};
}

double attention_scale(const ModelConfig& cfg) {
  const double width = cfg.eq1_literal ? static_cast<double>(cfg.dim)
                                       : static_cast<double>(cfg.head_dim());
  return 1.0 / std::sqrt(width);
}

template <typename T>
Tensor<T> attention_core(const Tensor<T>& qkv, std::size_t heads, double logit_scale) {
  if (qkv.rank() != 3 || qkv.last_extent() % 3 != 0) {
    throw ShapeError("attention expects qkv[B,T,3d], got " + shape_str(qkv.shape()));
  }
  const std::size_t d = qkv.last_extent() / 3;
  if (heads == 0 || d % heads != 0) {
    throw ShapeError(fmt::format("attention width {} is not divisible by {} heads", d, heads));
  }
  auto q = ops::split_heads(ops::narrow_last(qkv, 0, d), heads);
  auto k = ops::split_heads(ops::narrow_last(qkv, d, d), heads);
  auto v = ops::split_heads(ops::narrow_last(qkv, 2 * d, d), heads);
  auto scores = ops::scale(ops::matmul(q, k, /*transpose_b=*/true), logit_scale);
  auto attn = ops::softmax_rows(scores);
  return ops::merge_heads(ops::matmul(attn, v), heads);
}

template <typename T>
Tensor<T> attention_block(const Tensor<T>& x, const Tensor<T>& w_qkv, const Tensor<T>& b_qkv,
                          const Tensor<T>& w_out, const Tensor<T>& b_out, std::size_t heads,
                          double logit_scale) {
  auto qkv = ops::linear(x, w_qkv, b_qkv);
  return ops::linear(attention_core(qkv, heads, logit_scale), w_out, b_out);
}

template <typename T>
Tensor<T> forward(const Model<T>& model, const Tensor<T>& images, const Hooks<T>& hooks) {
  const ModelConfig& cfg = model.config;
  const ParamStore<T>& p = model.params;
  if (images.rank() != 4 || images.extent(1) != cfg.channels || images.extent(2) != cfg.image_side ||
      images.extent(3) != cfg.image_side) {
    throw ShapeError(fmt::format("images {} do not match model input [B,{},{},{}]",
                                 shape_str(images.shape()), cfg.channels, cfg.image_side,
                                 cfg.image_side));
  }
  for (const auto& [id, fn] : hooks.sites) {
    if (model.graph.find(id) == nullptr) throw GraphError(fmt::format("hook on unknown site '{}'", id));
  }
  if (hooks.deep_prompts && hooks.prompts.size() != cfg.depth) {
    throw ConfigError(fmt::format("deep prompts need one tensor per block ({}), got {}", cfg.depth,
                                  hooks.prompts.size()));
  }
  if (!hooks.deep_prompts && hooks.prompts.size() > 1) {
    throw ConfigError("shallow prompts take a single tensor");
  }

  auto site = [&](std::string_view id, Tensor<T> out) {
    auto it = hooks.sites.find(id);
    return it == hooks.sites.end() ? out : it->second(out);
  };

  const std::size_t batch = images.extent(0);
  const std::size_t tokens = cfg.tokens();
  const double logit_scale = attention_scale(cfg);

  auto x = ops::linear(ops::patchify(images, cfg.patch_side), p.at(pn::kPatchWeight),
                       p.at(pn::kPatchBias));
  x = site("embed", x);
  x = ops::concat_tokens(p.at(pn::kClsToken), x);
  x = ops::add_broadcast(x, p.at(pn::kPosEmbed));
  if (!hooks.prompts.empty() && !hooks.deep_prompts) {
    x = ops::concat_tokens(x, hooks.prompts.front());
  }

  for (std::size_t l = 0; l < cfg.depth; ++l) {
    auto id = [l](std::string_view leaf) { return fmt::format("blocks.{}.{}", l, leaf); };
    auto w = [&](std::string_view leaf) -> const Tensor<T>& { return p.at(pn::block(l, leaf)); };
    if (hooks.deep_prompts) {
      x = ops::concat_tokens(l == 0 ? x : ops::slice_tokens(x, 0, tokens), hooks.prompts[l]);
    }
    auto h = site(id("ln1"), ops::layernorm(x, w("ln1.weight"), w("ln1.bias")));
    auto qkv = site(id("qkv"), ops::linear(h, w("attn.qkv.weight"), w("attn.qkv.bias")));
    auto attn = attention_core(qkv, cfg.heads, logit_scale);
    auto proj = site(id("attn_proj"), ops::linear(attn, w("attn.proj.weight"), w("attn.proj.bias")));
    x = ops::add(x, proj);
    h = site(id("ln2"), ops::layernorm(x, w("ln2.weight"), w("ln2.bias")));
    auto f = site(id("fc1"), ops::linear(h, w("mlp.fc1.weight"), w("mlp.fc1.bias")));
    f = ops::gelu(f);
    f = site(id("fc2"), ops::linear(f, w("mlp.fc2.weight"), w("mlp.fc2.bias")));
    x = ops::add(x, f);
  }

  x = site("final_ln", ops::layernorm(x, p.at(pn::kNormWeight), p.at(pn::kNormBias)));
  auto cls = ops::reshape(ops::slice_tokens(x, 0, 1), Shape{batch, cfg.dim});
  return site("head", ops::linear(cls, p.at(pn::kHeadWeight), p.at(pn::kHeadBias)));
}

#define SSF_INSTANTIATE_VIT(T)                                                                   \
  template Model<T> build_model<T>(const ModelConfig&);                                          \
  template Model<T> model_from_params<T>(const ModelConfig&, ParamStore<T>);                     \
  template Tensor<T> forward<T>(const Model<T>&, const Tensor<T>&, const Hooks<T>&);             \
  template Tensor<T> attention_core<T>(const Tensor<T>&, std::size_t, double);                   \
  template Tensor<T> attention_block<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,    \
                                        const Tensor<T>&, const Tensor<T>&, std::size_t, double);

SSF_INSTANTIATE_VIT(float)
SSF_INSTANTIATE_VIT(double)

#undef SSF_INSTANTIATE_VIT

}  // namespace ssf
