// Copyright (c) 2026 The SSF-PEFT Authors
// SPDX-License-Identifier: Apache-2.0

#include "ssf/model_config.h"

#include <cmath>
#include <unordered_set>

#include <fmt/format.h>

#include "ssf/errors.h"

namespace ssf {

void ModelConfig::validate() const {
  if (image_side == 0 || patch_side == 0) {
    throw ConfigError("image_side and patch_side must be positive");
  }
  if (image_side % patch_side != 0) {
    throw ConfigError(fmt::format("image_side {} is not divisible by patch_side {}", image_side,
                                  patch_side));
  }
  if (channels == 0) throw ConfigError("channels must be positive");
  if (dim == 0 || heads == 0) throw ConfigError("dim and heads must be positive");
  if (dim % heads != 0) {
    throw ConfigError(fmt::format("dim {} is not divisible by heads {}", dim, heads));
  }
  if (depth == 0) throw ConfigError("depth must be at least 1");
  if (num_classes == 0) throw ConfigError("num_classes must be positive");
  const double hidden = mlp_ratio * static_cast<double>(dim);
  if (!(mlp_ratio > 0.0) || std::abs(hidden - std::round(hidden)) > 1e-9) {
    throw ConfigError(fmt::format("mlp_ratio {} times dim {} is not a positive integer width",
                                  mlp_ratio, dim));
  }
}

std::size_t ModelConfig::mlp_hidden() const {
  return static_cast<std::size_t>(std::llround(mlp_ratio * static_cast<double>(dim)));
}

ModelConfig ModelConfig::toy() { return ModelConfig{}; }

ModelConfig ModelConfig::vit_b16(std::size_t num_classes) {
  ModelConfig cfg;
  cfg.image_side = 224;
  cfg.patch_side = 16;
  cfg.dim = 768;
  cfg.depth = 12;
  cfg.heads = 12;
  cfg.num_classes = num_classes;
  return cfg;
}

std::string_view site_kind_name(SiteKind kind) {
  switch (kind) {
    case SiteKind::embed: return "embed";
    case SiteKind::ln1: return "ln1";
    case SiteKind::qkv: return "qkv";
    case SiteKind::attn_proj: return "attn_proj";
    case SiteKind::ln2: return "ln2";
    case SiteKind::fc1: return "fc1";
    case SiteKind::fc2: return "fc2";
    case SiteKind::final_ln: return "final_ln";
    case SiteKind::head: return "head";
  }
  return "?";
}

LayerGraph::LayerGraph(std::vector<Site> sites) : sites_(std::move(sites)) {
  std::unordered_set<std::string> seen;
  for (const Site& s : sites_) {
    if (!seen.insert(s.id).second) throw GraphError("duplicate site id '" + s.id + "'");
  }
}

const Site* LayerGraph::find(std::string_view id) const {
  for (const Site& s : sites_) {
    if (s.id == id) return &s;
  }
  return nullptr;
}

const Site& LayerGraph::at(std::string_view id) const {
  const Site* s = find(id);
  if (s == nullptr) throw GraphError(fmt::format("unknown site '{}'", id));
  return *s;
}

LayerGraph build_graph(const ModelConfig& cfg) {
  cfg.validate();
  namespace pn = param_names;
  const std::size_t d = cfg.dim;
  std::vector<Site> sites;
  sites.push_back({"embed", SiteKind::embed, -1, d, FoldKind::linear, std::string(pn::kPatchWeight),
                   std::string(pn::kPatchBias)});
  for (std::size_t l = 0; l < cfg.depth; ++l) {
    const int li = static_cast<int>(l);
    auto id = [&](std::string_view leaf) { return fmt::format("blocks.{}.{}", l, leaf); };
    sites.push_back({id("ln1"), SiteKind::ln1, li, d, FoldKind::layernorm_affine,
                     pn::block(l, "ln1.weight"), pn::block(l, "ln1.bias")});
    sites.push_back({id("qkv"), SiteKind::qkv, li, 3 * d, FoldKind::linear,
                     pn::block(l, "attn.qkv.weight"), pn::block(l, "attn.qkv.bias")});
    sites.push_back({id("attn_proj"), SiteKind::attn_proj, li, d, FoldKind::linear,
                     pn::block(l, "attn.proj.weight"), pn::block(l, "attn.proj.bias")});
    sites.push_back({id("ln2"), SiteKind::ln2, li, d, FoldKind::layernorm_affine,
                     pn::block(l, "ln2.weight"), pn::block(l, "ln2.bias")});
    sites.push_back({id("fc1"), SiteKind::fc1, li, cfg.mlp_hidden(), FoldKind::linear,
                     pn::block(l, "mlp.fc1.weight"), pn::block(l, "mlp.fc1.bias")});
    sites.push_back({id("fc2"), SiteKind::fc2, li, d, FoldKind::linear,
                     pn::block(l, "mlp.fc2.weight"), pn::block(l, "mlp.fc2.bias")});
  }
  sites.push_back({"final_ln", SiteKind::final_ln, -1, d, FoldKind::layernorm_affine,
                   std::string(pn::kNormWeight), std::string(pn::kNormBias)});
  sites.push_back({"head", SiteKind::head, -1, cfg.num_classes, FoldKind::none,
                   std::string(pn::kHeadWeight), std::string(pn::kHeadBias)});
  return LayerGraph(std::move(sites));
}

namespace param_names {

std::string block(std::size_t layer, std::string_view leaf) {
  return fmt::format("blocks.{}.{}", layer, leaf);
}
std::string ssf_gamma(std::string_view site_id) { return fmt::format("ssf.{}.gamma", site_id); }
std::string ssf_beta(std::string_view site_id) { return fmt::format("ssf.{}.beta", site_id); }
std::string adapter_down(std::size_t layer) { return fmt::format("adapter.{}.down", layer); }
std::string adapter_up(std::size_t layer) { return fmt::format("adapter.{}.up", layer); }
std::string prompts(std::size_t layer) { return fmt::format("vpt.prompts.{}", layer); }

bool is_ssf(std::string_view name) { return name.starts_with("ssf."); }
bool is_head(std::string_view name) { return name.starts_with("head."); }

}  // namespace param_names

std::size_t backbone_param_count(const ModelConfig& cfg) {
  const std::size_t d = cfg.dim;
  const std::size_t h = cfg.mlp_hidden();
  const std::size_t patch = d * cfg.patch_dim() + d;
  const std::size_t tokens = d + cfg.tokens() * d;
  const std::size_t block = 2 * d                // ln1
                            + 3 * d * d + 3 * d  // qkv
                            + d * d + d          // proj
                            + 2 * d              // ln2
                            + h * d + h          // fc1
                            + d * h + d;         // fc2
  return patch + tokens + cfg.depth * block + 2 * d;
}

std::size_t head_param_count(const ModelConfig& cfg) { return cfg.dim * cfg.num_classes + cfg.num_classes; }

std::size_t backbone_bias_count(const ModelConfig& cfg) {
  const std::size_t d = cfg.dim;
  const std::size_t block = d + 3 * d + d + d + cfg.mlp_hidden() + d;
  return d + cfg.depth * block + d;
}

}  // namespace ssf
