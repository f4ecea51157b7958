// Copyright (c) 2026 The SSF-PEFT Authors
// SPDX-License-Identifier: Apache-2.0
//
// Backbone geometry and the graph of named attachment sites.

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace ssf {

struct ModelConfig {
  std::size_t image_side = 16;
  std::size_t patch_side = 4;
  std::size_t channels = 3;
  std::size_t dim = 32;
  std::size_t depth = 2;
  std::size_t heads = 4;
  double mlp_ratio = 4.0;
  std::size_t num_classes = 4;
  std::uint64_t seed = 0;
  /// Scale attention logits by 1/√dim instead of 1/√(dim/heads).
  bool eq1_literal = false;

  /// Throws ConfigError naming the first violated constraint.
  void validate() const;

  std::size_t grid() const { return image_side / patch_side; }
  std::size_t patches() const { return grid() * grid(); }
  /// Patch tokens plus the class token.
  std::size_t tokens() const { return patches() + 1; }
  std::size_t patch_dim() const { return channels * patch_side * patch_side; }
  std::size_t mlp_hidden() const;
  std::size_t head_dim() const { return dim / heads; }

  static ModelConfig toy();
  static ModelConfig vit_b16(std::size_t num_classes);

  bool operator==(const ModelConfig&) const = default;
};

enum class SiteKind { embed, ln1, qkv, attn_proj, ln2, fc1, fc2, final_ln, head };

std::string_view site_kind_name(SiteKind kind);

/// How a site's preceding op absorbs a scale/shift.
enum class FoldKind { none, linear, layernorm_affine };

struct Site {
  std::string id;
  SiteKind kind;
  int layer;  // -1 for global sites
  std::size_t out_dim;
  FoldKind fold_kind;
  std::string weight_name;
  std::string bias_name;
};

class LayerGraph {
 public:
  explicit LayerGraph(std::vector<Site> sites);

  const std::vector<Site>& sites() const { return sites_; }
  std::size_t size() const { return sites_.size(); }
  const Site* find(std::string_view id) const;
  /// Throws GraphError for unknown ids.
  const Site& at(std::string_view id) const;

 private:
  std::vector<Site> sites_;
};

/// Enumerates embed, six sites per block (ln1, qkv, attn_proj, ln2, fc1, fc2),
/// final_ln and head, in forward order.
LayerGraph build_graph(const ModelConfig& cfg);

namespace param_names {
inline constexpr std::string_view kPatchWeight = "patch_embed.weight";
inline constexpr std::string_view kPatchBias = "patch_embed.bias";
inline constexpr std::string_view kClsToken = "cls_token";
inline constexpr std::string_view kPosEmbed = "pos_embed";
inline constexpr std::string_view kNormWeight = "norm.weight";
inline constexpr std::string_view kNormBias = "norm.bias";
inline constexpr std::string_view kHeadWeight = "head.weight";
inline constexpr std::string_view kHeadBias = "head.bias";

std::string block(std::size_t layer, std::string_view leaf);
std::string ssf_gamma(std::string_view site_id);
std::string ssf_beta(std::string_view site_id);
std::string adapter_down(std::size_t layer);
std::string adapter_up(std::size_t layer);
std::string prompts(std::size_t layer);

bool is_ssf(std::string_view name);
bool is_head(std::string_view name);
}  // namespace param_names

/// Closed-form parameter counts of the plain backbone.
std::size_t backbone_param_count(const ModelConfig& cfg);  // excludes the head
std::size_t head_param_count(const ModelConfig& cfg);
/// All 1-D ".bias" tensors of the backbone (linear and LayerNorm), excluding the head.
std::size_t backbone_bias_count(const ModelConfig& cfg);

}  // namespace ssf
