// Copyright (c) 2026 The SSF-PEFT Authors
// SPDX-License-Identifier: Apache-2.0
//
// Scale-and-shift feature modulation: y = gamma ⊙ x + beta per channel,
// attached after backbone ops whose output comes from a linear or LayerNorm
// affine map.

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ssf/model_config.h"
#include "ssf/param_store.h"
#include "ssf/vit.h"

namespace ssf {

enum class SiteGroup { mlp, attn, embed, norm };

struct SitePolicy {
  enum class Scope { all, first_k_layers, without };
  Scope scope = Scope::all;
  std::size_t k = 0;
  SiteGroup group = SiteGroup::mlp;

  static SitePolicy all() { return {}; }
  static SitePolicy first_k_layers(std::size_t k) { return {Scope::first_k_layers, k, SiteGroup::mlp}; }
  static SitePolicy without(SiteGroup g) { return {Scope::without, 0, g}; }
  bool operator==(const SitePolicy&) const = default;
};

enum class InitScheme { normal, trunc_normal, uniform, constant, random_zero_mean };

enum class Variant { full, no_scale, no_shift, norm_only, scalar_scale };

struct SsfConfig {
  SitePolicy sites;
  InitScheme init = InitScheme::normal;
  Variant variant = Variant::full;
  double init_std = 0.02;
  std::uint64_t seed = 0;
  bool operator==(const SsfConfig&) const = default;
};

/// "all", "first:K", "without:{mlp,attn,embed,norm}".
SitePolicy parse_site_policy(std::string_view text);
std::string to_string(const SitePolicy& policy);
InitScheme parse_init_scheme(std::string_view text);
std::string_view to_string(InitScheme scheme);
Variant parse_variant(std::string_view text);
std::string_view to_string(Variant variant);

/// Sites carrying a scale/shift pair under cfg, in graph order. first_k_layers(k)
/// with k >= 1 selects the embed site, blocks [0, k) and final_ln; k == 0
/// selects nothing. The head is never a site.
std::vector<const Site*> select_sites(const LayerGraph& graph, const SsfConfig& cfg);

std::size_t gamma_length(const Site& site, Variant variant);

/// Closed-form trainable scale/shift count (head excluded).
std::size_t ssf_trainable_count(const LayerGraph& graph, const SsfConfig& cfg);

template <typename T>
Tensor<T> ssf_ada(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta);

/// Draws gamma/beta for the given sites. Pinned factors (gamma under
/// no_scale, beta under no_shift) stay exactly 1 and 0.
template <typename T>
void init_ssf(ParamStore<T>& params, std::span<const Site* const> sites, InitScheme scheme,
              double stddev, std::uint64_t seed, Variant variant = Variant::full);

template <typename T>
struct Attachment {
  Hooks<T> hooks;
  std::vector<std::string> trainable;
  std::vector<std::string> warnings;
};

/// Creates any missing ssf.<site>.gamma/.beta tensors (initialized per cfg),
/// freezes every other tensor except the head, and returns the hooks plus
/// the trainable set.
template <typename T>
Attachment<T> attach(ParamStore<T>& params, const LayerGraph& graph, const SsfConfig& cfg);

}  // namespace ssf
