// Copyright (c) 2026 The SSF-PEFT Authors
// SPDX-License-Identifier: Apache-2.0

#include "ssf/ssf_adapters.h"

#include <charconv>
#include <cmath>
#include <set>

#include <fmt/format.h>

#include "ssf/ops.h"
#include "ssf/rng.h"

namespace ssf {

namespace pn = param_names;

namespace {

std::string_view group_name(SiteGroup g) {
  switch (g) {
    case SiteGroup::mlp: return "mlp";
    case SiteGroup::attn: return "attn";
    case SiteGroup::embed: return "embed";
    case SiteGroup::norm: return "norm";
  }
  return "?";
}

bool in_group(SiteKind kind, SiteGroup g) {
  switch (g) {
    case SiteGroup::mlp: return kind == SiteKind::fc1 || kind == SiteKind::fc2;
    case SiteGroup::attn: return kind == SiteKind::qkv || kind == SiteKind::attn_proj;
    case SiteGroup::embed: return kind == SiteKind::embed;
    case SiteGroup::norm:
      return kind == SiteKind::ln1 || kind == SiteKind::ln2 || kind == SiteKind::final_ln;
  }
  return false;
}

bool pins_gamma(Variant v) { return v == Variant::no_scale; }
bool pins_beta(Variant v) { return v == Variant::no_shift; }

}  // namespace

SitePolicy parse_site_policy(std::string_view text) {
  if (text == "all") return SitePolicy::all();
  if (text.starts_with("first:")) {
    auto digits = text.substr(6);
    std::size_t k = 0;
    auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), k);
    if (ec != std::errc() || ptr != digits.data() + digits.size()) {
      throw ConfigError(fmt::format("bad layer count in site policy '{}'", text));
    }
    return SitePolicy::first_k_layers(k);
  }
  if (text.starts_with("without:")) {
    auto g = text.substr(8);
    for (SiteGroup group : {SiteGroup::mlp, SiteGroup::attn, SiteGroup::embed, SiteGroup::norm}) {
      if (g == group_name(group)) return SitePolicy::without(group);
    }
  }
  throw ConfigError(fmt::format(
      "unknown site policy '{}' (expected all, first:K or without:{{mlp,attn,embed,norm}})", text));
}

std::string to_string(const SitePolicy& policy) {
  switch (policy.scope) {
    case SitePolicy::Scope::all: return "all";
    case SitePolicy::Scope::first_k_layers: return fmt::format("first:{}", policy.k);
    case SitePolicy::Scope::without: return fmt::format("without:{}", group_name(policy.group));
  }
  return "?";
}

InitScheme parse_init_scheme(std::string_view text) {
  for (InitScheme s : {InitScheme::normal, InitScheme::trunc_normal, InitScheme::uniform,
                       InitScheme::constant, InitScheme::random_zero_mean}) {
    if (text == to_string(s)) return s;
  }
  throw ConfigError(fmt::format("unknown init scheme '{}'", text));
}

std::string_view to_string(InitScheme scheme) {
  switch (scheme) {
    case InitScheme::normal: return "normal";
    case InitScheme::trunc_normal: return "trunc_normal";
    case InitScheme::uniform: return "uniform";
    case InitScheme::constant: return "constant";
    case InitScheme::random_zero_mean: return "random_zero_mean";
  }
  return "?";
}

Variant parse_variant(std::string_view text) {
  for (Variant v : {Variant::full, Variant::no_scale, Variant::no_shift, Variant::norm_only,
                    Variant::scalar_scale}) {
    if (text == to_string(v)) return v;
  }
  throw ConfigError(fmt::format("unknown SSF variant '{}'", text));
}

std::string_view to_string(Variant variant) {
  switch (variant) {
    case Variant::full: return "full";
    case Variant::no_scale: return "no_scale";
    case Variant::no_shift: return "no_shift";
    case Variant::norm_only: return "norm_only";
    case Variant::scalar_scale: return "scalar_scale";
  }
  return "?";
}

std::vector<const Site*> select_sites(const LayerGraph& graph, const SsfConfig& cfg) {
  std::vector<const Site*> out;
  for (const Site& s : graph.sites()) {
    if (s.kind == SiteKind::head) continue;
    bool keep = true;
    switch (cfg.sites.scope) {
      case SitePolicy::Scope::all: break;
      case SitePolicy::Scope::first_k_layers:
        keep = cfg.sites.k > 0 && (s.layer < 0 || static_cast<std::size_t>(s.layer) < cfg.sites.k);
        break;
      case SitePolicy::Scope::without: keep = !in_group(s.kind, cfg.sites.group); break;
    }
    if (cfg.variant == Variant::norm_only && !in_group(s.kind, SiteGroup::norm)) keep = false;
    if (keep) out.push_back(&s);
  }
  return out;
}

std::size_t gamma_length(const Site& site, Variant variant) {
  return variant == Variant::scalar_scale ? 1 : site.out_dim;
}

std::size_t ssf_trainable_count(const LayerGraph& graph, const SsfConfig& cfg) {
  std::size_t n = 0;
  for (const Site* s : select_sites(graph, cfg)) {
    if (!pins_gamma(cfg.variant)) n += gamma_length(*s, cfg.variant);
    if (!pins_beta(cfg.variant)) n += s->out_dim;
  }
  return n;
}

template <typename T>
Tensor<T> ssf_ada(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta) {
  return ops::scale_shift_channels(x, gamma, beta);
}

template <typename T>
void init_ssf(ParamStore<T>& params, std::span<const Site* const> sites, InitScheme scheme,
              double stddev, std::uint64_t seed, Variant variant) {
  if (!(stddev >= 0.0)) throw ConfigError("SSF init std must be non-negative");
  Rng rng(derive_seed(seed, "ssf-init"));
  const double half_width = stddev * std::sqrt(3.0);
  auto draw = [&](double mean) -> double {
    switch (scheme) {
      case InitScheme::normal: return rng.normal(mean, stddev);
      case InitScheme::trunc_normal: return rng.trunc_normal(mean, stddev);
      case InitScheme::uniform: return rng.uniform(mean - half_width, mean + half_width);
      case InitScheme::constant: return mean;
      case InitScheme::random_zero_mean: return rng.normal(0.0, stddev);
    }
    return mean;
  };
  for (const Site* s : sites) {
    auto gamma = params.at(pn::ssf_gamma(s->id)).mutable_data();
    auto beta = params.at(pn::ssf_beta(s->id)).mutable_data();
    for (T& g : gamma) g = pins_gamma(variant) ? T{1} : static_cast<T>(draw(1.0));
    for (T& b : beta) b = pins_beta(variant) ? T{0} : static_cast<T>(draw(0.0));
  }
}

template <typename T>
Attachment<T> attach(ParamStore<T>& params, const LayerGraph& graph, const SsfConfig& cfg) {
  Attachment<T> out;
  const auto sites = select_sites(graph, cfg);
  std::set<std::string, std::less<>> expected;
  std::vector<const Site*> fresh;
  for (const Site* s : sites) {
    const std::string g = pn::ssf_gamma(s->id);
    const std::string b = pn::ssf_beta(s->id);
    expected.insert(g);
    expected.insert(b);
    const Shape gshape{gamma_length(*s, cfg.variant)};
    const Shape bshape{s->out_dim};
    if (params.contains(g) != params.contains(b)) {
      throw ConfigError(fmt::format("site '{}' has only one of gamma/beta", s->id));
    }
    if (params.contains(g)) {
      if (params.at(g).shape() != gshape || params.at(b).shape() != bshape) {
        throw ShapeError(fmt::format("SSF factors at '{}' do not match site width {}", s->id,
                                     s->out_dim));
      }
    } else {
      params.add(g, Tensor<T>(gshape, T{1}));
      params.add(b, Tensor<T>(bshape, T{0}));
      fresh.push_back(s);
    }
  }
  for (const auto& name : params.names()) {
    if (pn::is_ssf(name) && !expected.contains(name)) {
      throw ConfigError(fmt::format("'{}' is not covered by site policy {}", name,
                                    to_string(cfg.sites)));
    }
  }
  init_ssf(params, std::span<const Site* const>(fresh), cfg.init, cfg.init_std, cfg.seed,
           cfg.variant);

  for (const auto& name : params.names()) {
    params.set_frozen(name, !pn::is_head(name));
  }
  for (const Site* s : sites) {
    const std::string g = pn::ssf_gamma(s->id);
    const std::string b = pn::ssf_beta(s->id);
    params.set_frozen(g, pins_gamma(cfg.variant));
    params.set_frozen(b, pins_beta(cfg.variant));
    Tensor<T> gamma = params.at(g);
    Tensor<T> beta = params.at(b);
    out.hooks.sites.emplace(s->id, [gamma, beta](const Tensor<T>& x) { return ssf_ada(x, gamma, beta); });
  }
  out.trainable = params.trainable_names();
  if (sites.empty()) {
    out.warnings.push_back(fmt::format(
        "site policy {} selects no SSF sites; training reduces to linear probing",
        to_string(cfg.sites)));
  }
  return out;
}

#define SSF_INSTANTIATE(T)                                                                       \
  template Tensor<T> ssf_ada<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);           \
  template void init_ssf<T>(ParamStore<T>&, std::span<const Site* const>, InitScheme, double,    \
                            std::uint64_t, Variant);                                             \
  template Attachment<T> attach<T>(ParamStore<T>&, const LayerGraph&, const SsfConfig&);

SSF_INSTANTIATE(float)
SSF_INSTANTIATE(double)

#undef SSF_INSTANTIATE

}  // namespace ssf
