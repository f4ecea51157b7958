// Copyright (c) 2026 The SSF-PEFT Authors
// SPDX-License-Identifier: Apache-2.0

#include "ssf/reparam.h"

#include <algorithm>
#include <cmath>
#include <set>

#include <fmt/format.h>

#include "ssf/hash.h"
#include "ssf/peft.h"
#include "ssf/rng.h"
#include "ssf/vit.h"

namespace ssf {

namespace pn = param_names;

nlohmann::json FoldPlan::to_json() const {
  nlohmann::json arr = nlohmann::json::array();
  for (const FoldStep& s : steps) {
    arr.push_back({{"site", s.site_id},
                   {"kind", s.kind == FoldKind::linear ? "linear" : "layernorm_affine"},
                   {"weight", s.weight_name},
                   {"bias", s.bias_name}});
  }
  return arr;
}

FoldPlan make_fold_plan(const LayerGraph& graph, const std::vector<std::string>& site_ids) {
  FoldPlan plan;
  std::set<std::string> seen;
  for (const std::string& id : site_ids) {
    const Site* s = graph.find(id);
    if (s == nullptr) throw FoldError(fmt::format("fold plan names unknown site '{}'", id));
    if (s->fold_kind == FoldKind::none) throw FoldError(fmt::format("site '{}' has no fold target", id));
    if (!seen.insert(id).second) throw FoldError(fmt::format("site '{}' planned twice", id));
    plan.steps.push_back({s->id, s->fold_kind, s->weight_name, s->bias_name});
  }
  return plan;
}

template <typename T>
FoldPlan plan_from_params(const ParamStore<T>& params, const LayerGraph& graph) {
  std::vector<std::string> ids;
  for (const Site& s : graph.sites()) {
    if (params.contains(pn::ssf_gamma(s.id)) || params.contains(pn::ssf_beta(s.id))) {
      ids.push_back(s.id);
    }
  }
  return make_fold_plan(graph, ids);
}

namespace {

template <typename T>
void check_factors(std::size_t rows, const Tensor<T>& gamma, const Tensor<T>& beta,
                   const char* what) {
  if (beta.rank() != 1 || beta.extent(0) != rows || gamma.rank() != 1 ||
      (gamma.extent(0) != rows && gamma.extent(0) != 1)) {
    throw FoldError(fmt::format("{}: factors gamma {} beta {} do not match output dim {}", what,
                                shape_str(gamma.shape()), shape_str(beta.shape()), rows));
  }
}

template <typename T>
double gamma_at(const Tensor<T>& gamma, std::size_t c) {
  return static_cast<double>(gamma.data()[gamma.numel() == 1 ? 0 : c]);
}

}  // namespace

template <typename T>
std::pair<Tensor<T>, Tensor<T>> fold_linear(const Tensor<T>& weight, const Tensor<T>& bias,
                                            const Tensor<T>& gamma, const Tensor<T>& beta) {
  if (weight.rank() != 2 || bias.rank() != 1 || bias.extent(0) != weight.extent(0)) {
    throw FoldError(fmt::format("fold_linear: weight {} and bias {} are not a linear layer",
                                shape_str(weight.shape()), shape_str(bias.shape())));
  }
  const std::size_t rows = weight.extent(0);
  const std::size_t cols = weight.extent(1);
  check_factors(rows, gamma, beta, "fold_linear");
  Tensor<T> w(weight.shape());
  Tensor<T> b(bias.shape());
  auto wi = weight.data();
  auto wo = w.mutable_data();
  for (std::size_t c = 0; c < rows; ++c) {
    const double g = gamma_at(gamma, c);
    for (std::size_t j = 0; j < cols; ++j) {
      wo[c * cols + j] = static_cast<T>(g * static_cast<double>(wi[c * cols + j]));
    }
    b.mutable_data()[c] = static_cast<T>(g * static_cast<double>(bias.data()[c]) +
                                         static_cast<double>(beta.data()[c]));
  }
  return {std::move(w), std::move(b)};
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> fold_layernorm(const Tensor<T>& g, const Tensor<T>& b,
                                               const Tensor<T>& gamma, const Tensor<T>& beta) {
  if (g.rank() != 1 || b.shape() != g.shape()) {
    throw FoldError(fmt::format("fold_layernorm: gain {} and bias {} differ",
                                shape_str(g.shape()), shape_str(b.shape())));
  }
  const std::size_t d = g.extent(0);
  check_factors(d, gamma, beta, "fold_layernorm");
  Tensor<T> g2(g.shape());
  Tensor<T> b2(b.shape());
  for (std::size_t c = 0; c < d; ++c) {
    const double s = gamma_at(gamma, c);
    g2.mutable_data()[c] = static_cast<T>(s * static_cast<double>(g.data()[c]));
    b2.mutable_data()[c] =
        static_cast<T>(s * static_cast<double>(b.data()[c]) + static_cast<double>(beta.data()[c]));
  }
  return {std::move(g2), std::move(b2)};
}

template <typename T>
ParamStore<T> fold_params(const ParamStore<T>& params, const FoldPlan& plan) {
  std::set<std::string, std::less<>> planned;
  for (const FoldStep& step : plan.steps) {
    const std::string g = pn::ssf_gamma(step.site_id);
    const std::string b = pn::ssf_beta(step.site_id);
    if (!params.contains(g) || !params.contains(b)) {
      throw FoldError(fmt::format("site '{}' is planned but its scale/shift tensors are missing",
                                  step.site_id));
    }
    planned.insert(g);
    planned.insert(b);
  }
  bool any_ssf = false;
  for (const auto& [name, e] : params) {
    if (!pn::is_ssf(name)) continue;
    any_ssf = true;
    if (!planned.contains(name)) {
      throw FoldError(fmt::format("'{}' is not covered by the fold plan; refusing a partial fold", name));
    }
  }
  if (!any_ssf || plan.steps.empty()) {
    throw FoldError("nothing to fold: parameters carry no ssf.* tensors");
  }

  ParamStore<T> out;
  for (const auto& [name, e] : params) {
    if (!pn::is_ssf(name)) out.add(name, e.value.clone(), false);
  }
  for (const FoldStep& step : plan.steps) {
    const Tensor<T>& gamma = params.at(pn::ssf_gamma(step.site_id));
    const Tensor<T>& beta = params.at(pn::ssf_beta(step.site_id));
    if (!out.contains(step.weight_name) || !out.contains(step.bias_name)) {
      throw FoldError(fmt::format("fold target of '{}' ({}, {}) is missing", step.site_id,
                                  step.weight_name, step.bias_name));
    }
    auto [w, b] = step.kind == FoldKind::linear
                      ? fold_linear(out.at(step.weight_name), out.at(step.bias_name), gamma, beta)
                      : fold_layernorm(out.at(step.weight_name), out.at(step.bias_name), gamma, beta);
    out.erase(step.weight_name);
    out.erase(step.bias_name);
    out.add(step.weight_name, std::move(w), false);
    out.add(step.bias_name, std::move(b), false);
  }
  return out;
}

Checkpoint fold_checkpoint(const Checkpoint& train, const FoldPlan& plan) {
  // The fold itself runs in double; the result is rounded to f32 once.
  ParamStore<double> folded = fold_params(train.params.cast<double>(), plan);
  Checkpoint out;
  out.meta.model = train.meta.model;
  out.meta.method = method_to_json(MethodConfig{Method::full});
  out.meta.provenance = train.meta.provenance;
  out.meta.provenance["fold_source_sha256"] = sha256_hex(std::span<const std::byte>(serialize_checkpoint(train)));
  out.meta.provenance["fold_plan_sha256"] = sha256_hex(plan.to_json().dump());
  out.meta.provenance["folded_from_method"] = train.meta.method.dump();
  out.params = folded.cast<float>();
  return out;
}

Checkpoint fold_checkpoint(const Checkpoint& train) {
  return fold_checkpoint(train, plan_from_params(train.params, build_graph(train.meta.model)));
}

template <typename T>
double fold_max_deviation(const Checkpoint& train, std::size_t samples, std::uint64_t seed) {
  const ModelConfig& cfg = train.meta.model;
  Model<T> hooked = model_from_params(cfg, train.params.template cast<T>());
  const MethodBinding<T> binding = bind_method(hooked, method_from_json(train.meta.method), cfg.seed);
  Model<T> folded = model_from_params(
      cfg, fold_params(train.params.template cast<T>(), plan_from_params(train.params, hooked.graph)));
  Rng rng(derive_seed(seed, "fold-verify"));
  double worst = 0.0;
  for (std::size_t done = 0; done < samples;) {
    const std::size_t b = std::min<std::size_t>(10, samples - done);
    Tensor<T> x(Shape{b, cfg.channels, cfg.image_side, cfg.image_side});
    for (T& v : x.mutable_data()) v = static_cast<T>(rng.normal(0.5, 0.5));
    const Tensor<T> a = forward(hooked, x, binding.hooks);
    const Tensor<T> c = forward(folded, x, Hooks<T>{});
    for (std::size_t i = 0; i < a.numel(); ++i) {
      worst = std::max(worst, std::abs(static_cast<double>(a.data()[i]) - static_cast<double>(c.data()[i])));
    }
    done += b;
  }
  return worst;
}

#define REPARAM_INSTANTIATE(T)                                                                   \
  template FoldPlan plan_from_params<T>(const ParamStore<T>&, const LayerGraph&);                \
  template std::pair<Tensor<T>, Tensor<T>> fold_linear<T>(const Tensor<T>&, const Tensor<T>&,    \
                                                          const Tensor<T>&, const Tensor<T>&);   \
  template std::pair<Tensor<T>, Tensor<T>> fold_layernorm<T>(const Tensor<T>&, const Tensor<T>&, \
                                                             const Tensor<T>&, const Tensor<T>&); \
  template ParamStore<T> fold_params<T>(const ParamStore<T>&, const FoldPlan&);                  \
  template double fold_max_deviation<T>(const Checkpoint&, std::size_t, std::uint64_t);

REPARAM_INSTANTIATE(float)
REPARAM_INSTANTIATE(double)

#undef REPARAM_INSTANTIATE

}  // namespace ssf
