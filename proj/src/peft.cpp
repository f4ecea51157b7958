// Copyright (c) 2026 The SSF-PEFT Authors
// SPDX-License-Identifier: Apache-2.0

#include "ssf/peft.h"

#include <fmt/format.h>

#include "ssf/ops.h"
#include "ssf/rng.h"

namespace ssf {

namespace pn = param_names;

std::string_view to_string(Method method) {
  switch (method) {
    case Method::full: return "full";
    case Method::linear: return "linear";
    case Method::bias: return "bias";
    case Method::adapter: return "adapter";
    case Method::vpt_shallow: return "vpt_shallow";
    case Method::vpt_deep: return "vpt_deep";
    case Method::ssf: return "ssf";
  }
  return "?";
}

Method parse_method(std::string_view text) {
  for (Method m : {Method::full, Method::linear, Method::bias, Method::adapter, Method::vpt_shallow,
                   Method::vpt_deep, Method::ssf}) {
    if (text == to_string(m)) return m;
  }
  throw ConfigError(fmt::format("unknown method '{}'", text));
}

void MethodConfig::validate(const ModelConfig& model) const {
  if (method == Method::adapter && (adapter_dim < 1 || adapter_dim >= model.dim)) {
    throw ConfigError(fmt::format("adapter dim {} must satisfy 1 <= d' < d = {}", adapter_dim,
                                  model.dim));
  }
  if ((method == Method::vpt_shallow || method == Method::vpt_deep) && prompts < 1) {
    throw ConfigError("VPT needs at least one prompt");
  }
  if (method == Method::ssf && !(ssf.init_std >= 0.0)) {
    throw ConfigError("SSF init std must be non-negative");
  }
}

nlohmann::json method_to_json(const MethodConfig& cfg) {
  nlohmann::json j = {{"method", to_string(cfg.method)}};
  switch (cfg.method) {
    case Method::adapter: j["adapter_dim"] = cfg.adapter_dim; break;
    case Method::vpt_shallow:
    case Method::vpt_deep: j["prompts"] = cfg.prompts; break;
    case Method::ssf:
      j["ssf"] = {{"sites", to_string(cfg.ssf.sites)},
                  {"init", to_string(cfg.ssf.init)},
                  {"variant", to_string(cfg.ssf.variant)},
                  {"init_std", cfg.ssf.init_std},
                  {"seed", cfg.ssf.seed}};
      break;
    default: break;
  }
  return j;
}

MethodConfig method_from_json(const nlohmann::json& j) {
  MethodConfig cfg;
  try {
    cfg.method = parse_method(j.at("method").get<std::string>());
    cfg.adapter_dim = j.value("adapter_dim", cfg.adapter_dim);
    cfg.prompts = j.value("prompts", cfg.prompts);
    if (j.contains("ssf")) {
      const auto& s = j.at("ssf");
      cfg.ssf.sites = parse_site_policy(s.at("sites").get<std::string>());
      cfg.ssf.init = parse_init_scheme(s.at("init").get<std::string>());
      cfg.ssf.variant = parse_variant(s.at("variant").get<std::string>());
      cfg.ssf.init_std = s.at("init_std").get<double>();
      cfg.ssf.seed = s.at("seed").get<std::uint64_t>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid method config: ") + e.what());
  }
  return cfg;
}

BudgetReport budget(const MethodConfig& method, const ModelConfig& model) {
  const std::uint64_t L = model.depth;
  const std::uint64_t d = model.dim;
  const std::uint64_t n2 = model.patches();
  const std::uint64_t n = method.prompts;
  const std::uint64_t dp = method.adapter_dim;
  const std::size_t backbone = backbone_param_count(model);
  const std::size_t head = head_param_count(model);

  BudgetReport r;
  r.method = std::string(to_string(method.method));
  std::size_t backbone_trainable = 0;
  switch (method.method) {
    case Method::full: backbone_trainable = backbone; break;
    case Method::linear: break;
    case Method::bias: backbone_trainable = backbone_bias_count(model); break;
    case Method::adapter:
      r.extra_train_params = 2 * L * d * dp;
      r.extra_infer_params = r.extra_train_params;
      r.extra_train_flops = 2 * n2 * L * d * dp;
      r.extra_infer_flops = r.extra_train_flops;
      break;
    case Method::vpt_shallow:
      r.extra_train_params = n * d;
      r.extra_infer_params = r.extra_train_params;
      r.extra_train_flops = 2 * n * (2 * n2 + n) * d;
      r.extra_infer_flops = r.extra_train_flops;
      break;
    case Method::vpt_deep:
      r.extra_train_params = n * L * d;
      r.extra_infer_params = r.extra_train_params;
      r.extra_train_flops = 2 * n * (2 * n2 + n) * L * d;
      r.extra_infer_flops = r.extra_train_flops;
      break;
    case Method::ssf: {
      r.extra_train_params = ssf_trainable_count(build_graph(model), method.ssf);
      r.extra_train_flops = n2 * r.extra_train_params;
      break;
    }
  }
  r.trainable_params = backbone_trainable + head + r.extra_train_params;
  r.total_params = backbone + head + r.extra_train_params;
  return r;
}

nlohmann::json budget_to_json(const BudgetReport& r) {
  return {{"method", r.method},
          {"total_params", r.total_params},
          {"trainable_params", r.trainable_params},
          {"trainable_params_millions", static_cast<double>(r.trainable_params) / 1e6},
          {"extra_train_params", r.extra_train_params},
          {"extra_infer_params", r.extra_infer_params},
          {"extra_train_flops", r.extra_train_flops},
          {"extra_infer_flops", r.extra_infer_flops}};
}

std::string format_budget_table(const BudgetReport& r) {
  std::string out;
  auto row = [&out](std::string_view key, const std::string& value) {
    out += fmt::format("{:<22}{:>16}\n", key, value);
  };
  row("method", r.method);
  row("total params", fmt::format("{}", r.total_params));
  row("trainable params", fmt::format("{}", r.trainable_params));
  row("trainable (M)", fmt::format("{:.2f}M", static_cast<double>(r.trainable_params) / 1e6));
  row("extra train params", fmt::format("{}", r.extra_train_params));
  row("extra infer params", fmt::format("{}", r.extra_infer_params));
  row("extra train FLOPs", fmt::format("{}", r.extra_train_flops));
  row("extra infer FLOPs", fmt::format("{}", r.extra_infer_flops));
  return out;
}

template <typename T>
Tensor<T> adapter_forward(const Tensor<T>& x, const Tensor<T>& w_down, const Tensor<T>& w_up) {
  if (w_down.rank() != 2 || w_up.rank() != 2 || w_up.extent(1) != w_down.extent(0) ||
      w_up.extent(0) != w_down.extent(1)) {
    throw ShapeError("adapter projections " + shape_str(w_down.shape()) + " and " +
                     shape_str(w_up.shape()) + " do not form a bottleneck");
  }
  return ops::linear(ops::gelu(ops::linear(x, w_down)), w_up);
}

template <typename T>
Tensor<T> vpt_prepend(const Tensor<T>& x, const Tensor<T>& prompts) {
  return ops::concat_tokens(x, prompts);
}

template <typename T>
std::vector<std::string> freezing_policy(const MethodConfig& method, ParamStore<T>& params) {
  for (const auto& name : params.names()) {
    bool trainable = pn::is_head(name);
    switch (method.method) {
      case Method::full: trainable = true; break;
      case Method::linear: break;
      case Method::bias: trainable = trainable || name.ends_with(".bias"); break;
      case Method::adapter: trainable = trainable || name.starts_with("adapter."); break;
      case Method::vpt_shallow:
      case Method::vpt_deep: trainable = trainable || name.starts_with("vpt."); break;
      case Method::ssf:
        throw ContractError("SSF freezing is decided by attach()");
    }
    params.set_frozen(name, !trainable);
  }
  return params.trainable_names();
}

template <typename T>
MethodBinding<T> bind_method(Model<T>& model, const MethodConfig& method, std::uint64_t seed) {
  method.validate(model.config);
  MethodBinding<T> out;
  ParamStore<T>& params = model.params;
  const ModelConfig& cfg = model.config;
  const std::size_t d = cfg.dim;

  if (method.method == Method::ssf) {
    SsfConfig ssf_cfg = method.ssf;
    Attachment<T> a = attach(params, model.graph, ssf_cfg);
    out.hooks = std::move(a.hooks);
    out.trainable = std::move(a.trainable);
    out.warnings = std::move(a.warnings);
    return out;
  }
  for (const auto& name : params.names()) {
    if (pn::is_ssf(name)) {
      throw ConfigError(fmt::format("'{}' present but method is {}", name, to_string(method.method)));
    }
  }

  Rng rng(derive_seed(seed, "method-init"));
  auto trunc = [&rng](Shape shape) {
    Tensor<T> t(std::move(shape));
    for (T& v : t.mutable_data()) v = static_cast<T>(rng.trunc_normal(0.0, 0.02));
    return t;
  };

  if (method.method == Method::adapter) {
    for (std::size_t l = 0; l < cfg.depth; ++l) {
      const std::string down = pn::adapter_down(l);
      const std::string up = pn::adapter_up(l);
      if (!params.contains(down)) params.add(down, trunc({method.adapter_dim, d}));
      if (!params.contains(up)) params.add(up, Tensor<T>(Shape{d, method.adapter_dim}));
      Tensor<T> wd = params.at(down);
      Tensor<T> wu = params.at(up);
      if (wd.shape() != Shape{method.adapter_dim, d} || wu.shape() != Shape{d, method.adapter_dim}) {
        throw ShapeError(fmt::format("adapter {} tensors do not match d'={}", l, method.adapter_dim));
      }
      out.hooks.sites.emplace(fmt::format("blocks.{}.fc2", l), [wd, wu](const Tensor<T>& f) {
        return ops::add(f, adapter_forward(f, wd, wu));
      });
    }
  } else if (method.method == Method::vpt_shallow || method.method == Method::vpt_deep) {
    const bool deep = method.method == Method::vpt_deep;
    const std::size_t count = deep ? cfg.depth : 1;
    for (std::size_t l = 0; l < count; ++l) {
      const std::string name = pn::prompts(l);
      if (!params.contains(name)) params.add(name, trunc({method.prompts, d}));
      if (params.at(name).shape() != Shape{method.prompts, d}) {
        throw ShapeError(fmt::format("'{}' does not hold {} prompts of width {}", name,
                                     method.prompts, d));
      }
      out.hooks.prompts.push_back(params.at(name));
    }
    out.hooks.deep_prompts = deep;
  }
  out.trainable = freezing_policy(method, params);
  return out;
}

#define PEFT_INSTANTIATE(T)                                                                      \
  template Tensor<T> adapter_forward<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);   \
  template Tensor<T> vpt_prepend<T>(const Tensor<T>&, const Tensor<T>&);                         \
  template std::vector<std::string> freezing_policy<T>(const MethodConfig&, ParamStore<T>&);     \
  template MethodBinding<T> bind_method<T>(Model<T>&, const MethodConfig&, std::uint64_t);

PEFT_INSTANTIATE(float)
PEFT_INSTANTIATE(double)

#undef PEFT_INSTANTIATE

}  // namespace ssf
