// Copyright (c) 2026 The SSF-PEFT Authors
// SPDX-License-Identifier: Apache-2.0

#include "ssf/train.h"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>

#include <fmt/format.h>

#include "ssf/hash.h"
#include "ssf/ops.h"
#include "ssf/rng.h"
#include "ssf/tape.h"

namespace ssf {

namespace pn = param_names;

std::string_view to_string(DType dtype) { return dtype == DType::f32 ? "f32" : "f64"; }

DType parse_dtype(std::string_view text) {
  if (text == "f32") return DType::f32;
  if (text == "f64") return DType::f64;
  throw ConfigError(fmt::format("unknown dtype '{}' (expected f32|f64)", text));
}

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("batch_size must be at least 1");
  if (epochs == 0 ? warmup_epochs != 0 : warmup_epochs >= epochs) {
    throw ConfigError(fmt::format("warmup_epochs ({}) must be less than epochs ({})", warmup_epochs, epochs));
  }
  if (!std::isfinite(base_lr) || base_lr < 0.0) throw ConfigError("base_lr must be finite and non-negative");
  if (!std::isfinite(weight_decay) || weight_decay < 0.0) {
    throw ConfigError("weight_decay must be finite and non-negative");
  }
}

nlohmann::json TrainConfig::to_json() const {
  return {{"epochs", epochs},
          {"warmup_epochs", warmup_epochs},
          {"base_lr", base_lr},
          {"weight_decay", weight_decay},
          {"batch_size", batch_size},
          {"seed", seed},
          {"dtype", to_string(dtype)},
          {"max_steps", max_steps},
          {"decay_all", decay_all},
          {"eval_each_epoch", eval_each_epoch},
          {"reset_head", reset_head}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
  c.base_lr = j.value("base_lr", c.base_lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seed = j.value("seed", c.seed);
  c.dtype = parse_dtype(j.value("dtype", std::string("f32")));
  c.max_steps = j.value("max_steps", c.max_steps);
  c.decay_all = j.value("decay_all", c.decay_all);
  c.eval_each_epoch = j.value("eval_each_epoch", c.eval_each_epoch);
  c.reset_head = j.value("reset_head", c.reset_head);
  return c;
}

TrainConfig pretrain_recipe() {
  TrainConfig c;
  c.epochs = 30;
  c.warmup_epochs = 3;
  c.base_lr = 1e-3;
  c.weight_decay = 0.05;
  c.batch_size = 64;
  return c;
}

TrainConfig finetune_recipe() {
  TrainConfig c;
  c.epochs = 20;
  c.warmup_epochs = 2;
  c.base_lr = 5e-3;
  c.weight_decay = 0.05;
  c.batch_size = 64;
  return c;
}

double lr_at(std::size_t step, std::size_t total_steps, std::size_t warmup_steps, double base_lr) {
  if (step < warmup_steps) {
    return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  }
  const std::size_t decay_steps = total_steps > warmup_steps ? total_steps - warmup_steps : 1;
  const double progress =
      std::min(1.0, static_cast<double>(step - warmup_steps) / static_cast<double>(decay_steps));
  return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * progress));
}

template <typename T>
void adamw_step(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v,
                std::size_t step, double lr, double weight_decay, const AdamWHyper& h) {
  if (grad.size() != param.size() || m.size() != param.size() || v.size() != param.size()) {
    throw ShapeError("adamw_step: parameter, gradient and state sizes differ");
  }
  const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    double p = static_cast<double>(param[i]);
    const double g = static_cast<double>(grad[i]);
    p -= lr * weight_decay * p;
    const double mi = h.beta1 * static_cast<double>(m[i]) + (1.0 - h.beta1) * g;
    const double vi = h.beta2 * static_cast<double>(v[i]) + (1.0 - h.beta2) * g * g;
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
    p -= lr * (mi / bc1) / (std::sqrt(vi / bc2) + h.eps);
    param[i] = static_cast<T>(p);
  }
}

bool decays(std::string_view name, const Shape& shape) {
  if (shape.size() < 2) return false;
  if (name == pn::kClsToken || name == pn::kPosEmbed) return false;
  return !name.starts_with("vpt.");
}

template <typename T>
AdamW<T>::AdamW(const ParamStore<T>& params, double weight_decay, bool decay_all, AdamWHyper hyper)
    : weight_decay_(weight_decay), hyper_(hyper) {
  for (const auto& [name, e] : params) {
    if (e.frozen) continue;
    Slot s;
    s.m.assign(e.value.numel(), T{0});
    s.v.assign(e.value.numel(), T{0});
    s.decay = decay_all || decays(name, e.value.shape());
    slots_.emplace(name, std::move(s));
  }
}

template <typename T>
void AdamW<T>::step(ParamStore<T>& params, double lr) {
  ++step_;
  std::vector<T> zeros;
  for (auto& [name, slot] : slots_) {
    if (params.frozen(name)) throw ContractError(fmt::format("optimizer holds frozen tensor '{}'", name));
    Tensor<T>& p = params.at(name);
    std::span<const T> g;
    if (p.has_grad()) {
      g = p.grad();
    } else {
      zeros.assign(p.numel(), T{0});
      g = zeros;
    }
    adamw_step<T>(p.mutable_data(), g, slot.m, slot.v, step_, lr, slot.decay ? weight_decay_ : 0.0,
                  hyper_);
  }
}

template <typename T>
std::size_t AdamW<T>::state_numel() const {
  std::size_t n = 0;
  for (const auto& [name, s] : slots_) n += s.m.size() + s.v.size();
  return n;
}

template <typename T>
std::vector<std::string> AdamW<T>::tracked() const {
  std::vector<std::string> out;
  for (const auto& [name, s] : slots_) out.push_back(name);
  return out;
}

std::string RunRecord::epoch_lines() const {
  std::string out;
  for (const EpochRecord& e : epochs) {
    nlohmann::json j = {{"epoch", e.epoch},
                        {"train_loss", e.train_loss},
                        {"val_acc", e.val_acc},
                        {"lr", e.lr},
                        {"steps", e.steps}};
    out += j.dump();
    out += '\n';
  }
  return out;
}

nlohmann::json RunRecord::summary() const {
  bool conserved = frozen_before == frozen_after;
  std::vector<std::string> unchanged;
  for (const auto& [name, digest] : trainable_before) {
    auto it = trainable_after.find(name);
    if (it != trainable_after.end() && it->second == digest) unchanged.push_back(name);
  }
  return {{"schema", "ssf-run/1"},
          {"method", method},
          {"train", train.to_json()},
          {"steps", steps},
          {"final_val_acc", final_val_acc},
          {"wall_clock_s", wall_clock_s},
          {"frozen_tensors", frozen_before.size()},
          {"frozen_conserved", conserved},
          {"trainable_tensors", trainable_before.size()},
          {"trainable_unchanged", unchanged},
          {"frozen_sha256", frozen_after},
          {"trainable_sha256", trainable_after},
          {"warnings", warnings}};
}

template <typename T>
double evaluate(const Model<T>& model, const Hooks<T>& hooks, const Dataset& data, std::size_t batch_size) {
  if (data.size() == 0) return 0.0;
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t end = std::min(data.size(), start + batch_size);
    idx.resize(end - start);
    for (std::size_t i = start; i < end; ++i) idx[i - start] = i;
    Tensor<T> logits = forward(model, data.batch_images<T>(idx), hooks);
    const std::size_t classes = logits.last_extent();
    auto z = logits.data();
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const auto row = z.subspan(b * classes, classes);
      const auto best = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
      if (best == data.labels[idx[b]]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

namespace {

template <typename T>
std::map<std::string, std::string> digests(const ParamStore<T>& params, bool frozen) {
  std::map<std::string, std::string> out;
  for (const auto& [name, e] : params) {
    if (e.frozen == frozen) out.emplace(name, tensor_digest(e.value));
  }
  return out;
}

void check_data(const ModelConfig& cfg, const DatasetSplits& data) {
  for (const Dataset* ds : {&data.train, &data.val}) {
    ds->validate();
    if (ds->channels != cfg.channels || ds->image_side != cfg.image_side) {
      throw ConfigError(fmt::format("dataset images are {}x{}x{}, model expects {}x{}x{}", ds->channels,
                                    ds->image_side, ds->image_side, cfg.channels, cfg.image_side,
                                    cfg.image_side));
    }
  }
  if (data.train.size() == 0) throw ConfigError("training split is empty");
}

template <typename T>
void train_loop(Model<T>& model, const Hooks<T>& hooks, const DatasetSplits& data,
                const TrainConfig& cfg, RunRecord& rec, const EpochCallback& on_epoch) {
  const std::size_t n = data.train.size();
  const std::size_t per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  std::size_t total = cfg.epochs * per_epoch;
  if (cfg.max_steps != 0) total = std::min(total, cfg.max_steps);
  const std::size_t warmup = cfg.epochs == 0 ? 0 : total * cfg.warmup_epochs / cfg.epochs;

  AdamW<T> opt(model.params, cfg.weight_decay, cfg.decay_all);
  std::size_t step = 0;
  std::vector<std::size_t> idx;
  for (std::size_t epoch = 0; epoch < cfg.epochs && step < total; ++epoch) {
    Rng order(derive_seed(cfg.seed, "batch-order", epoch));
    const auto perm = order.permutation(n);
    double loss_sum = 0.0;
    std::size_t epoch_steps = 0;
    double lr = 0.0;
    for (std::size_t start = 0; start < n && step < total; start += cfg.batch_size) {
      const std::size_t end = std::min(n, start + cfg.batch_size);
      idx.assign(perm.begin() + static_cast<std::ptrdiff_t>(start),
                 perm.begin() + static_cast<std::ptrdiff_t>(end));
      Tape<T> tape;
      Tensor<T> loss;
      {
        TapeScope<T> scope(tape);
        Tensor<T> logits = forward(model, data.train.batch_images<T>(idx), hooks);
        const auto labels = data.train.batch_labels(idx);
        loss = ops::cross_entropy(logits, labels);
      }
      const double value = static_cast<double>(loss.item());
      if (!std::isfinite(value)) {
        throw DivergenceError(fmt::format("loss became non-finite at step {} (seed {}, model {}, train {})",
                                          step, cfg.seed, model_config_to_json(model.config).dump(),
                                          cfg.to_json().dump()));
      }
      tape.backward(loss);
      lr = lr_at(step, total, warmup, cfg.base_lr);
      opt.step(model.params, lr);
      model.params.clear_grads();
      loss_sum += value;
      ++epoch_steps;
      ++step;
    }
    EpochRecord er;
    er.epoch = epoch;
    er.train_loss = epoch_steps ? loss_sum / static_cast<double>(epoch_steps) : 0.0;
    er.lr = lr;
    er.steps = step;
    const bool last = epoch + 1 == cfg.epochs || step >= total;
    er.val_acc = (cfg.eval_each_epoch || last) ? evaluate(model, hooks, data.val) : std::nan("");
    rec.epochs.push_back(er);
    if (on_epoch) on_epoch(er);
  }
  rec.steps = step;
  rec.final_val_acc = rec.epochs.empty() ? evaluate(model, hooks, data.val) : rec.epochs.back().val_acc;
}

template <typename T>
TrainResult run_training(Model<T> model, const MethodConfig& method, const DatasetSplits& data,
                         const TrainConfig& cfg, const EpochCallback& on_epoch,
                         std::map<std::string, std::string> provenance) {
  const auto t0 = std::chrono::steady_clock::now();
  MethodBinding<T> binding = bind_method(model, method, cfg.seed);
  if (binding.trainable.empty()) throw ConfigError("the method leaves no trainable tensors");

  RunRecord rec;
  rec.method = method_to_json(method);
  rec.train = cfg;
  rec.warnings = binding.warnings;
  rec.frozen_before = digests(model.params, true);
  rec.trainable_before = digests(model.params, false);

  train_loop(model, binding.hooks, data, cfg, rec, on_epoch);

  rec.frozen_after = digests(model.params, true);
  rec.trainable_after = digests(model.params, false);
  if (rec.frozen_after != rec.frozen_before) {
    for (const auto& [name, digest] : rec.frozen_before) {
      if (rec.frozen_after.at(name) != digest) {
        throw ContractError(fmt::format("frozen tensor '{}' changed during training", name));
      }
    }
    throw ContractError("frozen tensor set changed during training");
  }
  rec.wall_clock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return TrainResult{make_checkpoint(model, method, std::move(provenance)), std::move(rec)};
}

template <typename T>
ParamStore<T> with_new_head(ParamStore<T> params, std::size_t dim, std::size_t classes, std::uint64_t seed) {
  params.erase(pn::kHeadWeight);
  params.erase(pn::kHeadBias);
  Rng rng(derive_seed(seed, "head-init"));
  Tensor<T> w(Shape{classes, dim});
  for (T& v : w.mutable_data()) v = static_cast<T>(rng.trunc_normal(0.0, 0.02));
  params.add(std::string(pn::kHeadWeight), std::move(w));
  params.add(std::string(pn::kHeadBias), Tensor<T>(Shape{classes}));
  return params;
}

template <typename T>
TrainResult finetune_as(const Checkpoint& ckpt, const MethodConfig& method, const DatasetSplits& data,
                        const TrainConfig& cfg, const EpochCallback& on_epoch) {
  ModelConfig mc = ckpt.meta.model;
  ParamStore<T> params = ckpt.params.cast<T>();
  if (cfg.reset_head || data.train.num_classes != mc.num_classes) {
    mc.num_classes = data.train.num_classes;
    mc.validate();
    params = with_new_head(std::move(params), mc.dim, mc.num_classes, cfg.seed);
  }
  check_data(mc, data);
  std::map<std::string, std::string> prov = ckpt.meta.provenance;
  prov["finetuned_from_sha256"] = sha256_hex(std::span<const std::byte>(serialize_checkpoint(ckpt)));
  return run_training(model_from_params(mc, std::move(params)), method, data, cfg, on_epoch,
                      std::move(prov));
}

template <typename T>
TrainResult pretrain_as(const ModelConfig& mc, const DatasetSplits& data, const TrainConfig& cfg,
                        const EpochCallback& on_epoch) {
  return run_training(build_model<T>(mc), MethodConfig{Method::full}, data, cfg, on_epoch,
                      {{"origin", "pretrain"}});
}

}  // namespace

TrainResult pretrain(const ModelConfig& model, const DatasetSplits& data, const TrainConfig& train,
                     const EpochCallback& on_epoch) {
  model.validate();
  train.validate();
  check_data(model, data);
  if (data.train.num_classes != model.num_classes) {
    throw ConfigError(fmt::format("dataset has {} classes, model head has {}", data.train.num_classes,
                                  model.num_classes));
  }
  return train.dtype == DType::f32 ? pretrain_as<float>(model, data, train, on_epoch)
                                   : pretrain_as<double>(model, data, train, on_epoch);
}

TrainResult finetune(const Checkpoint& ckpt, const MethodConfig& method, const DatasetSplits& data,
                     const TrainConfig& train, const EpochCallback& on_epoch) {
  train.validate();
  return train.dtype == DType::f32 ? finetune_as<float>(ckpt, method, data, train, on_epoch)
                                   : finetune_as<double>(ckpt, method, data, train, on_epoch);
}

template <typename T>
BoundModel<T> bind_checkpoint(const Checkpoint& ckpt) {
  MethodConfig method = ckpt.meta.method.empty() ? MethodConfig{Method::full}
                                                 : method_from_json(ckpt.meta.method);
  BoundModel<T> out{model_from_params(ckpt.meta.model, ckpt.params.cast<T>()), {}};
  out.binding = bind_method(out.model, method, ckpt.meta.model.seed);
  return out;
}

template <typename T>
Checkpoint make_checkpoint(const Model<T>& model, const MethodConfig& method,
                           std::map<std::string, std::string> provenance) {
  Checkpoint c;
  c.meta.model = model.config;
  c.meta.method = method_to_json(method);
  c.meta.provenance = std::move(provenance);
  c.params = model.params.template cast<float>();
  return c;
}

#define TRAIN_INSTANTIATE(T)                                                                   \
  template void adamw_step<T>(std::span<T>, std::span<const T>, std::span<T>, std::span<T>,    \
                              std::size_t, double, double, const AdamWHyper&);                 \
  template class AdamW<T>;                                                                     \
  template double evaluate<T>(const Model<T>&, const Hooks<T>&, const Dataset&, std::size_t);  \
  template BoundModel<T> bind_checkpoint<T>(const Checkpoint&);                                \
  template Checkpoint make_checkpoint<T>(const Model<T>&, const MethodConfig&,                 \
                                         std::map<std::string, std::string>);

TRAIN_INSTANTIATE(float)
TRAIN_INSTANTIATE(double)

#undef TRAIN_INSTANTIATE

}  // namespace ssf
