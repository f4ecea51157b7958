// Copyright (c) 2026 The SSF-PEFT Authors
// SPDX-License-Identifier: Apache-2.0
//
// Training loops: AdamW with decoupled weight decay, linear warmup followed
// by cosine decay, pretraining of the backbone and fine-tuning under any
// method with the frozen set checked by digest at the end of every run.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "ssf/checkpoint.h"
#include "ssf/data.h"
#include "ssf/peft.h"
#include "ssf/vit.h"

namespace ssf {

enum class DType { f32, f64 };

std::string_view to_string(DType dtype);
DType parse_dtype(std::string_view text);

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t warmup_epochs = 3;
  double base_lr = 1e-3;
  double weight_decay = 0.05;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  DType dtype = DType::f32;
  /// Stops after this many optimizer steps when nonzero; the schedule is
  /// laid out over the capped step count.
  std::size_t max_steps = 0;
  /// Apply weight decay to every trainable tensor instead of matrices only.
  bool decay_all = false;
  bool eval_each_epoch = true;
  /// Re-initialize the classification head before fine-tuning.
  bool reset_head = true;

  /// Throws ConfigError naming the violated constraint.
  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

/// Desk-scale recipes for the toy backbone.
TrainConfig pretrain_recipe();
TrainConfig finetune_recipe();

/// Linear ramp 0 -> base_lr over warmup_steps, then half-cosine to 0.
double lr_at(std::size_t step, std::size_t total_steps, std::size_t warmup_steps, double base_lr);

struct AdamWHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One AdamW update of a flat tensor; `step` counts from 1.
template <typename T>
void adamw_step(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v,
                std::size_t step, double lr, double weight_decay, const AdamWHyper& hyper = {});

/// Whether weight decay applies to a tensor: matrices only, never the class
/// token, positional embedding or prompts.
bool decays(std::string_view name, const Shape& shape);

template <typename T>
class AdamW {
 public:
  AdamW(const ParamStore<T>& params, double weight_decay, bool decay_all = false,
        AdamWHyper hyper = {});

  /// Updates every trainable tensor in place from its gradient.
  void step(ParamStore<T>& params, double lr);
  std::size_t steps() const { return step_; }
  /// Number of scalars held as optimizer state (two moments per trainable value).
  std::size_t state_numel() const;
  std::vector<std::string> tracked() const;

 private:
  struct Slot {
    std::vector<T> m;
    std::vector<T> v;
    bool decay = false;
  };
  std::map<std::string, Slot, std::less<>> slots_;
  double weight_decay_;
  AdamWHyper hyper_;
  std::size_t step_ = 0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_acc = 0.0;
  double lr = 0.0;
  std::size_t steps = 0;
};

struct RunRecord {
  nlohmann::json method;
  TrainConfig train;
  std::vector<EpochRecord> epochs;
  std::size_t steps = 0;
  double final_val_acc = 0.0;
  double wall_clock_s = 0.0;
  std::map<std::string, std::string> frozen_before;
  std::map<std::string, std::string> frozen_after;
  std::map<std::string, std::string> trainable_before;
  std::map<std::string, std::string> trainable_after;
  std::vector<std::string> warnings;

  /// One JSON object per epoch, newline-separated.
  std::string epoch_lines() const;
  nlohmann::json summary() const;
};

struct TrainResult {
  Checkpoint checkpoint;
  RunRecord record;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Fraction of correctly classified samples.
template <typename T>
double evaluate(const Model<T>& model, const Hooks<T>& hooks, const Dataset& data,
                std::size_t batch_size = 256);

/// Full training of a freshly initialized backbone. Throws DivergenceError
/// with the seed and config when the loss becomes non-finite.
TrainResult pretrain(const ModelConfig& model, const DatasetSplits& data, const TrainConfig& train,
                     const EpochCallback& on_epoch = {});

/// Fine-tunes `ckpt` with the given method. Only the method's trainable set
/// reaches the optimizer; for every method except full the frozen tensors
/// are digested before and after and a mismatch throws ContractError.
TrainResult finetune(const Checkpoint& ckpt, const MethodConfig& method, const DatasetSplits& data,
                     const TrainConfig& train, const EpochCallback& on_epoch = {});

/// Rebuilds the model and method hooks stored in a checkpoint.
template <typename T>
struct BoundModel {
  Model<T> model;
  MethodBinding<T> binding;
};

template <typename T>
BoundModel<T> bind_checkpoint(const Checkpoint& ckpt);

template <typename T>
Checkpoint make_checkpoint(const Model<T>& model, const MethodConfig& method,
                           std::map<std::string, std::string> provenance = {});

}  // namespace ssf
