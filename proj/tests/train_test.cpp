// Copyright (c) 2026 The SSF-PEFT Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "ssf/errors.h"
#include "ssf/train.h"
#include "support/oracles.h"

namespace {

using namespace ssf;

TEST(LrSchedule, WarmupAndCosine) {
  EXPECT_EQ(lr_at(0, 100, 10, 0.1), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(5, 100, 10, 0.1), 0.05);
  EXPECT_DOUBLE_EQ(lr_at(10, 100, 10, 0.1), 0.1);
  EXPECT_NEAR(lr_at(55, 100, 10, 0.1), 0.05, 1e-15);
  EXPECT_NEAR(lr_at(99, 100, 10, 0.1), 0.5 * 0.1 * (1 + std::cos(std::numbers::pi * 89.0 / 90.0)), 1e-15);
  EXPECT_DOUBLE_EQ(lr_at(0, 10, 0, 0.2), 0.2);
}

TEST(AdamW, ZeroGradZeroDecayLeavesParams) {
  std::vector<double> p = {1.0, -2.0}, g = {0, 0}, m = {0, 0}, v = {0, 0};
  adamw_step<double>(p, g, m, v, 1, 0.1, 0.0);
  EXPECT_EQ(p, (std::vector<double>{1.0, -2.0}));
}

TEST(AdamW, ScalarRecurrenceOracle) {
  // Constant gradient g: m_t = g(1-β1^t), v_t = g²(1-β2^t), so the bias-corrected
  // step is lr·g/(|g| + eps) every time; decay multiplies by (1 - lr·wd) first.
  const double g = 0.3, lr = 0.01, wd = 0.1, eps = 1e-8;
  double expect = 2.0;
  std::vector<double> p = {2.0}, grad = {g}, m = {0}, v = {0};
  for (std::size_t t = 1; t <= 50; ++t) {
    adamw_step<double>(p, grad, m, v, t, lr, wd);
    const double mt = g * (1 - std::pow(0.9, t));
    const double vt = g * g * (1 - std::pow(0.999, t));
    expect = expect * (1 - lr * wd) - lr * (mt / (1 - std::pow(0.9, t))) / (std::sqrt(vt / (1 - std::pow(0.999, t))) + eps);
    EXPECT_NEAR(p[0], expect, 1e-12) << t;
  }
}

TEST(AdamW, StateOnlyForTrainableTensors) {
  Model<float> m = build_model<float>(ModelConfig::toy());
  MethodConfig mc;
  bind_method(m, mc, 0);
  AdamW<float> opt(m.params, 0.05);
  EXPECT_EQ(opt.state_numel(), 2 * m.params.trainable_count());
  for (const auto& name : opt.tracked()) EXPECT_FALSE(m.params.frozen(name));
  const auto frozen_before = oracle::to_vec(m.params.at("blocks.0.mlp.fc1.weight").data());
  for (auto& [name, e] : m.params) {
    if (!e.frozen) for (float& g : e.value.mutable_grad()) g = 1.0f;
  }
  opt.step(m.params, 0.1);
  EXPECT_EQ(frozen_before, oracle::to_vec(m.params.at("blocks.0.mlp.fc1.weight").data()));
}

TEST(AdamW, DecayRules) {
  EXPECT_TRUE(decays("blocks.0.attn.qkv.weight", Shape{96, 32}));
  EXPECT_FALSE(decays("blocks.0.attn.qkv.bias", Shape{96}));
  EXPECT_FALSE(decays("ssf.embed.gamma", Shape{32}));
  EXPECT_FALSE(decays("pos_embed", Shape{17, 32}));
  EXPECT_FALSE(decays("cls_token", Shape{1, 32}));
  EXPECT_FALSE(decays("vpt.prompts.0", Shape{1, 32}));
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  c.warmup_epochs = c.epochs;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.epochs = 0;
  c.warmup_epochs = 0;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(TrainConfig::from_json(pretrain_recipe().to_json()).to_json(), pretrain_recipe().to_json());
}

DatasetSplits small_task(TaskId task, std::uint64_t seed, std::size_t train = 64, std::size_t val = 32) {
  SyntheticParams p;
  p.train_size = train;
  p.val_size = val;
  return generate_synthetic(task, p, seed);
}

TrainConfig quick(std::size_t epochs = 2) {
  TrainConfig c;
  c.epochs = epochs;
  c.warmup_epochs = epochs > 1 ? 1 : 0;
  c.batch_size = 16;
  c.base_lr = 2e-3;
  return c;
}

TEST(Pretrain, DeterministicAndZeroEpochsIsInit) {
  const auto data = small_task(TaskId::upstream_shapes, 1);
  const ModelConfig cfg = ModelConfig::toy();
  const auto a = pretrain(cfg, data, quick());
  const auto b = pretrain(cfg, data, quick());
  EXPECT_EQ(serialize_checkpoint(a.checkpoint), serialize_checkpoint(b.checkpoint));
  ASSERT_EQ(a.record.epochs.size(), 2u);
  EXPECT_EQ(a.record.epochs[0].train_loss, b.record.epochs[0].train_loss);
  EXPECT_EQ(a.record.steps, 8u);
  for (const auto& [name, e] : a.checkpoint.params) EXPECT_FALSE(e.frozen);

  TrainConfig none = quick(0);
  none.warmup_epochs = 0;
  const auto z = pretrain(cfg, data, none);
  const Model<float> init = build_model<float>(cfg);
  for (const auto& [name, e] : z.checkpoint.params) {
    EXPECT_EQ(oracle::to_vec(e.value.data()), oracle::to_vec(init.params.at(name).data())) << name;
  }
}

TEST(Pretrain, DivergenceIsReported) {
  auto data = small_task(TaskId::upstream_shapes, 2);
  data.train.pixels[5] = std::nanf("");
  try {
    pretrain(ModelConfig::toy(), data, quick());
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError& e) {
    EXPECT_NE(std::string(e.what()).find("seed"), std::string::npos);
  }
}

TEST(Pretrain, RejectsMismatchedData) {
  SyntheticParams p;
  p.train_size = 8;
  p.val_size = 8;
  p.num_classes = 3;
  EXPECT_THROW(pretrain(ModelConfig::toy(), generate_synthetic(TaskId::upstream_shapes, p, 0), quick()), ConfigError);
}

class FinetuneTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    base_ = new Checkpoint(pretrain(ModelConfig::toy(), small_task(TaskId::upstream_shapes, 3), quick()).checkpoint);
  }
  static void TearDownTestSuite() { delete base_; }
  static Checkpoint* base_;
};

Checkpoint* FinetuneTest::base_ = nullptr;

TEST_F(FinetuneTest, LinearChangesOnlyTheHead) {
  MethodConfig mc;
  mc.method = Method::linear;
  TrainConfig tc = quick();
  tc.reset_head = false;
  const auto r = finetune(*base_, mc, small_task(TaskId::downstream_shifted, 4), tc);
  for (const auto& [name, e] : r.checkpoint.params) {
    const bool same = oracle::to_vec(e.value.data()) == oracle::to_vec(base_->params.at(name).data());
    EXPECT_EQ(same, !param_names::is_head(name)) << name;
    EXPECT_EQ(e.frozen, !param_names::is_head(name)) << name;
  }
  EXPECT_EQ(r.record.frozen_before, r.record.frozen_after);
  EXPECT_TRUE(r.record.summary().at("frozen_conserved").get<bool>());
}

TEST_F(FinetuneTest, FrozenDigestsConservedForEveryMethod) {
  for (Method m : {Method::bias, Method::adapter, Method::vpt_shallow, Method::vpt_deep, Method::ssf}) {
    MethodConfig mc;
    mc.method = m;
    const auto r = finetune(*base_, mc, small_task(TaskId::downstream_shifted, 5), quick(1));
    EXPECT_EQ(r.record.frozen_before, r.record.frozen_after) << to_string(m);
    EXPECT_FALSE(r.record.frozen_before.empty());
    for (const auto& [name, digest] : r.record.frozen_before) {
      EXPECT_EQ(tensor_digest(base_->params.at(name)), digest) << name;
    }
  }
}

TEST_F(FinetuneTest, ConstantSsfWithoutStepsReproducesPretrained) {
  MethodConfig mc;
  mc.ssf.init = InitScheme::constant;
  TrainConfig tc = quick(0);
  tc.warmup_epochs = 0;
  tc.reset_head = false;
  const auto data = small_task(TaskId::upstream_shapes, 6);
  const auto r = finetune(*base_, mc, data, tc);
  const BoundModel<float> tuned = bind_checkpoint<float>(r.checkpoint);
  const BoundModel<float> pre = bind_checkpoint<float>(*base_);
  std::vector<std::size_t> idx = {0, 1, 2, 3};
  const auto x = data.val.batch_images<float>(idx);
  EXPECT_EQ(oracle::to_vec(forward(pre.model, x, pre.binding.hooks).data()),
            oracle::to_vec(forward(tuned.model, x, tuned.binding.hooks).data()));
}

TEST_F(FinetuneTest, MaxStepsCapsTrainingAndRunRecordIsJsonLines) {
  MethodConfig mc;
  TrainConfig tc = quick(5);
  tc.max_steps = 3;
  const auto r = finetune(*base_, mc, small_task(TaskId::downstream_shifted, 7), tc);
  EXPECT_EQ(r.record.steps, 3u);
  const std::string lines = r.record.epoch_lines();
  std::size_t count = 0;
  for (char ch : lines) count += ch == '\n';
  EXPECT_EQ(count, r.record.epochs.size());
  const auto first = nlohmann::json::parse(lines.substr(0, lines.find('\n')));
  EXPECT_TRUE(first.contains("train_loss"));
  EXPECT_TRUE(first.contains("val_acc"));
  EXPECT_TRUE(first.contains("lr"));
}

TEST_F(FinetuneTest, DoublePrecisionRunKeepsFrozenTensorsExact) {
  MethodConfig mc;
  mc.method = Method::bias;
  TrainConfig tc = quick(1);
  tc.dtype = DType::f64;
  const auto r = finetune(*base_, mc, small_task(TaskId::downstream_shifted, 8), tc);
  for (const auto& [name, e] : r.checkpoint.params) {
    if (e.frozen) EXPECT_EQ(oracle::to_vec(e.value.data()), oracle::to_vec(base_->params.at(name).data())) << name;
  }
}

TEST(Evaluate, CountsArgmaxMatches) {
  const ModelConfig cfg = ModelConfig::toy();
  Model<double> m = build_model<double>(cfg);
  for (double& v : m.params.at("head.weight").mutable_data()) v = 0;
  for (double& v : m.params.at("head.bias").mutable_data()) v = 0;
  m.params.at("head.bias").mutable_data()[2] = 1;
  SyntheticParams p;
  p.train_size = 8;
  p.val_size = 12;
  const auto data = generate_synthetic(TaskId::upstream_shapes, p, 0);
  EXPECT_DOUBLE_EQ(evaluate(m, Hooks<double>{}, data.val, 5), 0.25);
}

}  // namespace
