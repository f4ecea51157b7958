// Copyright (c) 2026 The SSF-PEFT Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include <gtest/gtest.h>

#include "ssf/errors.h"
#include "ssf/ops.h"
#include "support/helpers.h"
#include "support/oracles.h"

namespace {

using namespace ssf;
using testing_support::max_grad_error;
using testing_support::random_tensor;
using testing_support::TensorD;

TEST(Tensor, RejectsEmptyAndZeroExtents) {
  EXPECT_THROW(TensorD(Shape{}), ShapeError);
  EXPECT_THROW(TensorD(Shape{2, 0}), ShapeError);
  EXPECT_THROW(TensorD(Shape{2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
}

TEST(Tensor, CloneIsDeepAndDropsGrad) {
  TensorD a(Shape{2}, std::vector<double>{1, 2});
  a.mutable_grad()[0] = 5;
  TensorD b = a.clone();
  b.mutable_data()[0] = 9;
  EXPECT_EQ(a.data()[0], 1);
  EXPECT_FALSE(b.has_grad());
  EXPECT_FALSE(a.same_storage(b));
}

TEST(Tensor, CastRoundTripsExactlyRepresentableValues) {
  Tensor<float> f(Shape{3}, std::vector<float>{0.5f, -1.25f, 3.0f});
  EXPECT_EQ(tensor_cast<float>(tensor_cast<double>(f)).data()[1], -1.25f);
}

TEST(Ops, MatmulMatchesLoops) {
  Rng rng(1);
  auto a = random_tensor(rng, {3, 4});
  auto b = random_tensor(rng, {4, 5});
  auto c = ops::matmul(a, b);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 5; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < 4; ++k) s += a.data()[i * 4 + k] * b.data()[k * 5 + j];
      EXPECT_NEAR(c.data()[i * 5 + j], s, 1e-12);
    }
  }
  auto bt = random_tensor(rng, {2, 5, 4});
  auto a3 = random_tensor(rng, {2, 3, 4});
  auto c3 = ops::matmul(a3, bt, true);
  ASSERT_EQ(c3.shape(), (Shape{2, 3, 5}));
  double s = 0;
  for (std::size_t k = 0; k < 4; ++k) s += a3.data()[12 + 4 + k] * bt.data()[20 + 2 * 4 + k];
  EXPECT_NEAR(c3.data()[15 + 5 + 2], s, 1e-12);
}

TEST(Ops, LinearLayernormGeluSoftmaxMatchOracles) {
  Rng rng(2);
  auto x = random_tensor(rng, {4, 6});
  auto w = random_tensor(rng, {3, 6});
  auto b = random_tensor(rng, {3});
  auto y = ops::linear(x, w, b);
  auto ref = oracle::linear(oracle::to_vec(x.data()), 4, oracle::to_vec(w.data()), oracle::to_vec(b.data()), 6, 3);
  EXPECT_LT(oracle::rel_error(oracle::to_vec(y.data()), ref), 1e-14);

  auto g = random_tensor(rng, {6}, 1.0, 0.2);
  auto lb = random_tensor(rng, {6});
  auto ln = ops::layernorm(x, g, lb);
  auto lref = oracle::layernorm(oracle::to_vec(x.data()), 4, oracle::to_vec(g.data()), oracle::to_vec(lb.data()), 6);
  EXPECT_LT(oracle::rel_error(oracle::to_vec(ln.data()), lref), 1e-12);

  auto ge = ops::gelu(x);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(ge.data()[i], oracle::gelu(x.data()[i]), 1e-15);

  auto sm = ops::softmax_rows(x);
  auto sref = oracle::to_vec(x.data());
  for (std::size_t r = 0; r < 4; ++r) oracle::softmax_inplace(std::span<double>(sref).subspan(r * 6, 6));
  EXPECT_LT(oracle::rel_error(oracle::to_vec(sm.data()), sref), 1e-14);
}

TEST(Ops, SoftmaxIsStableForLargeLogits) {
  TensorD x(Shape{1, 3}, std::vector<double>{1000, 1000, 1000});
  auto y = ops::softmax_rows(x);
  for (double v : y.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Ops, CrossEntropyMatchesClosedForm) {
  TensorD z(Shape{2, 3}, std::vector<double>{1, 2, 3, 0, 0, 0});
  const std::vector<int> labels = {2, 1};
  const double l0 = -std::log(std::exp(3.0) / (std::exp(1.0) + std::exp(2.0) + std::exp(3.0)));
  const double l1 = std::log(3.0);
  EXPECT_NEAR(ops::cross_entropy(z, labels).item(), (l0 + l1) / 2, 1e-14);
  const std::vector<int> bad = {3, 0};
  EXPECT_THROW(ops::cross_entropy(z, bad), ContractError);
}

TEST(Ops, PatchifyOrdersChannelThenRowThenColumn) {
  std::vector<double> v(2 * 4 * 4);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(i);
  TensorD img(Shape{1, 2, 4, 4}, v);
  auto p = ops::patchify(img, 2);
  ASSERT_EQ(p.shape(), (Shape{1, 4, 8}));
  // patch 1 is grid (0,1): channel 0 rows 0..1, cols 2..3 then channel 1.
  const std::vector<double> expect = {2, 3, 6, 7, 18, 19, 22, 23};
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(p.data()[8 + i], expect[i]);
}

TEST(Ops, HeadSplitMergeRoundTrip) {
  Rng rng(3);
  auto x = random_tensor(rng, {2, 3, 8});
  auto s = ops::split_heads(x, 4);
  ASSERT_EQ(s.shape(), (Shape{8, 3, 2}));
  auto m = ops::merge_heads(s, 4);
  EXPECT_EQ(oracle::to_vec(m.data()), oracle::to_vec(x.data()));
}

TEST(Ops, ConcatAndSliceTokens) {
  TensorD a(Shape{1, 2}, std::vector<double>{7, 8});
  TensorD b(Shape{2, 3, 2}, 1.0);
  auto c = ops::concat_tokens(a, b);
  ASSERT_EQ(c.shape(), (Shape{2, 4, 2}));
  EXPECT_EQ(c.data()[8], 7);
  auto s = ops::slice_tokens(c, 1, 3);
  ASSERT_EQ(s.shape(), (Shape{2, 3, 2}));
  for (double v : s.data()) EXPECT_EQ(v, 1.0);
}

TEST(Ops, ShapeMismatchesThrow) {
  TensorD a(Shape{2, 3});
  TensorD b(Shape{2, 4});
  EXPECT_THROW(ops::add(a, b), ShapeError);
  EXPECT_THROW(ops::matmul(a, b), ShapeError);
  EXPECT_THROW(ops::linear(a, TensorD(Shape{4, 2})), ShapeError);
  EXPECT_THROW(ops::scale_shift_channels(a, TensorD(Shape{2}), TensorD(Shape{3})), ShapeError);
}

struct GradCase {
  const char* name;
  std::function<std::vector<TensorD>(Rng&)> inputs;
  testing_support::Fn fn;
};

class OpGradients : public ::testing::TestWithParam<int> {};

std::vector<GradCase> grad_cases() {
  return {
      {"matmul", [](Rng& r) { return std::vector{random_tensor(r, {3, 4}), random_tensor(r, {4, 2})}; },
       [](const auto& in) { return ops::matmul(in[0], in[1]); }},
      {"matmul_bt", [](Rng& r) { return std::vector{random_tensor(r, {2, 3, 4}), random_tensor(r, {2, 5, 4})}; },
       [](const auto& in) { return ops::matmul(in[0], in[1], true); }},
      {"linear",
       [](Rng& r) { return std::vector{random_tensor(r, {2, 3, 4}), random_tensor(r, {5, 4}), random_tensor(r, {5})}; },
       [](const auto& in) { return ops::linear(in[0], in[1], in[2]); }},
      {"layernorm",
       [](Rng& r) { return std::vector{random_tensor(r, {3, 5}), random_tensor(r, {5}, 1, 0.3), random_tensor(r, {5})}; },
       [](const auto& in) { return ops::layernorm(in[0], in[1], in[2]); }},
      {"gelu", [](Rng& r) { return std::vector{random_tensor(r, {4, 3}, 0, 2)}; },
       [](const auto& in) { return ops::gelu(in[0]); }},
      {"softmax", [](Rng& r) { return std::vector{random_tensor(r, {3, 4})}; },
       [](const auto& in) { return ops::softmax_rows(in[0]); }},
      {"scale_shift",
       [](Rng& r) { return std::vector{random_tensor(r, {2, 3, 4}), random_tensor(r, {4}), random_tensor(r, {4})}; },
       [](const auto& in) { return ops::scale_shift_channels(in[0], in[1], in[2]); }},
      {"scale_shift_scalar",
       [](Rng& r) { return std::vector{random_tensor(r, {3, 4}), random_tensor(r, {1}), random_tensor(r, {4})}; },
       [](const auto& in) { return ops::scale_shift_channels(in[0], in[1], in[2]); }},
      {"add_broadcast", [](Rng& r) { return std::vector{random_tensor(r, {2, 3, 4}), random_tensor(r, {3, 4})}; },
       [](const auto& in) { return ops::add_broadcast(in[0], in[1]); }},
      {"concat_slice", [](Rng& r) { return std::vector{random_tensor(r, {1, 4}), random_tensor(r, {2, 3, 4})}; },
       [](const auto& in) { return ops::slice_tokens(ops::concat_tokens(in[0], in[1]), 1, 2); }},
      {"heads", [](Rng& r) { return std::vector{random_tensor(r, {2, 3, 6})}; },
       [](const auto& in) { return ops::merge_heads(ops::mul(ops::split_heads(in[0], 3), ops::split_heads(in[0], 3)), 3); }},
      {"patchify", [](Rng& r) { return std::vector{random_tensor(r, {1, 2, 4, 4})}; },
       [](const auto& in) { return ops::gelu(ops::patchify(in[0], 2)); }},
      {"cross_entropy", [](Rng& r) { return std::vector{random_tensor(r, {3, 4})}; },
       [](const auto& in) {
         static const std::vector<int> labels = {0, 3, 1};
         return ops::cross_entropy(in[0], labels);
       }},
  };
}

TEST_P(OpGradients, MatchFiniteDifferences) {
  const auto cases = grad_cases();
  const auto& c = cases.at(static_cast<std::size_t>(GetParam()));
  Rng rng(derive_seed(11, c.name));
  for (int instance = 0; instance < 5; ++instance) {
    EXPECT_LT(max_grad_error(c.fn, c.inputs(rng), rng), 1e-6) << c.name;
  }
}

INSTANTIATE_TEST_SUITE_P(All, OpGradients, ::testing::Range(0, 13));

TEST(Tape, NoRecordingWithoutActiveTapeOrGradInputs) {
  TensorD a(Shape{2}, 1.0);
  a.set_requires_grad(true);
  Tape<double> tape;
  ops::add(a, a);
  EXPECT_EQ(tape.size(), 0u);
  {
    TapeScope<double> scope(tape);
    TensorD frozen(Shape{2}, 1.0);
    ops::add(frozen, frozen);
    EXPECT_EQ(tape.size(), 0u);
    ops::add(a, frozen);
    EXPECT_EQ(tape.size(), 1u);
  }
  EXPECT_EQ(active_tape<double>(), nullptr);
}

TEST(Tape, BackwardContract) {
  TensorD a(Shape{2}, 1.0);
  a.set_requires_grad(true);
  TensorD frozen(Shape{2}, 3.0);
  Tape<double> tape;
  TensorD vec;
  TensorD loss;
  {
    TapeScope<double> scope(tape);
    vec = ops::mul(a, frozen);
    loss = ops::sum(vec);
  }
  EXPECT_THROW(tape.backward(vec), ContractError);
  tape.backward(loss);
  EXPECT_EQ(a.grad()[0], 3.0);
  EXPECT_FALSE(frozen.has_grad());
  EXPECT_THROW(tape.backward(loss), ContractError);
}

TEST(Tape, GradientsAccumulateOverReuse) {
  TensorD a(Shape{1}, 2.0);
  a.set_requires_grad(true);
  Tape<double> tape;
  TensorD loss;
  {
    TapeScope<double> scope(tape);
    loss = ops::sum(ops::add(ops::mul(a, a), a));
  }
  tape.backward(loss);
  EXPECT_DOUBLE_EQ(a.grad()[0], 5.0);
}

}  // namespace
