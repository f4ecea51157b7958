// Copyright (c) 2026 The SSF-PEFT Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <vector>

#include "oracles.h"
#include "ssf/ops.h"
#include "ssf/rng.h"
#include "ssf/tape.h"
#include "ssf/tensor.h"

namespace testing_support {

using ssf::Shape;
using ssf::Tensor;
using TensorD = Tensor<double>;

inline TensorD random_tensor(ssf::Rng& rng, Shape shape, double mean = 0.0, double stddev = 1.0) {
  TensorD t(std::move(shape));
  for (double& v : t.mutable_data()) v = rng.normal(mean, stddev);
  return t;
}

/// Scalar objective Σ f(inputs) ⊙ r with a fixed weighting r.
using Fn = std::function<TensorD(const std::vector<TensorD>&)>;

/// Max relative error between tape gradients and central differences over
/// every input of fn.
inline double max_grad_error(const Fn& fn, std::vector<TensorD> inputs, ssf::Rng& rng) {
  const TensorD probe = fn(inputs);
  std::vector<double> r(probe.numel());
  for (double& v : r) v = rng.normal(0.0, 1.0);
  const TensorD weights(probe.shape(), r);

  for (auto& t : inputs) t.set_requires_grad(true);
  ssf::Tape<double> tape;
  TensorD loss;
  {
    ssf::TapeScope<double> scope(tape);
    loss = ssf::ops::sum(ssf::ops::mul(fn(inputs), weights));
  }
  tape.backward(loss);

  double worst = 0.0;
  for (auto& t : inputs) {
    const oracle::Vec analytic = t.has_grad() ? oracle::to_vec(t.grad()) : oracle::Vec(t.numel(), 0.0);
    oracle::Vec x = oracle::to_vec(t.data());
    auto objective = [&] {
      std::copy(x.begin(), x.end(), t.mutable_data().begin());
      const TensorD out = fn(inputs);
      double s = 0.0;
      for (std::size_t i = 0; i < r.size(); ++i) s += out.data()[i] * r[i];
      return s;
    };
    const oracle::Vec numeric = oracle::finite_difference(objective, x, 1e-6);
    std::copy(x.begin(), x.end(), t.mutable_data().begin());
    worst = std::max(worst, oracle::rel_error(analytic, numeric, 1e-8));
  }
  return worst;
}

}  // namespace testing_support
