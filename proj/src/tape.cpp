// Copyright (c) 2026 The SSF-PEFT Authors
// SPDX-License-Identifier: Apache-2.0

#include "ssf/tape.h"

#include <numeric>

namespace ssf {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t a, std::size_t b) { return a * b; });
}

std::string shape_str(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i > 0) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

namespace {
template <typename T>
thread_local Tape<T>* g_active_tape = nullptr;
}  // namespace

template <typename T>
void Tape<T>::record(const char* op, std::function<void()> backward_fn) {
  if (consumed_) {
    throw ContractError(std::string("cannot record '") + op + "' on a consumed tape");
  }
  nodes_.push_back(Node{op, std::move(backward_fn)});
}

template <typename T>
void Tape<T>::backward(Tensor<T> loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (consumed_) {
    throw ContractError("backward called twice on the same tape");
  }
  if (!loss.requires_grad()) {
    throw ContractError("loss was not produced on an active tape from trainable inputs");
  }
  consumed_ = true;
  loss.mutable_grad()[0] = T{1};
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    it->backward_fn();
  }
}

template <typename T>
Tape<T>* active_tape() {
  return g_active_tape<T>;
}

template <typename T>
TapeScope<T>::TapeScope(Tape<T>& tape) : previous_(g_active_tape<T>) {
  g_active_tape<T> = &tape;
}

template <typename T>
TapeScope<T>::~TapeScope() {
  g_active_tape<T> = previous_;
}

template <typename T>
void backward(Tensor<T> loss) {
  Tape<T>* tape = active_tape<T>();
  if (tape == nullptr) {
    throw ContractError("backward called with no active tape");
  }
  tape->backward(loss);
}

template class Tape<float>;
template class Tape<double>;
template class TapeScope<float>;
template class TapeScope<double>;
template Tape<float>* active_tape<float>();
template Tape<double>* active_tape<double>();
template void backward<float>(Tensor<float>);
template void backward<double>(Tensor<double>);

}  // namespace ssf
