// Copyright (c) 2026 The SSF-PEFT Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "ssf/tensor.h"

namespace ssf {

/// Records differentiable ops in execution order. One tape per training step;
/// a tape is single-threaded and may be consumed by backward() once.
template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(const char* op, std::function<void()> backward_fn);

  /// Seeds d(loss)/d(loss) = 1 and runs every recorded node in reverse.
  void backward(Tensor<T> loss);

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }
  const char* op_name(std::size_t i) const { return nodes_.at(i).op; }

 private:
  struct Node {
    const char* op;
    std::function<void()> backward_fn;
  };
  std::vector<Node> nodes_;
  bool consumed_ = false;
};

/// The tape ops record into on the calling thread; nullptr when none is active
/// (inference mode: ops produce tensors without graph history).
template <typename T>
Tape<T>* active_tape();

/// Installs a tape as the active one for the current thread.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

/// backward() on the active tape.
template <typename T>
void backward(Tensor<T> loss);

}  // namespace ssf
