// Copyright (c) 2026 The SSF-PEFT Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensor handle with an optional gradient slot.

#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ssf/errors.h"

namespace ssf {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// A Tensor is a shared handle: copies alias the same storage, clone() makes
/// an independent one. Data and grad never share storage.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0}) : impl_(std::make_shared<Impl>()) {
    check_extents(shape);
    impl_->data.assign(shape_numel(shape), fill);
    impl_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> values) : impl_(std::make_shared<Impl>()) {
    check_extents(shape);
    if (shape_numel(shape) != values.size()) {
      throw ShapeError("tensor of shape " + shape_str(shape) + " cannot hold " +
                       std::to_string(values.size()) + " values");
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(values);
  }

  static Tensor scalar(T value) { return Tensor(Shape{1}, std::vector<T>{value}); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t extent(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t last_extent() const { return impl_->shape.back(); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const T> data() const { return impl_->data; }
  std::span<T> mutable_data() { return impl_->data; }
  T item() const {
    if (numel() != 1) {
      throw ContractError("item() on tensor of shape " + shape_str(shape()));
    }
    return impl_->data[0];
  }
  T at(std::size_t i) const { return impl_->data.at(i); }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) { impl_->requires_grad = on; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const T> grad() const { return impl_->grad; }
  /// Grad buffer, zero-allocated on first access. Gradients are bookkeeping
  /// on the shared storage, so this is available through const handles.
  std::span<T> mutable_grad() const {
    if (impl_->grad.empty()) {
      impl_->grad.assign(impl_->data.size(), T{0});
    }
    return impl_->grad;
  }
  void clear_grad() {
    impl_->grad.clear();
    impl_->grad.shrink_to_fit();
  }

  /// Deep copy of shape and data; the copy carries no grad.
  Tensor clone() const {
    Tensor out;
    out.impl_ = std::make_shared<Impl>();
    out.impl_->shape = impl_->shape;
    out.impl_->data = impl_->data;
    out.impl_->requires_grad = impl_->requires_grad;
    return out;
  }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  struct Impl {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
  };

  static void check_extents(const Shape& shape) {
    if (shape.empty()) {
      throw ShapeError("tensor shape must have at least one axis");
    }
    for (std::size_t e : shape) {
      if (e == 0) {
        throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
      }
    }
  }

  std::shared_ptr<Impl> impl_;
};

/// Element-wise conversion between precisions.
template <typename To, typename From>
Tensor<To> tensor_cast(const Tensor<From>& src) {
  std::vector<To> values(src.numel());
  auto in = src.data();
  for (std::size_t i = 0; i < values.size(); ++i) {
    values[i] = static_cast<To>(in[i]);
  }
  Tensor<To> out(src.shape(), std::move(values));
  out.set_requires_grad(src.requires_grad());
  return out;
}

}  // namespace ssf
