// Copyright (c) 2026 The SSF-PEFT Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "ssf/errors.h"
#include "ssf/tensor.h"

namespace ssf {

/// Named parameter tensors, each tagged frozen or trainable. A trainable
/// tensor has requires_grad set; a frozen one never receives grad storage.
template <typename T>
class ParamStore {
 public:
  struct Entry {
    Tensor<T> value;
    bool frozen = false;
  };
  using Map = std::map<std::string, Entry, std::less<>>;

  void add(std::string name, Tensor<T> value, bool frozen = false) {
    if (entries_.contains(name)) throw ContractError("duplicate parameter '" + name + "'");
    value.set_requires_grad(!frozen);
    entries_.emplace(std::move(name), Entry{std::move(value), frozen});
  }

  bool contains(std::string_view name) const { return entries_.find(name) != entries_.end(); }

  const Tensor<T>& at(std::string_view name) const { return entry(name).value; }
  Tensor<T>& at(std::string_view name) { return entry(name).value; }

  bool frozen(std::string_view name) const { return entry(name).frozen; }
  void set_frozen(std::string_view name, bool frozen) {
    Entry& e = entry(name);
    e.frozen = frozen;
    e.value.set_requires_grad(!frozen);
    if (frozen) e.value.clear_grad();
  }
  void freeze_all() {
    for (auto& [name, e] : entries_) set_frozen(name, true);
  }

  void erase(std::string_view name) {
    auto it = entries_.find(name);
    if (it != entries_.end()) entries_.erase(it);
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [name, e] : entries_) out.push_back(name);
    return out;
  }
  std::vector<std::string> trainable_names() const {
    std::vector<std::string> out;
    for (const auto& [name, e] : entries_) {
      if (!e.frozen) out.push_back(name);
    }
    return out;
  }
  std::vector<std::string> frozen_names() const {
    std::vector<std::string> out;
    for (const auto& [name, e] : entries_) {
      if (e.frozen) out.push_back(name);
    }
    return out;
  }

  std::size_t size() const { return entries_.size(); }
  std::size_t total_count() const {
    std::size_t n = 0;
    for (const auto& [name, e] : entries_) n += e.value.numel();
    return n;
  }
  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& [name, e] : entries_) {
      if (!e.frozen) n += e.value.numel();
    }
    return n;
  }

  void clear_grads() {
    for (auto& [name, e] : entries_) e.value.clear_grad();
  }

  /// Independent deep copy.
  ParamStore clone() const {
    ParamStore out;
    for (const auto& [name, e] : entries_) out.add(name, e.value.clone(), e.frozen);
    return out;
  }

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& [name, e] : entries_) out.add(name, tensor_cast<U>(e.value), e.frozen);
    return out;
  }

  const Map& entries() const { return entries_; }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

 private:
  const Entry& entry(std::string_view name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ContractError("unknown parameter '" + std::string(name) + "'");
    return it->second;
  }
  Entry& entry(std::string_view name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ContractError("unknown parameter '" + std::string(name) + "'");
    return it->second;
  }

  Map entries_;
};

}  // namespace ssf
