// Copyright (c) 2026 The SSF-PEFT Authors
// SPDX-License-Identifier: Apache-2.0
//
// Differentiable operations. Each op records a backward node on the active
// tape when any operand requires grad. Instantiated for float and double.

#pragma once

#include <cstddef>
#include <span>

#include "ssf/tape.h"
#include "ssf/tensor.h"

namespace ssf::ops {

inline constexpr double kLayerNormEps = 1e-6;

/// a[m,k]·b[k,n], or batched a[g,m,k]·b[g,k,n]. With transpose_b the right
/// operand is stored as [n,k] (or [g,n,k]).
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false);

/// x[...,in]·Wᵀ + bias with W[out,in]. bias may be undefined.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias = {});

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

/// x[..., trailing] + y[trailing]: y is repeated over the leading axes of x.
template <typename T>
Tensor<T> add_broadcast(const Tensor<T>& x, const Tensor<T>& y);

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& x, double factor);

/// Sum of all elements, shape [1].
template <typename T>
Tensor<T> sum(const Tensor<T>& x);

/// Exact (erf) GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);

/// Standardize over the last axis, then g ⊙ x̂ + b.
template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& g, const Tensor<T>& b,
                    double eps = kLayerNormEps);

/// Softmax over the last axis with max subtraction.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x);

/// y[...,c] = gamma[c]·x[...,c] + beta[c]. gamma may have length 1, in which
/// case the single factor scales every channel.
template <typename T>
Tensor<T> scale_shift_channels(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta);

/// Concatenation along the token axis. Each operand is [B,T,d] or [T,d]; a
/// rank-2 operand is shared across the batch of the other.
template <typename T>
Tensor<T> concat_tokens(const Tensor<T>& a, const Tensor<T>& b);

/// Tokens [start, start+count) of x[B,T,d] (or x[T,d]).
template <typename T>
Tensor<T> slice_tokens(const Tensor<T>& x, std::size_t start, std::size_t count);

/// Columns [start, start+width) of the last axis.
template <typename T>
Tensor<T> narrow_last(const Tensor<T>& x, std::size_t start, std::size_t width);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

/// [B,T,H·dh] -> [B·H,T,dh].
template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, std::size_t heads);

/// [B·H,T,dh] -> [B,T,H·dh].
template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x, std::size_t heads);

/// images[B,C,H,W] -> patches[B,(H/p)(W/p),C·p·p], patch vectors ordered (c, row, col).
template <typename T>
Tensor<T> patchify(const Tensor<T>& images, std::size_t patch);

/// Mean cross-entropy of logits[B,C] against integer labels, shape [1].
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels);

}  // namespace ssf::ops
