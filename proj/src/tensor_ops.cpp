// Copyright (c) 2026 The SSF-PEFT Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <functional>
#include <initializer_list>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "ssf/ops.h"

namespace ssf::ops {
namespace {

template <typename T>
bool tracking(std::initializer_list<const Tensor<T>*> inputs) {
  if (active_tape<T>() == nullptr) {
    return false;
  }
  for (const Tensor<T>* t : inputs) {
    if (t != nullptr && t->defined() && t->requires_grad()) {
      return true;
    }
  }
  return false;
}

template <typename T>
bool all_finite(std::span<const T> xs) {
  return std::all_of(xs.begin(), xs.end(), [](T v) { return std::isfinite(v); });
}

// Marks the output as part of the graph and records its backward node.
// Debug builds also verify that finite operands produced a finite result.
template <typename T>
void finish(const char* op, Tensor<T>& out, bool track,
            std::initializer_list<const Tensor<T>*> inputs, std::function<void()> backward_fn) {
#ifndef NDEBUG
  bool inputs_finite = true;
  for (const Tensor<T>* t : inputs) {
    if (t != nullptr && t->defined() && !all_finite(t->data())) inputs_finite = false;
  }
  if (inputs_finite && !all_finite(out.data())) {
    throw ContractError(std::string(op) + " produced a non-finite value from finite inputs");
  }
#else
  (void)inputs;
#endif
  if (track) {
    out.set_requires_grad(true);
    active_tape<T>()->record(op, std::move(backward_fn));
  }
}

[[noreturn]] void mismatch(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                   shape_str(b));
}

// C[m,n] += op(A)·op(B) where op(A) is m×k and op(B) is k×n. A is stored
// [k,m] when ta, B is stored [n,k] when tb.
template <typename T>
void gemm_acc(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, const T* A,
              const T* B, T* C) {
  if (!ta && !tb) {
    for (std::size_t i = 0; i < m; ++i) {
      T* c = C + i * n;
      const T* a = A + i * k;
      for (std::size_t p = 0; p < k; ++p) {
        const T av = a[p];
        const T* b = B + p * n;
        for (std::size_t j = 0; j < n; ++j) c[j] += av * b[j];
      }
    }
  } else if (!ta && tb) {
    for (std::size_t i = 0; i < m; ++i) {
      const T* a = A + i * k;
      T* c = C + i * n;
      for (std::size_t j = 0; j < n; ++j) {
        const T* b = B + j * k;
        T s{0};
        for (std::size_t p = 0; p < k; ++p) s += a[p] * b[p];
        c[j] += s;
      }
    }
  } else if (ta && !tb) {
    for (std::size_t p = 0; p < k; ++p) {
      const T* a = A + p * m;
      const T* b = B + p * n;
      for (std::size_t i = 0; i < m; ++i) {
        const T av = a[i];
        T* c = C + i * n;
        for (std::size_t j = 0; j < n; ++j) c[j] += av * b[j];
      }
    }
  } else {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        T s{0};
        for (std::size_t p = 0; p < k; ++p) s += A[p * m + i] * B[j * k + p];
        C[i * n + j] += s;
      }
    }
  }
}

template <typename T>
void accumulate(const Tensor<T>& dst, std::span<const T> src) {
  auto g = dst.mutable_grad();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += src[i];
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b) {
  const bool batched = a.rank() == 3;
  if (a.rank() != b.rank() || (a.rank() != 2 && a.rank() != 3)) mismatch("matmul", a.shape(), b.shape());
  const std::size_t groups = batched ? a.extent(0) : 1;
  const std::size_t off = batched ? 1 : 0;
  if (batched && b.extent(0) != groups) mismatch("matmul", a.shape(), b.shape());
  const std::size_t m = a.extent(off);
  const std::size_t k = a.extent(off + 1);
  const std::size_t bk = transpose_b ? b.extent(off + 1) : b.extent(off);
  const std::size_t n = transpose_b ? b.extent(off) : b.extent(off + 1);
  if (bk != k) mismatch("matmul", a.shape(), b.shape());

  Shape out_shape = batched ? Shape{groups, m, n} : Shape{m, n};
  Tensor<T> out(out_shape);
  {
    const T* A = a.data().data();
    const T* B = b.data().data();
    T* C = out.mutable_data().data();
    for (std::size_t g = 0; g < groups; ++g) {
      gemm_acc(false, transpose_b, m, n, k, A + g * m * k, B + g * k * n, C + g * m * n);
    }
  }
  const bool track = tracking({&a, &b});
  finish<T>("matmul", out, track, {&a, &b}, [a, b, out, groups, m, n, k, transpose_b]() mutable {
    if (!out.has_grad()) return;
    const T* dC = out.grad().data();
    if (a.requires_grad()) {
      T* dA = a.mutable_grad().data();
      const T* B = b.data().data();
      for (std::size_t g = 0; g < groups; ++g) {
        // dA = dC·op(B)ᵀ
        gemm_acc(false, !transpose_b, m, k, n, dC + g * m * n, B + g * k * n, dA + g * m * k);
      }
    }
    if (b.requires_grad()) {
      T* dB = b.mutable_grad().data();
      const T* A = a.data().data();
      for (std::size_t g = 0; g < groups; ++g) {
        if (transpose_b) {
          gemm_acc(true, false, n, k, m, dC + g * m * n, A + g * m * k, dB + g * k * n);
        } else {
          gemm_acc(true, false, k, n, m, A + g * m * k, dC + g * m * n, dB + g * k * n);
        }
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (weight.rank() != 2 || x.last_extent() != weight.extent(1)) {
    mismatch("linear", x.shape(), weight.shape());
  }
  const std::size_t in = weight.extent(1);
  const std::size_t outd = weight.extent(0);
  if (bias.defined() && (bias.rank() != 1 || bias.extent(0) != outd)) {
    mismatch("linear(bias)", weight.shape(), bias.shape());
  }
  const std::size_t rows = x.numel() / in;
  Shape out_shape = x.shape();
  out_shape.back() = outd;
  Tensor<T> out(out_shape);
  {
    T* y = out.mutable_data().data();
    if (bias.defined()) {
      const T* bv = bias.data().data();
      for (std::size_t r = 0; r < rows; ++r) std::copy(bv, bv + outd, y + r * outd);
    }
    gemm_acc(false, true, rows, outd, in, x.data().data(), weight.data().data(), y);
  }
  const bool track = tracking({&x, &weight, &bias});
  finish<T>("linear", out, track, {&x, &weight, &bias},
            [x, weight, bias, out, rows, in, outd]() mutable {
              if (!out.has_grad()) return;
              const T* dy = out.grad().data();
              if (x.requires_grad()) {
                gemm_acc(false, false, rows, in, outd, dy, weight.data().data(),
                         x.mutable_grad().data());
              }
              if (weight.requires_grad()) {
                gemm_acc(true, false, outd, in, rows, dy, x.data().data(),
                         weight.mutable_grad().data());
              }
              if (bias.defined() && bias.requires_grad()) {
                auto db = bias.mutable_grad();
                for (std::size_t r = 0; r < rows; ++r) {
                  for (std::size_t c = 0; c < outd; ++c) db[c] += dy[r * outd + c];
                }
              }
            });
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) mismatch("add", a.shape(), b.shape());
  Tensor<T> out(a.shape());
  {
    auto y = out.mutable_data();
    auto av = a.data();
    auto bv = b.data();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] + bv[i];
  }
  finish<T>("add", out, tracking({&a, &b}), {&a, &b}, [a, b, out]() mutable {
    if (!out.has_grad()) return;
    if (a.requires_grad()) accumulate(a, out.grad());
    if (b.requires_grad()) accumulate(b, out.grad());
  });
  return out;
}

template <typename T>
Tensor<T> add_broadcast(const Tensor<T>& x, const Tensor<T>& y) {
  const Shape& xs = x.shape();
  const Shape& ys = y.shape();
  if (ys.size() > xs.size() || !std::equal(ys.rbegin(), ys.rend(), xs.rbegin())) {
    mismatch("add_broadcast", xs, ys);
  }
  const std::size_t inner = y.numel();
  const std::size_t outer = x.numel() / inner;
  Tensor<T> out(xs);
  {
    auto o = out.mutable_data();
    auto xv = x.data();
    auto yv = y.data();
    for (std::size_t r = 0; r < outer; ++r) {
      for (std::size_t i = 0; i < inner; ++i) o[r * inner + i] = xv[r * inner + i] + yv[i];
    }
  }
  finish<T>("add_broadcast", out, tracking({&x, &y}), {&x, &y}, [x, y, out, inner, outer]() mutable {
    if (!out.has_grad()) return;
    auto dy = out.grad();
    if (x.requires_grad()) accumulate(x, dy);
    if (y.requires_grad()) {
      auto g = y.mutable_grad();
      for (std::size_t r = 0; r < outer; ++r) {
        for (std::size_t i = 0; i < inner; ++i) g[i] += dy[r * inner + i];
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) mismatch("mul", a.shape(), b.shape());
  Tensor<T> out(a.shape());
  {
    auto y = out.mutable_data();
    auto av = a.data();
    auto bv = b.data();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] * bv[i];
  }
  finish<T>("mul", out, tracking({&a, &b}), {&a, &b}, [a, b, out]() mutable {
    if (!out.has_grad()) return;
    auto dy = out.grad();
    if (a.requires_grad()) {
      auto g = a.mutable_grad();
      auto bv = b.data();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i] * bv[i];
    }
    if (b.requires_grad()) {
      auto g = b.mutable_grad();
      auto av = a.data();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i] * av[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, double factor) {
  const T f = static_cast<T>(factor);
  Tensor<T> out(x.shape());
  {
    auto y = out.mutable_data();
    auto xv = x.data();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = f * xv[i];
  }
  finish<T>("scale", out, tracking({&x}), {&x}, [x, out, f]() mutable {
    if (!out.has_grad()) return;
    auto dy = out.grad();
    auto g = x.mutable_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += f * dy[i];
  });
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  double s = 0.0;
  for (T v : x.data()) s += v;
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(s));
  finish<T>("sum", out, tracking({&x}), {&x}, [x, out]() mutable {
    if (!out.has_grad()) return;
    const T d = out.grad()[0];
    for (T& g : x.mutable_grad()) g += d;
  });
  return out;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  {
    auto y = out.mutable_data();
    auto xv = x.data();
    for (std::size_t i = 0; i < y.size(); ++i) {
      const double v = xv[i];
      y[i] = static_cast<T>(0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0)));
    }
  }
  finish<T>("gelu", out, tracking({&x}), {&x}, [x, out]() mutable {
    if (!out.has_grad()) return;
    auto dy = out.grad();
    auto g = x.mutable_grad();
    auto xv = x.data();
    constexpr double inv_sqrt_2pi = 0.3989422804014327;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = xv[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      g[i] += static_cast<T>(dy[i] * (cdf + v * pdf));
    }
  });
  return out;
}

template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& g, const Tensor<T>& b, double eps) {
  const std::size_t d = x.last_extent();
  if (g.rank() != 1 || g.extent(0) != d) mismatch("layernorm(g)", x.shape(), g.shape());
  if (b.rank() != 1 || b.extent(0) != d) mismatch("layernorm(b)", x.shape(), b.shape());
  if (!(eps > 0.0)) throw ContractError("layernorm eps must be positive");
  const std::size_t rows = x.numel() / d;
  Tensor<T> out(x.shape());
  std::vector<T> xhat(x.numel());
  std::vector<T> rstd(rows);
  {
    auto xv = x.data();
    auto gv = g.data();
    auto bv = b.data();
    auto y = out.mutable_data();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* row = xv.data() + r * d;
      double mean = 0.0;
      for (std::size_t c = 0; c < d; ++c) mean += row[c];
      mean /= static_cast<double>(d);
      double var = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        const double dv = row[c] - mean;
        var += dv * dv;
      }
      var /= static_cast<double>(d);
      const double rs = 1.0 / std::sqrt(var + eps);
      rstd[r] = static_cast<T>(rs);
      for (std::size_t c = 0; c < d; ++c) {
        const T xh = static_cast<T>((row[c] - mean) * rs);
        xhat[r * d + c] = xh;
        y[r * d + c] = gv[c] * xh + bv[c];
      }
    }
  }
  const bool track = tracking({&x, &g, &b});
  finish<T>("layernorm", out, track, {&x, &g, &b},
            [x, g, b, out, xhat = std::move(xhat), rstd = std::move(rstd), rows, d]() mutable {
              if (!out.has_grad()) return;
              auto dy = out.grad();
              auto gv = g.data();
              if (g.requires_grad()) {
                auto dg = g.mutable_grad();
                for (std::size_t r = 0; r < rows; ++r) {
                  for (std::size_t c = 0; c < d; ++c) dg[c] += dy[r * d + c] * xhat[r * d + c];
                }
              }
              if (b.requires_grad()) {
                auto db = b.mutable_grad();
                for (std::size_t r = 0; r < rows; ++r) {
                  for (std::size_t c = 0; c < d; ++c) db[c] += dy[r * d + c];
                }
              }
              if (x.requires_grad()) {
                auto dx = x.mutable_grad();
                const double inv_d = 1.0 / static_cast<double>(d);
                for (std::size_t r = 0; r < rows; ++r) {
                  double sum_dxh = 0.0;
                  double sum_dxh_xh = 0.0;
                  for (std::size_t c = 0; c < d; ++c) {
                    const double dxh = static_cast<double>(dy[r * d + c]) * gv[c];
                    sum_dxh += dxh;
                    sum_dxh_xh += dxh * xhat[r * d + c];
                  }
                  for (std::size_t c = 0; c < d; ++c) {
                    const double dxh = static_cast<double>(dy[r * d + c]) * gv[c];
                    dx[r * d + c] += static_cast<T>(
                        rstd[r] * (dxh - inv_d * sum_dxh - xhat[r * d + c] * inv_d * sum_dxh_xh));
                  }
                }
              }
            });
  return out;
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  const std::size_t n = x.last_extent();
  const std::size_t rows = x.numel() / n;
  Tensor<T> out(x.shape());
  {
    auto xv = x.data();
    auto y = out.mutable_data();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* row = xv.data() + r * n;
      const T mx = *std::max_element(row, row + n);
      double total = 0.0;
      for (std::size_t c = 0; c < n; ++c) {
        const double e = std::exp(static_cast<double>(row[c]) - mx);
        y[r * n + c] = static_cast<T>(e);
        total += e;
      }
      for (std::size_t c = 0; c < n; ++c) y[r * n + c] = static_cast<T>(y[r * n + c] / total);
    }
  }
  finish<T>("softmax_rows", out, tracking({&x}), {&x}, [x, out, rows, n]() mutable {
    if (!out.has_grad()) return;
    auto dy = out.grad();
    auto y = out.data();
    auto dx = x.mutable_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < n; ++c) dot += static_cast<double>(dy[r * n + c]) * y[r * n + c];
      for (std::size_t c = 0; c < n; ++c) {
        dx[r * n + c] += static_cast<T>(y[r * n + c] * (dy[r * n + c] - dot));
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> scale_shift_channels(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta) {
  const std::size_t c = x.last_extent();
  if (gamma.rank() != 1 || (gamma.extent(0) != c && gamma.extent(0) != 1)) {
    mismatch("scale_shift_channels(gamma)", x.shape(), gamma.shape());
  }
  if (beta.rank() != 1 || beta.extent(0) != c) {
    mismatch("scale_shift_channels(beta)", x.shape(), beta.shape());
  }
  const bool scalar_gamma = gamma.extent(0) == 1;
  const std::size_t rows = x.numel() / c;
  Tensor<T> out(x.shape());
  {
    auto xv = x.data();
    auto gv = gamma.data();
    auto bv = beta.data();
    auto y = out.mutable_data();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < c; ++j) {
        y[r * c + j] = gv[scalar_gamma ? 0 : j] * xv[r * c + j] + bv[j];
      }
    }
  }
  const bool track = tracking({&x, &gamma, &beta});
  finish<T>("scale_shift_channels", out, track, {&x, &gamma, &beta},
            [x, gamma, beta, out, rows, c, scalar_gamma]() mutable {
              if (!out.has_grad()) return;
              auto dy = out.grad();
              auto gv = gamma.data();
              if (x.requires_grad()) {
                auto dx = x.mutable_grad();
                for (std::size_t r = 0; r < rows; ++r) {
                  for (std::size_t j = 0; j < c; ++j) {
                    dx[r * c + j] += dy[r * c + j] * gv[scalar_gamma ? 0 : j];
                  }
                }
              }
              if (gamma.requires_grad()) {
                auto dg = gamma.mutable_grad();
                auto xv = x.data();
                for (std::size_t r = 0; r < rows; ++r) {
                  for (std::size_t j = 0; j < c; ++j) {
                    dg[scalar_gamma ? 0 : j] += dy[r * c + j] * xv[r * c + j];
                  }
                }
              }
              if (beta.requires_grad()) {
                auto db = beta.mutable_grad();
                for (std::size_t r = 0; r < rows; ++r) {
                  for (std::size_t j = 0; j < c; ++j) db[j] += dy[r * c + j];
                }
              }
            });
  return out;
}

template <typename T>
Tensor<T> concat_tokens(const Tensor<T>& a, const Tensor<T>& b) {
  auto ok_rank = [](const Tensor<T>& t) { return t.rank() == 2 || t.rank() == 3; };
  if (!ok_rank(a) || !ok_rank(b) || a.last_extent() != b.last_extent()) {
    mismatch("concat_tokens", a.shape(), b.shape());
  }
  const std::size_t d = a.last_extent();
  const std::size_t ta = a.extent(a.rank() - 2);
  const std::size_t tb = b.extent(b.rank() - 2);
  const bool a_batched = a.rank() == 3;
  const bool b_batched = b.rank() == 3;
  if (a_batched && b_batched && a.extent(0) != b.extent(0)) {
    mismatch("concat_tokens", a.shape(), b.shape());
  }
  const std::size_t batch = a_batched ? a.extent(0) : (b_batched ? b.extent(0) : 1);
  const bool out_batched = a_batched || b_batched;
  Tensor<T> out(out_batched ? Shape{batch, ta + tb, d} : Shape{ta + tb, d});
  {
    auto o = out.mutable_data();
    auto av = a.data();
    auto bv = b.data();
    for (std::size_t n = 0; n < batch; ++n) {
      T* dst = o.data() + n * (ta + tb) * d;
      const T* sa = av.data() + (a_batched ? n * ta * d : 0);
      const T* sb = bv.data() + (b_batched ? n * tb * d : 0);
      std::copy(sa, sa + ta * d, dst);
      std::copy(sb, sb + tb * d, dst + ta * d);
    }
  }
  const bool track = tracking({&a, &b});
  finish<T>("concat_tokens", out, track, {&a, &b},
            [a, b, out, batch, ta, tb, d, a_batched, b_batched]() mutable {
              if (!out.has_grad()) return;
              auto dy = out.grad();
              for (std::size_t n = 0; n < batch; ++n) {
                const T* src = dy.data() + n * (ta + tb) * d;
                if (a.requires_grad()) {
                  T* ga = a.mutable_grad().data() + (a_batched ? n * ta * d : 0);
                  for (std::size_t i = 0; i < ta * d; ++i) ga[i] += src[i];
                }
                if (b.requires_grad()) {
                  T* gb = b.mutable_grad().data() + (b_batched ? n * tb * d : 0);
                  for (std::size_t i = 0; i < tb * d; ++i) gb[i] += src[ta * d + i];
                }
              }
            });
  return out;
}

template <typename T>
Tensor<T> slice_tokens(const Tensor<T>& x, std::size_t start, std::size_t count) {
  if (x.rank() != 2 && x.rank() != 3) {
    throw ShapeError("slice_tokens expects [B,T,d] or [T,d], got " + shape_str(x.shape()));
  }
  const bool batched = x.rank() == 3;
  const std::size_t batch = batched ? x.extent(0) : 1;
  const std::size_t t = x.extent(x.rank() - 2);
  const std::size_t d = x.last_extent();
  if (count == 0 || start + count > t) {
    throw ShapeError("slice_tokens [" + std::to_string(start) + "," + std::to_string(start + count) +
                     ") out of range for " + shape_str(x.shape()));
  }
  Tensor<T> out(batched ? Shape{batch, count, d} : Shape{count, d});
  {
    auto o = out.mutable_data();
    auto xv = x.data();
    for (std::size_t n = 0; n < batch; ++n) {
      const T* src = xv.data() + (n * t + start) * d;
      std::copy(src, src + count * d, o.data() + n * count * d);
    }
  }
  finish<T>("slice_tokens", out, tracking({&x}), {&x}, [x, out, batch, t, d, start, count]() mutable {
    if (!out.has_grad()) return;
    auto dy = out.grad();
    auto dx = x.mutable_grad();
    for (std::size_t n = 0; n < batch; ++n) {
      T* dst = dx.data() + (n * t + start) * d;
      const T* src = dy.data() + n * count * d;
      for (std::size_t i = 0; i < count * d; ++i) dst[i] += src[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> narrow_last(const Tensor<T>& x, std::size_t start, std::size_t width) {
  const std::size_t d = x.last_extent();
  if (width == 0 || start + width > d) {
    throw ShapeError("narrow_last [" + std::to_string(start) + "," + std::to_string(start + width) +
                     ") out of range for " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / d;
  Shape shape = x.shape();
  shape.back() = width;
  Tensor<T> out(shape);
  {
    auto o = out.mutable_data();
    auto xv = x.data();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy(xv.data() + r * d + start, xv.data() + r * d + start + width, o.data() + r * width);
    }
  }
  finish<T>("narrow_last", out, tracking({&x}), {&x}, [x, out, rows, d, start, width]() mutable {
    if (!out.has_grad()) return;
    auto dy = out.grad();
    auto dx = x.mutable_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < width; ++j) dx[r * d + start + j] += dy[r * width + j];
    }
  });
  return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) mismatch("reshape", x.shape(), shape);
  Tensor<T> out(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()));
  finish<T>("reshape", out, tracking({&x}), {&x}, [x, out]() mutable {
    if (!out.has_grad()) return;
    accumulate(x, out.grad());
  });
  return out;
}

template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, std::size_t heads) {
  if (x.rank() != 3 || heads == 0 || x.extent(2) % heads != 0) {
    throw ShapeError("split_heads: " + shape_str(x.shape()) + " not divisible into " +
                     std::to_string(heads) + " heads");
  }
  const std::size_t batch = x.extent(0);
  const std::size_t t = x.extent(1);
  const std::size_t width = x.extent(2);
  const std::size_t dh = width / heads;
  Tensor<T> out(Shape{batch * heads, t, dh});
  auto index = [=](std::size_t n, std::size_t h, std::size_t i, std::size_t j) {
    return std::pair{(n * t + i) * width + h * dh + j, ((n * heads + h) * t + i) * dh + j};
  };
  {
    auto o = out.mutable_data();
    auto xv = x.data();
    for (std::size_t n = 0; n < batch; ++n)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < t; ++i)
          for (std::size_t j = 0; j < dh; ++j) {
            auto [src, dst] = index(n, h, i, j);
            o[dst] = xv[src];
          }
  }
  finish<T>("split_heads", out, tracking({&x}), {&x}, [x, out, batch, heads, t, dh, index]() mutable {
    if (!out.has_grad()) return;
    auto dy = out.grad();
    auto dx = x.mutable_grad();
    for (std::size_t n = 0; n < batch; ++n)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < t; ++i)
          for (std::size_t j = 0; j < dh; ++j) {
            auto [src, dst] = index(n, h, i, j);
            dx[src] += dy[dst];
          }
  });
  return out;
}

template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x, std::size_t heads) {
  if (x.rank() != 3 || heads == 0 || x.extent(0) % heads != 0) {
    throw ShapeError("merge_heads: " + shape_str(x.shape()) + " not divisible into " +
                     std::to_string(heads) + " heads");
  }
  const std::size_t batch = x.extent(0) / heads;
  const std::size_t t = x.extent(1);
  const std::size_t dh = x.extent(2);
  const std::size_t width = dh * heads;
  Tensor<T> out(Shape{batch, t, width});
  auto index = [=](std::size_t n, std::size_t h, std::size_t i, std::size_t j) {
    return std::pair{((n * heads + h) * t + i) * dh + j, (n * t + i) * width + h * dh + j};
  };
  {
    auto o = out.mutable_data();
    auto xv = x.data();
    for (std::size_t n = 0; n < batch; ++n)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < t; ++i)
          for (std::size_t j = 0; j < dh; ++j) {
            auto [src, dst] = index(n, h, i, j);
            o[dst] = xv[src];
          }
  }
  finish<T>("merge_heads", out, tracking({&x}), {&x}, [x, out, batch, heads, t, dh, index]() mutable {
    if (!out.has_grad()) return;
    auto dy = out.grad();
    auto dx = x.mutable_grad();
    for (std::size_t n = 0; n < batch; ++n)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < t; ++i)
          for (std::size_t j = 0; j < dh; ++j) {
            auto [src, dst] = index(n, h, i, j);
            dx[src] += dy[dst];
          }
  });
  return out;
}

template <typename T>
Tensor<T> patchify(const Tensor<T>& images, std::size_t patch) {
  if (images.rank() != 4 || patch == 0 || images.extent(2) % patch != 0 ||
      images.extent(3) % patch != 0) {
    throw ShapeError("patchify: images " + shape_str(images.shape()) + " not tileable by patch " +
                     std::to_string(patch));
  }
  const std::size_t batch = images.extent(0);
  const std::size_t ch = images.extent(1);
  const std::size_t h = images.extent(2);
  const std::size_t w = images.extent(3);
  const std::size_t gh = h / patch;
  const std::size_t gw = w / patch;
  const std::size_t pdim = ch * patch * patch;
  Tensor<T> out(Shape{batch, gh * gw, pdim});
  // Visits every (image element, patch element) pair once.
  auto for_each = [=](auto&& fn) {
    for (std::size_t n = 0; n < batch; ++n)
      for (std::size_t py = 0; py < gh; ++py)
        for (std::size_t px = 0; px < gw; ++px)
          for (std::size_t c = 0; c < ch; ++c)
            for (std::size_t i = 0; i < patch; ++i)
              for (std::size_t j = 0; j < patch; ++j) {
                const std::size_t src = ((n * ch + c) * h + py * patch + i) * w + px * patch + j;
                const std::size_t dst =
                    (n * gh * gw + py * gw + px) * pdim + (c * patch + i) * patch + j;
                fn(src, dst);
              }
  };
  {
    auto o = out.mutable_data();
    auto xv = images.data();
    for_each([&](std::size_t src, std::size_t dst) { o[dst] = xv[src]; });
  }
  finish<T>("patchify", out, tracking({&images}), {&images}, [images, out, for_each]() mutable {
    if (!out.has_grad()) return;
    auto dy = out.grad();
    auto dx = images.mutable_grad();
    for_each([&](std::size_t src, std::size_t dst) { dx[src] += dy[dst]; });
  });
  return out;
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.extent(0) != labels.size()) {
    throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  const std::size_t batch = logits.extent(0);
  const std::size_t classes = logits.extent(1);
  std::vector<T> probs(logits.numel());
  std::vector<int> targets(labels.begin(), labels.end());
  double loss = 0.0;
  auto lv = logits.data();
  for (std::size_t n = 0; n < batch; ++n) {
    const int label = targets[n];
    if (label < 0 || static_cast<std::size_t>(label) >= classes) {
      throw ContractError("label " + std::to_string(label) + " outside [0," +
                          std::to_string(classes) + ")");
    }
    const T* row = lv.data() + n * classes;
    const double mx = *std::max_element(row, row + classes);
    double total = 0.0;
    for (std::size_t c = 0; c < classes; ++c) total += std::exp(row[c] - mx);
    const double log_total = std::log(total) + mx;
    for (std::size_t c = 0; c < classes; ++c) {
      probs[n * classes + c] = static_cast<T>(std::exp(row[c] - log_total));
    }
    loss += log_total - row[label];
  }
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(loss / static_cast<double>(batch)));
  finish<T>("cross_entropy", out, tracking({&logits}), {&logits},
            [logits, out, probs = std::move(probs), targets = std::move(targets), batch,
             classes]() mutable {
              if (!out.has_grad()) return;
              const double scale_by = out.grad()[0] / static_cast<double>(batch);
              auto g = logits.mutable_grad();
              for (std::size_t n = 0; n < batch; ++n) {
                for (std::size_t c = 0; c < classes; ++c) {
                  const double onehot = static_cast<int>(c) == targets[n] ? 1.0 : 0.0;
                  g[n * classes + c] += static_cast<T>(scale_by * (probs[n * classes + c] - onehot));
                }
              }
            });
  return out;
}

#define SSF_INSTANTIATE_OPS(T)                                                               \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&, bool);                       \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);           \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> add_broadcast(const Tensor<T>&, const Tensor<T>&);                      \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> scale(const Tensor<T>&, double);                                        \
  template Tensor<T> sum(const Tensor<T>&);                                                  \
  template Tensor<T> gelu(const Tensor<T>&);                                                 \
  template Tensor<T> layernorm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double); \
  template Tensor<T> softmax_rows(const Tensor<T>&);                                         \
  template Tensor<T> scale_shift_channels(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&); \
  template Tensor<T> concat_tokens(const Tensor<T>&, const Tensor<T>&);                      \
  template Tensor<T> slice_tokens(const Tensor<T>&, std::size_t, std::size_t);               \
  template Tensor<T> narrow_last(const Tensor<T>&, std::size_t, std::size_t);                \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                       \
  template Tensor<T> split_heads(const Tensor<T>&, std::size_t);                             \
  template Tensor<T> merge_heads(const Tensor<T>&, std::size_t);                             \
  template Tensor<T> patchify(const Tensor<T>&, std::size_t);                                \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const int>);

SSF_INSTANTIATE_OPS(float)
SSF_INSTANTIATE_OPS(double)

#undef SSF_INSTANTIATE_OPS

}  // namespace ssf::ops
