// Copyright (c) 2026 The SSF-PEFT Authors
// SPDX-License-Identifier: Apache-2.0

#include "ssf/gradcheck.h"

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>

#include <fmt/format.h>

#include "ssf/ops.h"
#include "ssf/peft.h"
#include "ssf/rng.h"
#include "ssf/ssf_adapters.h"
#include "ssf/tape.h"

namespace ssf {

double GradCheckReport::max_rel_err() const {
  double m = 0.0;
  for (const auto& c : cases) m = std::max(m, c.max_rel_err);
  return m;
}

nlohmann::json GradCheckReport::to_json() const {
  nlohmann::json cs = nlohmann::json::array();
  for (const auto& c : cases) {
    cs.push_back({{"case", c.name}, {"instances", c.instances}, {"max_rel_err", c.max_rel_err}});
  }
  return {{"dtype", to_string(dtype)},
          {"tolerance", tolerance},
          {"max_rel_err", max_rel_err()},
          {"passed", passed()},
          {"cases", cs}};
}

double grad_check_tolerance(DType dtype) { return dtype == DType::f32 ? 1e-4 : 1e-7; }

namespace {

template <typename U>
struct Problem {
  std::vector<Tensor<U>> inputs;
  std::function<Tensor<U>()> eval;
};

Tensor<double> random_tensor(Rng& rng, Shape shape, double mean = 0.0, double std = 1.0) {
  Tensor<double> t(std::move(shape));
  for (double& v : t.mutable_data()) v = rng.normal(mean, std);
  return t;
}

template <typename U>
Tensor<U> as(const Tensor<double>& t) {
  return tensor_cast<U>(t);
}

constexpr double kStep = 1e-3;

double stencil(const std::function<double(double)>& f) {
  return (-f(2 * kStep) + 8 * f(kStep) - 8 * f(-kStep) + f(-2 * kStep)) / (12 * kStep);
}

double weighted_sum(const Tensor<double>& out, const std::vector<double>& r) {
  double s = 0.0;
  auto d = out.data();
  for (std::size_t i = 0; i < d.size(); ++i) s += d[i] * r[i];
  return s;
}

/// Elementwise (directional == false) or one random unit direction per
/// input. Directional errors are measured against the gradient norm, the
/// largest value the directional derivative can take.
template <typename T, typename Build>
double check_case(const Build& build, Rng& rng, bool directional) {
  Problem<T> a = build(T{});
  for (auto& t : a.inputs) t.set_requires_grad(true);
  Tape<T> tape;
  Tensor<T> loss;
  std::vector<double> r;
  {
    TapeScope<T> scope(tape);
    Tensor<T> out = a.eval();
    for (std::size_t i = 0; i < out.numel(); ++i) r.push_back(rng.normal(0.0, 1.0));
    Tensor<T> rt(out.shape());
    for (std::size_t i = 0; i < r.size(); ++i) rt.mutable_data()[i] = static_cast<T>(r[i]);
    loss = ops::sum(ops::mul(out, rt));
  }
  tape.backward(loss);

  Problem<double> q = build(double{});
  double worst = 0.0;
  for (std::size_t k = 0; k < q.inputs.size(); ++k) {
    Tensor<double>& x = q.inputs[k];
    const auto ga = a.inputs[k].has_grad() ? std::vector<T>(a.inputs[k].grad().begin(), a.inputs[k].grad().end())
                                           : std::vector<T>(x.numel(), T{0});
    std::vector<double> analytic;
    std::vector<double> numeric;
    double dir_scale = 0.0;
    if (directional) {
      std::vector<double> dir(x.numel());
      double norm = 0.0;
      for (double& v : dir) {
        v = rng.normal(0.0, 1.0);
        norm += v * v;
      }
      for (double& v : dir) v /= std::sqrt(norm);
      const std::vector<double> base(x.data().begin(), x.data().end());
      double dot = 0.0;
      for (std::size_t i = 0; i < dir.size(); ++i) dot += static_cast<double>(ga[i]) * dir[i];
      analytic.push_back(dot);
      double gnorm = 0.0;
      for (const T& gi : ga) gnorm += static_cast<double>(gi) * static_cast<double>(gi);
      dir_scale = std::sqrt(gnorm);
      numeric.push_back(stencil([&](double s) {
        auto xd = x.mutable_data();
        for (std::size_t i = 0; i < dir.size(); ++i) xd[i] = base[i] + s * dir[i];
        const double v = weighted_sum(q.eval(), r);
        std::copy(base.begin(), base.end(), xd.begin());
        return v;
      }));
    } else {
      for (std::size_t i = 0; i < x.numel(); ++i) {
        analytic.push_back(static_cast<double>(ga[i]));
        numeric.push_back(stencil([&](double s) {
          const double orig = x.data()[i];
          x.mutable_data()[i] = orig + s;
          const double v = weighted_sum(q.eval(), r);
          x.mutable_data()[i] = orig;
          return v;
        }));
      }
    }
    double diff = 0.0;
    double scale = dir_scale;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
      diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
      scale = std::max(scale, std::abs(numeric[i]));
    }
    worst = std::max(worst, diff / std::max(scale, 1e-12));

  }
  return worst;
}

template <typename T>
GradCheckReport run_as(std::uint64_t seed, DType dtype, std::size_t instances) {
  GradCheckReport report;
  report.dtype = dtype;
  report.tolerance = grad_check_tolerance(dtype);
  Rng rng(derive_seed(seed, "grad-check"));
  auto dim = [&rng](std::size_t lo, std::size_t hi) { return lo + rng.index(hi - lo + 1); };

  auto run = [&](const std::string& name, auto make, bool directional = false) {
    GradCheckCase c{name, instances, 0.0};
    for (std::size_t i = 0; i < instances; ++i) {
      c.max_rel_err = std::max(c.max_rel_err, check_case<T>(make(), rng, directional));
    }
    report.cases.push_back(c);
  };

  run("ssf_ada", [&] {
    const std::size_t b = dim(1, 2), t = dim(1, 4), c = dim(1, 5);
    auto x = random_tensor(rng, {b, t, c});
    auto g = random_tensor(rng, {c}, 1.0, 0.3);
    auto be = random_tensor(rng, {c});
    return [=](auto tag) {
      using U = decltype(tag);
      Problem<U> p{{as<U>(x), as<U>(g), as<U>(be)}, {}};
      p.eval = [in = p.inputs] { return ssf_ada(in[0], in[1], in[2]); };
      return p;
    };
  });
  run("linear", [&] {
    const std::size_t b = dim(1, 3), n = dim(1, 5), o = dim(1, 5);
    auto x = random_tensor(rng, {b, n});
    auto w = random_tensor(rng, {o, n}, 0.0, 0.5);
    auto bias = random_tensor(rng, {o});
    return [=](auto tag) {
      using U = decltype(tag);
      Problem<U> p{{as<U>(x), as<U>(w), as<U>(bias)}, {}};
      p.eval = [in = p.inputs] { return ops::linear(in[0], in[1], in[2]); };
      return p;
    };
  });
  run("layernorm", [&] {
    const std::size_t t = dim(1, 4), c = dim(3, 6);
    auto x = random_tensor(rng, {t, c});
    auto g = random_tensor(rng, {c}, 1.0, 0.3);
    auto b = random_tensor(rng, {c});
    return [=](auto tag) {
      using U = decltype(tag);
      Problem<U> p{{as<U>(x), as<U>(g), as<U>(b)}, {}};
      p.eval = [in = p.inputs] { return ops::layernorm(in[0], in[1], in[2]); };
      return p;
    };
  });
  run("gelu", [&] {
    auto x = random_tensor(rng, {dim(1, 3), dim(1, 6)}, 0.0, 2.0);
    return [=](auto tag) {
      using U = decltype(tag);
      Problem<U> p{{as<U>(x)}, {}};
      p.eval = [in = p.inputs] { return ops::gelu(in[0]); };
      return p;
    };
  });
  run("softmax", [&] {
    auto x = random_tensor(rng, {dim(1, 3), dim(2, 6)});
    return [=](auto tag) {
      using U = decltype(tag);
      Problem<U> p{{as<U>(x)}, {}};
      p.eval = [in = p.inputs] { return ops::softmax_rows(in[0]); };
      return p;
    };
  });
  run("attention_core", [&] {
    const std::size_t heads = dim(1, 2), dh = dim(1, 3), t = dim(1, 4);
    auto qkv = random_tensor(rng, {dim(1, 2), t, 3 * heads * dh});
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    return [=](auto tag) {
      using U = decltype(tag);
      Problem<U> p{{as<U>(qkv)}, {}};
      p.eval = [in = p.inputs, heads, scale] { return attention_core(in[0], heads, scale); };
      return p;
    };
  });
  run("attention_block", [&] {
    const std::size_t heads = dim(1, 2), d = heads * dim(1, 3), t = dim(1, 4);
    auto x = random_tensor(rng, {dim(1, 2), t, d});
    auto wqkv = random_tensor(rng, {3 * d, d}, 0.0, 0.5);
    auto bqkv = random_tensor(rng, {3 * d}, 0.0, 0.1);
    auto wo = random_tensor(rng, {d, d}, 0.0, 0.5);
    auto bo = random_tensor(rng, {d}, 0.0, 0.1);
    const double scale = 1.0 / std::sqrt(static_cast<double>(d / heads));
    return [=](auto tag) {
      using U = decltype(tag);
      Problem<U> p{{as<U>(x), as<U>(wqkv), as<U>(bqkv), as<U>(wo), as<U>(bo)}, {}};
      p.eval = [in = p.inputs, heads, scale] {
        return attention_block(in[0], in[1], in[2], in[3], in[4], heads, scale);
      };
      return p;
    };
  });
  run("adapter", [&] {
    const std::size_t d = dim(2, 6), dd = dim(1, d - 1);
    auto x = random_tensor(rng, {dim(1, 2), dim(1, 4), d});
    auto wd = random_tensor(rng, {dd, d}, 0.0, 0.5);
    auto wu = random_tensor(rng, {d, dd}, 0.0, 0.5);
    return [=](auto tag) {
      using U = decltype(tag);
      Problem<U> p{{as<U>(x), as<U>(wd), as<U>(wu)}, {}};
      p.eval = [in = p.inputs] { return ops::add(in[0], adapter_forward(in[0], in[1], in[2])); };
      return p;
    };
  });
  run("cross_entropy", [&] {
    const std::size_t b = dim(1, 4), c = dim(2, 5);
    auto z = random_tensor(rng, {b, c});
    std::vector<int> labels;
    for (std::size_t i = 0; i < b; ++i) labels.push_back(static_cast<int>(rng.index(c)));
    return [=](auto tag) {
      using U = decltype(tag);
      Problem<U> p{{as<U>(z)}, {}};
      p.eval = [in = p.inputs, labels] { return ops::cross_entropy(in[0], labels); };
      return p;
    };
  });
  run(
      "toy_model",
      [&] {
        ModelConfig cfg = ModelConfig::toy();
        cfg.seed = rng.next_u64();
        const std::uint64_t ssf_seed = rng.next_u64();
        auto images = random_tensor(rng, {2, cfg.channels, cfg.image_side, cfg.image_side}, 0.5, 0.5);
        std::vector<int> labels = {static_cast<int>(rng.index(cfg.num_classes)),
                                   static_cast<int>(rng.index(cfg.num_classes))};
        return [=](auto tag) {
          using U = decltype(tag);
          auto model = std::make_shared<Model<U>>(build_model<U>(cfg));
          SsfConfig sc;
          sc.init_std = 0.2;
          sc.seed = ssf_seed;
          Hooks<U> hooks = attach(model->params, model->graph, sc).hooks;
          Problem<U> p;
          for (const auto& [name, e] : model->params) {
            Tensor<U> handle = e.value;
            handle.set_requires_grad(false);
            p.inputs.push_back(handle);
          }
          auto x = as<U>(images);
          p.eval = [model, hooks, x, labels] {
            return ops::cross_entropy(forward(*model, x, hooks), labels);
          };
          return p;
        };
      },
      /*directional=*/true);
  return report;
}

}  // namespace

GradCheckReport run_grad_check(std::uint64_t seed, DType dtype, std::size_t instances) {
  if (instances == 0) throw ConfigError("grad-check needs at least one instance");
  return dtype == DType::f32 ? run_as<float>(seed, dtype, instances) : run_as<double>(seed, dtype, instances);
}

}  // namespace ssf
