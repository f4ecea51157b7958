// Copyright (c) 2026 The SSF-PEFT Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include <gtest/gtest.h>

#include "ssf/errors.h"
#include "ssf/ops.h"
#include "ssf/ssf_adapters.h"
#include "ssf/vit.h"
#include "support/helpers.h"
#include "support/oracles.h"

namespace {

using namespace ssf;
using testing_support::random_tensor;
using testing_support::TensorD;

TEST(SsfAda, WorkedExample) {
  const TensorD x(Shape{2, 2}, std::vector<double>{1, 2, 3, 4});
  const TensorD g(Shape{2}, std::vector<double>{2, 0.5});
  const TensorD b(Shape{2}, std::vector<double>{1, -1});
  EXPECT_EQ(oracle::to_vec(ssf_ada(x, g, b).data()), (std::vector<double>{3, 0, 7, 1}));
}

TEST(SsfAda, IdentityIsBitwise) {
  Rng rng(1);
  const auto x = tensor_cast<float>(random_tensor(rng, {3, 5, 7}));
  const auto y = ssf_ada(x, Tensor<float>(Shape{7}, 1.0f), Tensor<float>(Shape{7}, 0.0f));
  EXPECT_EQ(oracle::to_vec(x.data()), oracle::to_vec(y.data()));
}

TEST(SsfAda, ScalarScaleDoubles) {
  Rng rng(2);
  const auto x = random_tensor(rng, {4, 3});
  const auto y = ssf_ada(x, TensorD(Shape{1}, 2.0), TensorD(Shape{3}, 0.0));
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y.data()[i], 2 * x.data()[i]);
}

TEST(SsfAda, LengthMismatchIsShapeError) {
  EXPECT_THROW(ssf_ada(TensorD(Shape{2, 3}), TensorD(Shape{2}), TensorD(Shape{3})), ShapeError);
  EXPECT_THROW(ssf_ada(TensorD(Shape{2, 3}), TensorD(Shape{3}), TensorD(Shape{1})), ShapeError);
}

TEST(SsfAda, GradientsMatchClosedFormAndFiniteDifferences) {
  Rng rng(3);
  for (int instance = 0; instance < 10; ++instance) {
    auto x = random_tensor(rng, {2, 3, 4});
    auto g = random_tensor(rng, {4}, 1, 0.2);
    auto b = random_tensor(rng, {4});
    auto r = random_tensor(rng, {2, 3, 4});
    x.set_requires_grad(true);
    g.set_requires_grad(true);
    b.set_requires_grad(true);
    Tape<double> tape;
    TensorD loss;
    {
      TapeScope<double> scope(tape);
      loss = ops::sum(ops::mul(ssf_ada(x, g, b), r));
    }
    tape.backward(loss);
    for (std::size_t c = 0; c < 4; ++c) {
      double dg = 0, db = 0;
      for (std::size_t p = 0; p < 6; ++p) {
        dg += r.data()[p * 4 + c] * x.data()[p * 4 + c];
        db += r.data()[p * 4 + c];
      }
      EXPECT_NEAR(g.grad()[c], dg, 1e-12);
      EXPECT_NEAR(b.grad()[c], db, 1e-12);
    }
    const auto fn = [](const std::vector<TensorD>& in) { return ssf_ada(in[0], in[1], in[2]); };
    EXPECT_LT(testing_support::max_grad_error(fn, {x.clone(), g.clone(), b.clone()}, rng), 1e-5);
  }
}

struct InitStats {
  double gamma_mean = 0, beta_mean = 0, gamma_min = 1e9, gamma_max = -1e9;
};

InitStats init_stats(InitScheme scheme, double stddev = 0.02) {
  ModelConfig cfg = ModelConfig::toy();
  cfg.dim = 10000 / 4 * 4;  // large sites for sample statistics
  cfg.mlp_ratio = 1.0;
  cfg.depth = 1;
  cfg.heads = 4;
  const LayerGraph graph = build_graph(cfg);
  ParamStore<double> params;
  const Site* site = &graph.at("final_ln");
  params.add(param_names::ssf_gamma(site->id), TensorD(Shape{cfg.dim}));
  params.add(param_names::ssf_beta(site->id), TensorD(Shape{cfg.dim}));
  const Site* sites[] = {site};
  init_ssf(params, std::span<const Site* const>(sites), scheme, stddev, 42);
  InitStats s;
  for (double v : params.at("ssf.final_ln.gamma").data()) {
    s.gamma_mean += v;
    s.gamma_min = std::min(s.gamma_min, v);
    s.gamma_max = std::max(s.gamma_max, v);
  }
  for (double v : params.at("ssf.final_ln.beta").data()) s.beta_mean += v;
  s.gamma_mean /= static_cast<double>(cfg.dim);
  s.beta_mean /= static_cast<double>(cfg.dim);
  return s;
}

TEST(InitSsf, SchemeStatistics) {
  const auto normal = init_stats(InitScheme::normal);
  EXPECT_NEAR(normal.gamma_mean, 1.0, 0.01);
  EXPECT_NEAR(normal.beta_mean, 0.0, 0.01);
  const auto trunc = init_stats(InitScheme::trunc_normal);
  EXPECT_NEAR(trunc.gamma_mean, 1.0, 0.01);
  EXPECT_GE(trunc.gamma_min, 1.0 - 0.04);
  EXPECT_LE(trunc.gamma_max, 1.0 + 0.04);
  const auto uniform = init_stats(InitScheme::uniform);
  EXPECT_NEAR(uniform.gamma_mean, 1.0, 0.01);
  EXPECT_GE(uniform.gamma_min, 1.0 - 0.02 * std::sqrt(3.0));
  EXPECT_LE(uniform.gamma_max, 1.0 + 0.02 * std::sqrt(3.0));
  const auto constant = init_stats(InitScheme::constant);
  EXPECT_EQ(constant.gamma_min, 1.0);
  EXPECT_EQ(constant.gamma_max, 1.0);
  EXPECT_EQ(constant.beta_mean, 0.0);
  const auto zero_mean = init_stats(InitScheme::random_zero_mean);
  EXPECT_NEAR(zero_mean.gamma_mean, 0.0, 0.01);
  EXPECT_THROW(init_stats(InitScheme::normal, -1.0), ConfigError);
}

TEST(Parsing, PoliciesSchemesVariants) {
  EXPECT_EQ(parse_site_policy("all").scope, SitePolicy::Scope::all);
  EXPECT_EQ(parse_site_policy("first:3").k, 3u);
  EXPECT_EQ(parse_site_policy("without:attn").group, SiteGroup::attn);
  EXPECT_THROW(parse_site_policy("first:x"), ConfigError);
  EXPECT_THROW(parse_site_policy("without:head"), ConfigError);
  EXPECT_EQ(to_string(parse_site_policy("without:norm")), "without:norm");
  EXPECT_EQ(parse_init_scheme("trunc_normal"), InitScheme::trunc_normal);
  EXPECT_THROW(parse_init_scheme("xavier"), ConfigError);
  EXPECT_EQ(parse_variant("scalar_scale"), Variant::scalar_scale);
  EXPECT_THROW(parse_variant("half"), ConfigError);
}

/// Independent count: walk the graph and apply the policy rules by hand.
std::size_t enumerate(const ModelConfig& cfg, const std::string& policy, Variant variant) {
  std::size_t n = 0;
  for (const Site& s : build_graph(cfg).sites()) {
    if (s.kind == SiteKind::head) continue;
    const bool is_norm = s.kind == SiteKind::ln1 || s.kind == SiteKind::ln2 || s.kind == SiteKind::final_ln;
    bool on = true;
    if (policy.rfind("first:", 0) == 0) {
      const int k = std::stoi(policy.substr(6));
      on = k > 0 && (s.layer < k);
    } else if (policy == "without:mlp") {
      on = s.kind != SiteKind::fc1 && s.kind != SiteKind::fc2;
    } else if (policy == "without:attn") {
      on = s.kind != SiteKind::qkv && s.kind != SiteKind::attn_proj;
    } else if (policy == "without:embed") {
      on = s.kind != SiteKind::embed;
    } else if (policy == "without:norm") {
      on = !is_norm;
    }
    if (variant == Variant::norm_only && !is_norm) on = false;
    if (!on) continue;
    if (variant != Variant::no_scale) n += variant == Variant::scalar_scale ? 1 : s.out_dim;
    if (variant != Variant::no_shift) n += s.out_dim;
  }
  return n;
}

TEST(Attach, TrainableCountMatchesEnumeration) {
  const std::vector<std::string> policies = {"all",         "first:0",      "first:1",       "first:2",
                                             "without:mlp", "without:attn", "without:embed", "without:norm"};
  const std::vector<Variant> variants = {Variant::full, Variant::no_scale, Variant::no_shift, Variant::norm_only,
                                         Variant::scalar_scale};
  for (const ModelConfig& cfg : {ModelConfig::toy(), ModelConfig::vit_b16(100)}) {
    const LayerGraph graph = build_graph(cfg);
    for (const auto& policy : policies) {
      for (Variant v : variants) {
        SsfConfig sc;
        sc.sites = parse_site_policy(policy);
        sc.variant = v;
        EXPECT_EQ(ssf_trainable_count(graph, sc), enumerate(cfg, policy, v)) << policy << " " << to_string(v);
      }
    }
  }
}

TEST(Attach, VitB16Counts) {
  const LayerGraph graph = build_graph(ModelConfig::vit_b16(100));
  SsfConfig sc;
  EXPECT_EQ(ssf_trainable_count(graph, sc), 205824u);
  sc.variant = Variant::norm_only;
  EXPECT_EQ(ssf_trainable_count(graph, sc) + 76900, 115300u);
}

TEST(Attach, FirstZeroLayersIsLinearProbing) {
  Model<double> m = build_model<double>(ModelConfig::toy());
  SsfConfig sc;
  sc.sites = SitePolicy::first_k_layers(0);
  const auto a = attach(m.params, m.graph, sc);
  EXPECT_EQ(a.trainable, (std::vector<std::string>{"head.bias", "head.weight"}));
  EXPECT_TRUE(a.hooks.sites.empty());
  ASSERT_EQ(a.warnings.size(), 1u);
}

TEST(Attach, VariantsShapeAndFreezeFactors) {
  for (Variant v : {Variant::no_scale, Variant::no_shift, Variant::scalar_scale, Variant::norm_only}) {
    Model<double> m = build_model<double>(ModelConfig::toy());
    SsfConfig sc;
    sc.variant = v;
    const auto a = attach(m.params, m.graph, sc);
    if (v == Variant::no_scale) {
      EXPECT_TRUE(m.params.frozen("ssf.blocks.0.fc1.gamma"));
      for (double g : m.params.at("ssf.blocks.0.fc1.gamma").data()) EXPECT_EQ(g, 1.0);
    }
    if (v == Variant::no_shift) {
      EXPECT_TRUE(m.params.frozen("ssf.embed.beta"));
      for (double b : m.params.at("ssf.embed.beta").data()) EXPECT_EQ(b, 0.0);
    }
    if (v == Variant::scalar_scale) EXPECT_EQ(m.params.at("ssf.blocks.1.qkv.gamma").numel(), 1u);
    if (v == Variant::norm_only) {
      EXPECT_EQ(a.hooks.sites.size(), 5u);
      EXPECT_FALSE(m.params.contains("ssf.blocks.0.qkv.gamma"));
    }
    std::size_t trainable = 0;
    for (const auto& name : a.trainable) trainable += m.params.at(name).numel();
    EXPECT_EQ(trainable, ssf_trainable_count(m.graph, sc) + 4 * 32 + 4);
  }
}

TEST(Attach, RejectsFactorsOutsidePolicy) {
  Model<double> m = build_model<double>(ModelConfig::toy());
  attach(m.params, m.graph, SsfConfig{});
  SsfConfig narrower;
  narrower.sites = SitePolicy::first_k_layers(1);
  EXPECT_THROW(attach(m.params, m.graph, narrower), ConfigError);
}

TEST(Attach, ReattachKeepsExistingValues) {
  Model<double> m = build_model<double>(ModelConfig::toy());
  attach(m.params, m.graph, SsfConfig{});
  const auto before = oracle::to_vec(m.params.at("ssf.blocks.1.fc2.gamma").data());
  SsfConfig other;
  other.seed = 99;
  attach(m.params, m.graph, other);
  EXPECT_EQ(before, oracle::to_vec(m.params.at("ssf.blocks.1.fc2.gamma").data()));
}

TEST(Attach, GradientConfinement) {
  Rng rng(4);
  Model<double> m = build_model<double>(ModelConfig::toy());
  const auto a = attach(m.params, m.graph, SsfConfig{});
  const auto x = random_tensor(rng, {2, 3, 16, 16});
  const std::vector<int> labels = {1, 3};
  Tape<double> tape;
  TensorD loss;
  {
    TapeScope<double> scope(tape);
    loss = ops::cross_entropy(forward(m, x, a.hooks), labels);
  }
  tape.backward(loss);
  for (const auto& [name, e] : m.params) {
    if (e.frozen) {
      EXPECT_FALSE(e.value.has_grad()) << name;
    } else {
      ASSERT_TRUE(e.value.has_grad()) << name;
      double norm = 0;
      for (double g : e.value.grad()) norm += g * g;
      EXPECT_GT(norm, 0.0) << name;
    }
  }
  EXPECT_EQ(a.trainable.size(), 2u * 14 + 2);
}

TEST(Attach, MatchesStraightLineOracleWithFactors) {
  Rng rng(5);
  ModelConfig cfg = ModelConfig::toy();
  Model<double> m = build_model<double>(cfg);
  SsfConfig sc;
  sc.init_std = 0.3;
  sc.variant = Variant::scalar_scale;
  const auto a = attach(m.params, m.graph, sc);
  const auto x = random_tensor(rng, {1, 3, 16, 16}, 0.5, 0.5);
  const auto logits = forward(m, x, a.hooks);
  const auto p = oracle::to_map(m.params);
  const auto ref = oracle::vit_forward(cfg, p, oracle::to_vec(x.data()), oracle::ssf_factors(p));
  for (std::size_t c = 0; c < cfg.num_classes; ++c) EXPECT_NEAR(logits.data()[c], ref[c], 1e-10);
}

}  // namespace
