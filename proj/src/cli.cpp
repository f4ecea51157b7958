// Copyright (c) 2026 The SSF-PEFT Authors
// SPDX-License-Identifier: Apache-2.0

#include "ssf/cli.h"

#include <array>
#include <fstream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "ssf/checkpoint.h"
#include "ssf/data.h"
#include "ssf/errors.h"
#include "ssf/gradcheck.h"
#include "ssf/hash.h"
#include "ssf/peft.h"
#include "ssf/reparam.h"
#include "ssf/train.h"

namespace ssf {

namespace {

struct Globals {
  std::string model = "toy";
  std::string method = "ssf";
  std::string sites = "all";
  std::string init = "normal";
  double init_std = 0.02;
  std::string variant = "full";
  std::size_t adapter_dim = 8;
  std::size_t prompts = 1;
  std::uint64_t seed = 0;
  std::string dtype = "f32";
  bool json = false;
  bool eq1_literal = false;
  std::size_t classes = 0;
};

struct TrainFlags {
  std::optional<std::size_t> epochs;
  std::optional<std::size_t> warmup_epochs;
  std::optional<double> lr;
  std::optional<double> weight_decay;
  std::optional<std::size_t> batch_size;
  std::optional<std::size_t> max_steps;
  std::string config;
  std::string log;
  std::string summary;
  bool keep_head = false;
};

struct Context {
  Globals g;
  std::ostream& out;
  std::ostream& err;
};

void add_train_flags(CLI::App* sub, TrainFlags& f) {
  sub->add_option("--epochs", f.epochs, "Training epochs");
  sub->add_option("--warmup-epochs", f.warmup_epochs, "Linear warmup epochs");
  sub->add_option("--lr", f.lr, "Base learning rate");
  sub->add_option("--weight-decay", f.weight_decay, "Decoupled weight decay");
  sub->add_option("--batch-size", f.batch_size, "Mini-batch size");
  sub->add_option("--max-steps", f.max_steps, "Stop after this many optimizer steps");
  sub->add_option("--config", f.config, "Run config JSON (flags override it)")->check(CLI::ExistingFile);
  sub->add_option("--log", f.log, "Write one JSON line per epoch to this file");
  sub->add_option("--summary", f.summary, "Write the run summary JSON to this file");
}

ModelConfig resolve_model(const Globals& g) {
  ModelConfig cfg;
  if (g.model == "toy") {
    cfg = ModelConfig::toy();
    if (g.classes != 0) cfg.num_classes = g.classes;
  } else if (g.model == "vitb16") {
    cfg = ModelConfig::vit_b16(g.classes != 0 ? g.classes : 1000);
  } else {
    throw ConfigError(fmt::format("unknown model '{}' (expected toy|vitb16)", g.model));
  }
  cfg.seed = g.seed;
  cfg.eq1_literal = g.eq1_literal;
  cfg.validate();
  return cfg;
}

MethodConfig resolve_method(const Globals& g) {
  MethodConfig m;
  m.method = parse_method(g.method);
  m.adapter_dim = g.adapter_dim;
  m.prompts = g.prompts;
  m.ssf.sites = parse_site_policy(g.sites);
  m.ssf.init = parse_init_scheme(g.init);
  m.ssf.variant = parse_variant(g.variant);
  m.ssf.init_std = g.init_std;
  m.ssf.seed = g.seed;
  if (!(g.init_std >= 0.0)) throw ConfigError("--ssf-init-std must be non-negative");
  return m;
}

TrainConfig resolve_train(const Globals& g, const TrainFlags& f, TrainConfig base) {
  if (!f.config.empty()) {
    std::ifstream in(f.config);
    try {
      base = TrainConfig::from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(fmt::format("{}: {}", f.config, e.what()));
    }
  }
  if (f.epochs) base.epochs = *f.epochs;
  if (f.warmup_epochs) base.warmup_epochs = *f.warmup_epochs;
  if (f.lr) base.base_lr = *f.lr;
  if (f.weight_decay) base.weight_decay = *f.weight_decay;
  if (f.batch_size) base.batch_size = *f.batch_size;
  if (f.max_steps) base.max_steps = *f.max_steps;
  base.seed = g.seed;
  base.dtype = parse_dtype(g.dtype);
  base.reset_head = !f.keep_head;
  base.validate();
  return base;
}

void emit(const Context& ctx, std::string_view command, const nlohmann::json& result, const std::string& text) {
  if (ctx.g.json) {
    ctx.out << nlohmann::json{{"schema", kCliSchema}, {"command", command}, {"result", result}}.dump() << '\n';
  } else {
    ctx.out << text;
  }
}

void write_text(const std::string& path, const std::string& text) {
  write_file_bytes(path, std::as_bytes(std::span<const char>(text.data(), text.size())));
}

std::array<double, 3> parse_triple(const std::string& text, const char* flag) {
  std::array<double, 3> v{};
  std::stringstream ss(text);
  std::string part;
  std::size_t i = 0;
  while (std::getline(ss, part, ',')) {
    if (i >= 3) break;
    try {
      v[i++] = std::stod(part);
    } catch (const std::exception&) {
      throw ConfigError(fmt::format("{} expects three comma-separated numbers", flag));
    }
  }
  if (i != 3 || std::getline(ss, part, ',')) {
    throw ConfigError(fmt::format("{} expects three comma-separated numbers", flag));
  }
  return v;
}

EpochCallback epoch_printer(const Context& ctx) {
  if (ctx.g.json) return {};
  return [&ctx](const EpochRecord& e) {
    ctx.out << fmt::format("epoch {:3d}  loss {:.4f}  val_acc {:.4f}  lr {:.3g}\n", e.epoch, e.train_loss,
                           e.val_acc, e.lr);
    ctx.out.flush();
  };
}

int finish_run(const Context& ctx, std::string_view command, const TrainResult& res, const TrainFlags& f,
               const std::string& out_path) {
  save_checkpoint(res.checkpoint, out_path);
  if (!f.log.empty()) write_text(f.log, res.record.epoch_lines());
  nlohmann::json summary = res.record.summary();
  summary["checkpoint"] = out_path;
  if (!f.summary.empty()) write_text(f.summary, summary.dump(2) + "\n");
  summary["epochs"] = nlohmann::json::array();
  for (const auto& e : res.record.epochs) {
    summary["epochs"].push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_acc", e.val_acc}, {"lr", e.lr}});
  }
  std::string text;
  for (const auto& w : res.record.warnings) text += fmt::format("warning: {}\n", w);
  text += fmt::format("steps {}  final val_acc {:.4f}  frozen tensors {} (unchanged)  wall {:.1f}s\nwrote {}\n",
                      res.record.steps, res.record.final_val_acc, res.record.frozen_before.size(),
                      res.record.wall_clock_s, out_path);
  emit(ctx, command, summary, text);
  return kExitOk;
}

double fold_tolerance(DType dtype) { return dtype == DType::f32 ? 1e-5 : 1e-10; }

int report_fold_verification(const Context& ctx, const Checkpoint& ckpt, std::size_t samples,
                             nlohmann::json& result, std::string& text) {
  const DType dtype = parse_dtype(ctx.g.dtype);
  const double dev = dtype == DType::f32 ? fold_max_deviation<float>(ckpt, samples, ctx.g.seed)
                                         : fold_max_deviation<double>(ckpt, samples, ctx.g.seed);
  const double tol = fold_tolerance(dtype);
  const bool ok = dev <= tol;
  result["verify"] = {{"samples", samples}, {"dtype", to_string(dtype)}, {"max_abs_logit_deviation", dev},
                      {"tolerance", tol}, {"passed", ok}};
  text += fmt::format("verify: {} samples ({})  max |dlogit| = {:.3e}  tolerance {:.0e}  {}\n", samples,
                      to_string(dtype), dev, tol, ok ? "ok" : "FAILED");
  return ok ? kExitOk : kExitVerify;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Context ctx{Globals{}, out, err};
  Globals& g = ctx.g;
  CLI::App app{"Scale-and-shift parameter-efficient fine-tuning toolkit", "ssf"};
  app.fallthrough();
  app.require_subcommand(1);
  app.add_option("--model", g.model, "Backbone preset: toy|vitb16")->capture_default_str();
  app.add_option("--method", g.method, "full|linear|bias|adapter|vpt_shallow|vpt_deep|ssf")->capture_default_str();
  app.add_option("--ssf-sites", g.sites, "all | first:K | without:{mlp,attn,embed,norm}")->capture_default_str();
  app.add_option("--ssf-init", g.init, "normal|trunc_normal|uniform|constant|random_zero_mean")->capture_default_str();
  app.add_option("--ssf-init-std", g.init_std, "Init standard deviation")->capture_default_str();
  app.add_option("--ssf-variant", g.variant, "full|no_scale|no_shift|norm_only|scalar_scale")->capture_default_str();
  app.add_option("--adapter-dim", g.adapter_dim, "Adapter bottleneck width d'")->capture_default_str();
  app.add_option("--prompts", g.prompts, "VPT prompt count n")->capture_default_str();
  app.add_option("--seed", g.seed, "Seed")->capture_default_str();
  app.add_option("--dtype", g.dtype, "f32|f64")->capture_default_str();
  app.add_option("--classes", g.classes, "Number of classes (0 keeps the preset)");
  app.add_flag("--json", g.json, "Machine-readable JSON output");
  app.add_flag("--eq1-literal", g.eq1_literal, "Scale attention logits by 1/sqrt(d) instead of 1/sqrt(d_head)");

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Write a synthetic dataset directory");
  std::string gen_task;
  std::string gen_out;
  SyntheticParams sp;
  std::string gain_text;
  std::string offset_text;
  bool no_remap = false;
  gen->add_option("--task", gen_task, "upstream_shapes|downstream_shifted")->required();
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--train-size", sp.train_size, "Training samples")->capture_default_str();
  gen->add_option("--val-size", sp.val_size, "Validation samples")->capture_default_str();
  gen->add_option("--gain", gain_text, "Per-channel gain a,b,c (downstream)");
  gen->add_option("--offset", offset_text, "Per-channel offset a,b,c (downstream)");
  gen->add_flag("--no-remap", no_remap, "Keep downstream labels unpermuted");

  // pretrain
  auto* pre = app.add_subcommand("pretrain", "Train a backbone from scratch");
  std::string pre_data;
  std::string pre_out;
  TrainFlags pre_flags;
  pre->add_option("--data", pre_data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  pre->add_option("--out", pre_out, "Output checkpoint")->required();
  add_train_flags(pre, pre_flags);

  // finetune
  auto* ft = app.add_subcommand("finetune", "Fine-tune a checkpoint with the selected method");
  std::string ft_in;
  std::string ft_data;
  std::string ft_out;
  TrainFlags ft_flags;
  ft->add_option("--in", ft_in, "Pretrained checkpoint")->required()->check(CLI::ExistingFile);
  ft->add_option("--data", ft_data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  ft->add_option("--out", ft_out, "Output checkpoint")->required();
  ft->add_flag("--keep-head", ft_flags.keep_head, "Keep the pretrained head instead of re-initializing it");
  add_train_flags(ft, ft_flags);

  // fold
  auto* fold = app.add_subcommand("fold", "Absorb scale/shift factors into the backbone");
  std::string fold_in;
  std::string fold_out;
  std::size_t fold_verify = 0;
  fold->add_option("--in", fold_in, "Trained SSF checkpoint")->required()->check(CLI::ExistingFile);
  fold->add_option("--out", fold_out, "Folded checkpoint")->required();
  fold->add_option("--verify", fold_verify, "Compare folded and hooked logits on this many random inputs");

  // verify-fold
  auto* vf = app.add_subcommand("verify-fold", "Check folded-vs-hooked logit equivalence");
  std::string vf_in;
  std::size_t vf_samples = 50;
  vf->add_option("--in", vf_in, "Trained SSF checkpoint")->required()->check(CLI::ExistingFile);
  vf->add_option("--samples", vf_samples, "Random inputs")->capture_default_str();

  // budget
  auto* bud = app.add_subcommand("budget", "Trainable parameters and extra inference cost");

  // eval
  auto* ev = app.add_subcommand("eval", "Classification accuracy of a checkpoint");
  std::string ev_in;
  std::string ev_data;
  std::string ev_split = "val";
  ev->add_option("--in", ev_in, "Checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--data", ev_data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--split", ev_split, "train|val")->capture_default_str()->check(CLI::IsMember({"train", "val"}));

  // grad-check
  auto* gc = app.add_subcommand("grad-check", "Finite-difference gradient verification");
  std::size_t gc_instances = 30;
  gc->add_option("--instances", gc_instances, "Random instances per case")->capture_default_str();

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    const DType dtype = parse_dtype(g.dtype);
    if (gen->parsed()) {
      const TaskId task = parse_task(gen_task);
      sp.num_classes = g.classes != 0 ? g.classes : sp.num_classes;
      if (!gain_text.empty()) sp.gain = parse_triple(gain_text, "--gain");
      if (!offset_text.empty()) sp.offset = parse_triple(offset_text, "--offset");
      sp.reverse_labels = !no_remap;
      const DatasetSplits splits = generate_synthetic(task, sp, g.seed);
      nlohmann::json info = {{"task", to_string(task)}, {"seed", g.seed}, {"params", sp.to_json()}};
      save_dataset(splits, gen_out, info);
      info["train_size"] = splits.train.size();
      info["val_size"] = splits.val.size();
      info["out"] = gen_out;
      emit(ctx, "gen-data", info,
           fmt::format("wrote {} train / {} val samples of {} to {}\n", splits.train.size(), splits.val.size(),
                       to_string(task), gen_out));
      return kExitOk;
    }
    if (pre->parsed()) {
      const ModelConfig mc = resolve_model(g);
      const TrainConfig tc = resolve_train(g, pre_flags, pretrain_recipe());
      const DatasetSplits data = load_dataset(pre_data);
      return finish_run(ctx, "pretrain", pretrain(mc, data, tc, epoch_printer(ctx)), pre_flags, pre_out);
    }
    if (ft->parsed()) {
      const MethodConfig mc = resolve_method(g);
      const TrainConfig tc = resolve_train(g, ft_flags, finetune_recipe());
      const Checkpoint ckpt = load_checkpoint(ft_in);
      const DatasetSplits data = load_dataset(ft_data);
      return finish_run(ctx, "finetune", finetune(ckpt, mc, data, tc, epoch_printer(ctx)), ft_flags, ft_out);
    }
    if (fold->parsed()) {
      const Checkpoint train = load_checkpoint(fold_in);
      const Checkpoint folded = fold_checkpoint(train);
      save_checkpoint(folded, fold_out);
      nlohmann::json result = {{"in", fold_in},
                               {"out", fold_out},
                               {"tensors", folded.params.size()},
                               {"provenance", folded.meta.provenance}};
      std::string text = fmt::format("folded {} -> {} ({} tensors, no ssf.* remaining)\n", fold_in, fold_out,
                                     folded.params.size());
      int code = kExitOk;
      if (fold_verify > 0) code = report_fold_verification(ctx, train, fold_verify, result, text);
      emit(ctx, "fold", result, text);
      return code;
    }
    if (vf->parsed()) {
      const Checkpoint train = load_checkpoint(vf_in);
      nlohmann::json result = {{"in", vf_in}};
      std::string text;
      const int code = report_fold_verification(ctx, train, vf_samples, result, text);
      emit(ctx, "verify-fold", result, text);
      return code;
    }
    if (bud->parsed()) {
      const ModelConfig mc = resolve_model(g);
      const MethodConfig m = resolve_method(g);
      m.validate(mc);
      const BudgetReport r = budget(m, mc);
      nlohmann::json result = budget_to_json(r);
      result["model"] = g.model;
      result["num_classes"] = mc.num_classes;
      emit(ctx, "budget", result, format_budget_table(r));
      return kExitOk;
    }
    if (ev->parsed()) {
      const Checkpoint ckpt = load_checkpoint(ev_in);
      const DatasetSplits data = load_dataset(ev_data);
      const Dataset& split = ev_split == "train" ? data.train : data.val;
      double acc = 0.0;
      if (dtype == DType::f32) {
        const BoundModel<float> bm = bind_checkpoint<float>(ckpt);
        acc = evaluate(bm.model, bm.binding.hooks, split);
      } else {
        const BoundModel<double> bm = bind_checkpoint<double>(ckpt);
        acc = evaluate(bm.model, bm.binding.hooks, split);
      }
      emit(ctx, "eval", {{"in", ev_in}, {"split", ev_split}, {"samples", split.size()}, {"accuracy", acc}},
           fmt::format("{} accuracy on {} ({} samples): {:.4f}\n", ev_in, ev_split, split.size(), acc));
      return kExitOk;
    }
    if (gc->parsed()) {
      const GradCheckReport r = run_grad_check(g.seed, dtype, gc_instances);
      std::string text;
      for (const auto& c : r.cases) {
        text += fmt::format("{:<16} {:3d} instances  max rel err {:.3e}\n", c.name, c.instances, c.max_rel_err);
      }
      text += fmt::format("max relative gradient error {:.3e} (tolerance {:.0e}, {})  {}\n", r.max_rel_err(),
                          r.tolerance, to_string(dtype), r.passed() ? "ok" : "FAILED");
      emit(ctx, "grad-check", r.to_json(), text);
      return r.passed() ? kExitOk : kExitVerify;
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  return kExitUsage;
}

}  // namespace ssf
