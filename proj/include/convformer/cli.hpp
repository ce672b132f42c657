#pragma once

#include <chrono>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "convformer/accounting.hpp"
#include "convformer/backbone.hpp"
#include "convformer/checkpoint.hpp"
#include "convformer/config_io.hpp"
#include "convformer/error.hpp"
#include "convformer/format.hpp"
#include "convformer/gradcheck_suite.hpp"
#include "convformer/train.hpp"

namespace convformer {

// Exit codes: 0 success, 1 runtime failure (gradient check over threshold,
// diverged training), 2 invalid input (flags, presets, config files,
// geometry, unwritable paths).
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

// "convformer-s", "convformer-l", "tiny" or "file:<path>".
inline ModelConfig resolve_model(const std::string& spec) {
  if (spec == "convformer-s") return presets::convformer_s();
  if (spec == "convformer-l") return presets::convformer_l();
  if (spec == "tiny") return presets::tiny();
  if (spec.rfind("file:", 0) == 0) return load_config_file(spec.substr(5));
  throw ConfigError("unknown model '" + spec + "' (expected convformer-s, convformer-l, tiny or file:<path>)");
}

inline std::vector<std::int64_t> parse_dims(const std::string& text, std::size_t count,
                                            const std::string& what) {
  std::vector<std::int64_t> dims;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t next = text.find('x', pos);
    const std::string part = text.substr(pos, next == std::string::npos ? std::string::npos : next - pos);
    if (part.empty() || part.find_first_not_of("0123456789") != std::string::npos || part.size() > 12) {
      throw ConfigError("bad " + what + " '" + text + "'");
    }
    dims.push_back(std::stoll(part));
    if (next == std::string::npos) break;
    pos = next + 1;
  }
  if (dims.size() != count) throw ConfigError("bad " + what + " '" + text + "'");
  return dims;
}

inline nlohmann::json report_to_json(const CostReport& r) {
  nlohmann::json breakdown = nlohmann::json::array();
  for (const auto& e : r.breakdown) {
    breakdown.push_back({{"module", e.path}, {"params", e.params}, {"macs", e.macs}});
  }
  return {{"model", r.model},
          {"input", {{"height", r.input.h}, {"width", r.input.w}}},
          {"mac_convention", "conv and linear multiply-accumulates per image; other ops 0"},
          {"total_params", r.total_params},
          {"total_macs", r.total_macs},
          {"breakdown", breakdown}};
}

namespace cli_detail {

struct CountArgs {
  std::string model = "convformer-s";
  std::string ablation = "none";
  std::string input = "224x224";
  std::string format = "text";
};

struct ForwardArgs {
  std::string model = "tiny";
  std::string checkpoint;
  std::uint64_t seed = 0;
  std::uint64_t input_seed = 0;
  std::string input_shape = "1x3x32x32";
};

struct GradcheckArgs {
  std::string scope = "all";
  std::uint64_t seed = 1;
};

struct TrainArgs {
  std::string model = "tiny";
  std::uint64_t data_seed = 1;
  std::uint64_t seed = 0;
  std::int64_t steps = 200;
  std::int64_t samples = 100;
  std::int64_t image_size = 32;
  std::int64_t batch = 0;
  double lr = 2e-3;
  std::string optimizer = "adam";
  std::string schedule = "constant";
  std::int64_t log_every = 20;
  std::string out = "metrics.csv";
  std::string save;
};

inline int cmd_count(const CountArgs& a, std::ostream& out) {
  ModelConfig cfg = resolve_model(a.model);
  const auto ablation = parse_ablation(a.ablation);
  if (!ablation) throw ConfigError("unknown ablation '" + a.ablation + "'");
  cfg = apply_ablation(cfg, *ablation);
  cfg.validate();
  const auto hw = parse_dims(a.input, 2, "input size (expected HxW)");
  const CostReport r = cost_report(cfg, hw[0], hw[1]);
  if (a.format == "structured") {
    out << report_to_json(r).dump(2) << "\n";
  } else {
    out << render_text(r);
  }
  return kExitOk;
}

inline int cmd_forward(const ForwardArgs& a, bool model_given, std::ostream& out) {
  Model<float> model = [&] {
    if (a.checkpoint.empty()) {
      return build_model<float>(resolve_model(a.model), a.seed);
    }
    if (!model_given) return load_checkpoint<float>(a.checkpoint);
    Model<float> m = build_model<float>(resolve_model(a.model), static_cast<Rng*>(nullptr));
    load_checkpoint_into(m, a.checkpoint);
    return m;
  }();
  const auto d = parse_dims(a.input_shape, 4, "input shape (expected NxCxHxW)");
  const Shape4 shape{d[0], d[1], d[2], d[3]};
  if (shape.numel() == 0) throw GeometryError("input shape " + shape.to_string() + " is empty");
  Rng rng(a.input_seed);
  Tensor<float> images(shape);
  for (auto& v : images.data()) v = static_cast<float>(rng.normal());

  const auto t0 = std::chrono::steady_clock::now();
  const Tensor<float> logits = predict(model, images);
  const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();

  out << "model " << model.config.name << "\n";
  out << "input " << shape.to_string() << "\n";
  out << "logits " << logits.shape().to_string() << "\n";
  const std::int64_t k = logits.shape().c;
  for (std::int64_t n = 0; n < logits.shape().n; ++n) {
    const float* row = logits.raw() + n * k;
    double sum = 0.0;
    for (std::int64_t j = 0; j < k; ++j) sum += row[j];
    out << "sample " << n << " argmax " << argmax_row(logits, n) << " max "
        << format_number(*std::max_element(row, row + k)) << " mean "
        << format_number(sum / static_cast<double>(k)) << "\n";
  }
  out << "latency_ms " << format_number(ms) << "\n";
  return kExitOk;
}

inline int cmd_gradcheck(const GradcheckArgs& a, std::ostream& out, std::ostream& err) {
  std::vector<GradScope> scopes;
  if (a.scope == "all") {
    scopes = {GradScope::ops, GradScope::mca, GradScope::block, GradScope::model};
  } else if (auto s = parse_grad_scope(a.scope)) {
    scopes = {*s};
  } else {
    err << "error: unknown scope '" << a.scope << "' (expected ops, mca, block, model or all)\n";
    return kExitUsage;
  }
  out << std::left << std::setw(7) << "scope" << std::setw(28) << "check" << std::setw(16)
      << "max_rel_error" << std::setw(9) << "coords" << "status\n";
  const GradCheckRow* worst = nullptr;
  std::vector<GradCheckRow> rows;
  for (auto s : scopes) {
    for (auto& row : run_gradcheck_scope(s, a.seed)) rows.push_back(std::move(row));
  }
  for (const auto& row : rows) {
    out << std::left << std::setw(7) << row.scope << std::setw(28) << row.name << std::setw(16)
        << format_number(row.result.max_rel_error) << std::setw(9) << row.result.coordinates_checked
        << (row.passed() ? "pass" : "FAIL") << "\n";
    if (!worst || row.result.max_rel_error > worst->result.max_rel_error) worst = &row;
  }
  if (worst && !worst->passed()) {
    err << "gradient check failed (threshold " << format_number(kGradCheckThreshold)
        << "); worst offender: " << worst->scope << "/" << worst->name << " tensor "
        << worst->worst_tensor << " index " << worst->result.worst_index << " analytic "
        << format_number(worst->result.worst_analytic) << " numeric "
        << format_number(worst->result.worst_numeric) << " rel_error "
        << format_number(worst->result.max_rel_error) << "\n";
    return kExitFailure;
  }
  out << "all checks below " << format_number(kGradCheckThreshold) << "\n";
  return kExitOk;
}

inline void require_writable(const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot write to '" + path + "'");
}

inline int cmd_train(const TrainArgs& a, std::ostream& out) {
  const ModelConfig cfg = resolve_model(a.model);
  cfg.validate();
  if (a.steps < 0) throw ConfigError("--steps must be >= 0");
  require_writable(a.out);
  if (!a.save.empty()) require_writable(a.save);

  const ToyDataset data =
      make_toy_dataset(a.data_seed, a.samples, static_cast<int>(cfg.num_classes), a.image_size);
  Model<float> model = build_model<float>(cfg, a.seed);

  TrainConfig tc;
  tc.steps = a.steps;
  tc.batch_size = a.batch;
  tc.seed = a.seed;
  tc.optim.lr = a.lr;
  if (a.optimizer == "adam") {
    tc.optim.kind = OptimizerKind::adam;
  } else if (a.optimizer == "sgd") {
    tc.optim.kind = OptimizerKind::sgd;
  } else {
    throw ConfigError("unknown optimizer '" + a.optimizer + "'");
  }
  if (a.schedule == "constant") {
    tc.optim.schedule = Schedule::constant;
  } else if (a.schedule == "cosine") {
    tc.optim.schedule = Schedule::cosine;
  } else {
    throw ConfigError("unknown schedule '" + a.schedule + "'");
  }

  std::vector<MetricRow> log;
  auto write_csv = [&] {
    std::ofstream csv(a.out, std::ios::trunc);
    write_metrics_csv(csv, log);
    if (!csv) throw FormatError("failed writing '" + a.out + "'");
  };
  try {
    log = train_steps(model, data, tc);
  } catch (const TrainingError&) {
    write_csv();  // header only; no checkpoint for a diverged run
    throw;
  }
  write_csv();
  for (const auto& row : log) {
    if (a.log_every > 0 && (row.step % a.log_every == 0 || row.step + 1 == a.steps)) {
      out << "step " << row.step << " loss " << format_number(row.loss) << " accuracy "
          << format_number(row.accuracy) << "\n";
    }
  }
  if (!a.save.empty()) save_checkpoint(model, a.save);
  if (!log.empty()) out << "final_accuracy " << format_number(log.back().accuracy) << "\n";
  out << "eval_accuracy " << format_number(evaluate_accuracy(model, data)) << "\n";
  return kExitOk;
}

}  // namespace cli_detail

// Entry point shared by the executable and the tests.
inline int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  using namespace cli_detail;
  CLI::App app{"ConvFormer backbone toolkit: cost accounting, inference, gradient checks, toy training"};
  app.require_subcommand(1);

  CountArgs count;
  auto* c = app.add_subcommand("count", "Parameter and MAC counts of a model");
  c->add_option("--model", count.model, "convformer-s | convformer-l | tiny | file:<path>");
  c->add_option("--ablation", count.ablation, "none | no-expand | no-parallel | no-residual | no-gating");
  c->add_option("--input", count.input, "input size HxW");
  c->add_option("--format", count.format, "text | structured")
      ->check(CLI::IsMember({"text", "structured"}));

  ForwardArgs fwd;
  auto* f = app.add_subcommand("forward", "Eval-mode forward pass on a seeded random input");
  auto* fwd_model = f->add_option("--model", fwd.model, "convformer-s | convformer-l | tiny | file:<path>");
  auto* fwd_ckpt = f->add_option("--checkpoint", fwd.checkpoint, "checkpoint to load");
  auto* fwd_seed = f->add_option("--seed", fwd.seed, "initialization seed");
  fwd_ckpt->excludes(fwd_seed);
  f->add_option("--input-seed", fwd.input_seed, "seed of the random input tensor");
  f->add_option("--input-shape", fwd.input_shape, "NxCxHxW");

  GradcheckArgs gc;
  auto* g = app.add_subcommand("gradcheck", "Finite-difference check of the autodiff tape");
  g->add_option("--scope", gc.scope, "ops | mca | block | model | all");
  g->add_option("--seed", gc.seed, "seed for inputs and parameters");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train on the synthetic grating dataset");
  t->add_option("--model", tr.model, "model (class count sets the dataset classes)");
  t->add_option("--data-seed", tr.data_seed, "dataset seed");
  t->add_option("--seed", tr.seed, "initialization and batching seed");
  t->add_option("--steps", tr.steps, "optimizer steps");
  t->add_option("--samples", tr.samples, "dataset size");
  t->add_option("--image-size", tr.image_size, "square image side (multiple of 32)");
  t->add_option("--batch", tr.batch, "batch size, 0 = whole dataset");
  t->add_option("--lr", tr.lr, "learning rate");
  t->add_option("--optimizer", tr.optimizer, "adam | sgd")->check(CLI::IsMember({"adam", "sgd"}));
  t->add_option("--schedule", tr.schedule, "constant | cosine")
      ->check(CLI::IsMember({"constant", "cosine"}));
  t->add_option("--log-every", tr.log_every, "print every n-th step, 0 = quiet");
  t->add_option("--out", tr.out, "metrics CSV path");
  t->add_option("--save", tr.save, "checkpoint path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*c) return cmd_count(count, out);
    if (*f) return cmd_forward(fwd, fwd_model->count() > 0, out);
    if (*g) return cmd_gradcheck(gc, out, err);
    if (*t) return cmd_train(tr, out);
  } catch (const TrainingError& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const GeometryError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ShapeError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const SizeError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace convformer
