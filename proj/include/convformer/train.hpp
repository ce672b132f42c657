#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <ostream>
#include <string>
#include <vector>

#include "convformer/autodiff.hpp"
#include "convformer/backbone.hpp"
#include "convformer/error.hpp"
#include "convformer/format.hpp"
#include "convformer/rng.hpp"
#include "convformer/tensor.hpp"

namespace convformer {

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

struct ToyDataset {
  Tensor<float> images;  // [M, 3, S, S]
  std::vector<int> labels;
  int num_classes = 0;
  std::uint64_t seed = 0;

  std::int64_t size() const { return images.shape().n; }
};

// Class c is a sinusoidal grating at orientation pi*c/k with a class-specific
// per-channel phase, scaled by a random contrast in [0.8, 1.2] and corrupted
// by Gaussian noise (std 0.3). Labels cycle through the classes before a
// seeded shuffle, so every class count is floor(M/k) or ceil(M/k).
inline ToyDataset make_toy_dataset(std::uint64_t seed, std::int64_t samples, int classes,
                                   std::int64_t size) {
  if (classes <= 0) throw ConfigError("toy dataset: class count must be positive");
  if (samples < classes) throw ConfigError("toy dataset: need at least one sample per class");
  if (size <= 0) throw ConfigError("toy dataset: image size must be positive");
  Rng rng(seed);
  ToyDataset ds;
  ds.num_classes = classes;
  ds.seed = seed;
  ds.labels.resize(static_cast<std::size_t>(samples));
  for (std::int64_t i = 0; i < samples; ++i) ds.labels[static_cast<std::size_t>(i)] = static_cast<int>(i % classes);
  for (std::int64_t i = samples - 1; i > 0; --i) {
    const auto j = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(i + 1)));
    std::swap(ds.labels[static_cast<std::size_t>(i)], ds.labels[static_cast<std::size_t>(j)]);
  }
  ds.images = Tensor<float>({samples, 3, size, size});
  constexpr double frequency = 2.0;
  for (std::int64_t n = 0; n < samples; ++n) {
    const int label = ds.labels[static_cast<std::size_t>(n)];
    const double theta = std::numbers::pi * label / classes;
    const double contrast = rng.uniform(0.8, 1.2);
    for (std::int64_t c = 0; c < 3; ++c) {
      const double phase = 2.0 * std::numbers::pi * ((label * 3 + c) % 7) / 7.0;
      for (std::int64_t h = 0; h < size; ++h) {
        for (std::int64_t w = 0; w < size; ++w) {
          const double u = static_cast<double>(w) / size;
          const double v = static_cast<double>(h) / size;
          const double t = u * std::cos(theta) + v * std::sin(theta);
          const double value =
              contrast * std::sin(2.0 * std::numbers::pi * frequency * t + phase) + 0.3 * rng.normal();
          ds.images(n, c, h, w) = static_cast<float>(value);
        }
      }
    }
  }
  return ds;
}

// Selected samples of a batch-major tensor, in the given order.
template <class T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<std::int64_t>& rows) {
  const Shape4& s = x.shape();
  const std::int64_t per = s.c * s.h * s.w;
  Tensor<T> out({static_cast<std::int64_t>(rows.size()), s.c, s.h, s.w});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(x.raw() + rows[i] * per, per, out.raw() + static_cast<std::int64_t>(i) * per);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

// Mean over the batch of -log softmax(logits)[label], max-subtracted.
template <class T>
double cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
  Tape<T> tape;
  const Var z = tape.input(logits);
  return static_cast<double>(tape.value(tape.cross_entropy(z, labels))[0]);
}

template <class T>
int argmax_row(const Tensor<T>& logits, std::int64_t n) {
  const std::int64_t k = logits.shape().c * logits.shape().h * logits.shape().w;
  const T* row = logits.raw() + n * k;
  return static_cast<int>(std::max_element(row, row + k) - row);
}

template <class T>
double accuracy(const Tensor<T>& logits, const std::vector<int>& labels) {
  std::int64_t hits = 0;
  for (std::int64_t n = 0; n < logits.shape().n; ++n) {
    hits += argmax_row(logits, n) == labels[static_cast<std::size_t>(n)];
  }
  return static_cast<double>(hits) / static_cast<double>(std::max<std::int64_t>(1, logits.shape().n));
}

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

enum class OptimizerKind { sgd, adam };
enum class Schedule { constant, cosine };

struct OptimConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double lr = 1e-3;
  Schedule schedule = Schedule::constant;
  // SGD
  double momentum = 0.9;
  // Adam (decoupled weight decay, i.e. AdamW when weight_decay > 0)
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

template <class T>
struct OptimState {
  std::vector<Tensor<T>> first;   // momentum / first moment
  std::vector<Tensor<T>> second;  // second moment (Adam)
  std::int64_t step = 0;
};

inline double scheduled_lr(const OptimConfig& cfg, std::int64_t step, std::int64_t total_steps) {
  if (cfg.schedule == Schedule::constant || total_steps <= 0) return cfg.lr;
  return cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) /
                                        static_cast<double>(total_steps)));
}

// One update of every parameter.
//   sgd:  v = momentum*v + g;             p -= lr*v
//   adam: m = b1*m + (1-b1)*g;  s = b2*s + (1-b2)*g^2;
//         p -= lr * (m/(1-b1^t) / (sqrt(s/(1-b2^t)) + eps) + wd*p)
template <class T>
void optimizer_step(const std::vector<Tensor<T>*>& params, const std::vector<Tensor<T>>& grads,
                    const OptimConfig& cfg, OptimState<T>& state, double lr) {
  if (params.size() != grads.size()) throw ContractError("optimizer: params/grads size mismatch");
  if (state.first.empty()) {
    for (const auto* p : params) {
      state.first.push_back(Tensor<T>::zeros_like(*p));
      if (cfg.kind == OptimizerKind::adam) state.second.push_back(Tensor<T>::zeros_like(*p));
    }
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& p = *params[i];
    const Tensor<T>& g = grads[i];
    require_same_shape(p.shape(), g.shape(), "optimizer");
    Tensor<T>& m = state.first[i];
    if (cfg.kind == OptimizerKind::sgd) {
      for (std::int64_t j = 0; j < p.numel(); ++j) {
        m[j] = static_cast<T>(cfg.momentum * m[j] + g[j]);
        p[j] = static_cast<T>(p[j] - lr * m[j]);
      }
    } else {
      Tensor<T>& s = state.second[i];
      for (std::int64_t j = 0; j < p.numel(); ++j) {
        m[j] = static_cast<T>(cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j]);
        s[j] = static_cast<T>(cfg.beta2 * s[j] + (1.0 - cfg.beta2) * g[j] * g[j]);
        const double mhat = m[j] / bc1;
        const double shat = s[j] / bc2;
        p[j] = static_cast<T>(p[j] - lr * (mhat / (std::sqrt(shat) + cfg.eps) +
                                           cfg.weight_decay * p[j]));
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainConfig {
  OptimConfig optim{};
  std::int64_t steps = 200;
  // 0 means the whole dataset every step.
  std::int64_t batch_size = 0;
  std::uint64_t seed = 0;
};

struct MetricRow {
  std::int64_t step = 0;
  double loss = 0.0;
  double accuracy = 0.0;
  friend bool operator==(const MetricRow&, const MetricRow&) = default;
};

// Each step: train-mode forward on the batch (batch statistics), cross
// entropy, backward, update. The logged loss and accuracy are those of that
// forward pass, before the update.
template <class T>
std::vector<MetricRow> train_steps(Model<T>& model, const ToyDataset& data, const TrainConfig& cfg) {
  if (data.num_classes != model.config.num_classes) {
    throw ConfigError("train: dataset has " + std::to_string(data.num_classes) +
                      " classes, model predicts " + std::to_string(model.config.num_classes));
  }
  Rng rng(cfg.seed);
  Rng drop_rng = rng.split();
  const std::int64_t total = data.size();
  const std::int64_t batch = cfg.batch_size <= 0 ? total : std::min(cfg.batch_size, total);
  const Tensor<T> images = data.images.template cast<T>();

  std::vector<Tensor<T>*> params;
  for (auto& e : param_set(model, false)) params.push_back(e.tensor);

  std::vector<std::int64_t> order(static_cast<std::size_t>(total));
  for (std::int64_t i = 0; i < total; ++i) order[static_cast<std::size_t>(i)] = i;
  std::int64_t cursor = total;

  OptimState<T> state;
  std::vector<MetricRow> log;
  for (std::int64_t step = 0; step < cfg.steps; ++step) {
    std::vector<std::int64_t> rows;
    if (batch == total) {
      rows = order;
    } else {
      if (cursor + batch > total) {
        for (std::int64_t i = total - 1; i > 0; --i) {
          const auto j = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(i + 1)));
          std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
        }
        cursor = 0;
      }
      rows.assign(order.begin() + cursor, order.begin() + cursor + batch);
      cursor += batch;
    }
    std::vector<int> labels;
    labels.reserve(rows.size());
    for (auto r : rows) labels.push_back(data.labels[static_cast<std::size_t>(r)]);

    Tape<T> tape;
    const Var x = tape.input(gather_rows(images, rows));
    const Var logits = model_forward(tape, model, x, Mode::train, drop_rng);
    const Var loss = tape.cross_entropy(logits, labels);
    const double loss_value = static_cast<double>(tape.value(loss)[0]);
    if (!std::isfinite(loss_value)) {
      throw TrainingError("training diverged: non-finite loss at step " + std::to_string(step), step);
    }
    log.push_back({step, loss_value, accuracy(tape.value(logits), labels)});
    tape.backward(loss);
    std::vector<Tensor<T>> grads;
    grads.reserve(params.size());
    for (auto* p : params) grads.push_back(tape.param_grad(*p));
    optimizer_step(params, grads, cfg.optim, state, scheduled_lr(cfg.optim, step, cfg.steps));
  }
  return log;
}

// Eval-mode accuracy over the whole dataset.
template <class T>
double evaluate_accuracy(Model<T>& model, const ToyDataset& data) {
  return accuracy(predict(model, data.images.template cast<T>()), data.labels);
}

inline void write_metrics_csv(std::ostream& os, const std::vector<MetricRow>& log) {
  os << "step,loss,accuracy\n";
  for (const auto& row : log) {
    os << row.step << "," << format_number(row.loss) << "," << format_number(row.accuracy) << "\n";
  }
}

}  // namespace convformer
