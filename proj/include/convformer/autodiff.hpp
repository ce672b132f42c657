#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "convformer/error.hpp"
#include "convformer/nnops.hpp"
#include "convformer/rng.hpp"
#include "convformer/tensor.hpp"

namespace convformer {

// Handle to a node on a Tape.
struct Var {
  std::size_t id = 0;
  friend bool operator==(const Var&, const Var&) = default;
};

// Reverse-mode autodiff record. Nodes are appended in evaluation order, so the
// node list is a topological order and backward is a single reverse sweep.
template <class T>
class Tape {
 public:
  using Scalar = T;
  using Var = convformer::Var;
  // Called during backward with the node's own id; reads grad(self) and
  // accumulates into the input nodes.
  using BackwardFn = std::function<void(Tape&, const Var& self)>;

  void push_scope(const std::string&) {}
  void pop_scope() {}

  std::size_t size() const { return nodes_.size(); }

  const Tensor<T>& value(const Var& v) const { return node(v).value; }
  Shape4 shape(const Var& v) const { return node(v).value.shape(); }
  const std::string& op(const Var& v) const { return node(v).op; }
  const std::vector<Var>& inputs(const Var& v) const { return node(v).inputs; }

  // Gradient of the last backward root with respect to node v.
  const Tensor<T>& grad(const Var& v) const {
    const Node& n = node(v);
    if (!n.grad) throw GraphError("gradient requested before backward()");
    return *n.grad;
  }

  // Non-parameter leaf.
  Var input(Tensor<T> value) { return record("input", {}, std::move(value), nullptr); }

  // Leaf bound to an externally owned parameter tensor. Registering the same
  // tensor twice returns the same node.
  Var param(const Tensor<T>& t) {
    if (auto it = params_.find(&t); it != params_.end()) return it->second;
    const Var v = record("param", {}, t, nullptr);
    params_.emplace(&t, v);
    return v;
  }

  bool has_param(const Tensor<T>& t) const { return params_.count(&t) != 0; }

  // Gradient of a registered parameter; zeros if the tensor never entered the
  // graph.
  Tensor<T> param_grad(const Tensor<T>& t) const {
    auto it = params_.find(&t);
    if (it == params_.end()) return Tensor<T>::zeros_like(t);
    return grad(it->second);
  }

  Var record(std::string op, std::vector<Var> inputs, Tensor<T> value, BackwardFn backward) {
    for (const Var& in : inputs) {
      if (in.id >= nodes_.size()) {
        throw GraphError("op '" + op + "' references node " + std::to_string(in.id) +
                         " but the tape has " + std::to_string(nodes_.size()) + " nodes");
      }
    }
    nodes_.push_back(Node{std::move(op), std::move(inputs), std::move(value), std::nullopt,
                          std::move(backward)});
    return Var{nodes_.size() - 1};
  }

  // Reverse sweep from a scalar root. Every node ends with a gradient of its
  // value's shape; nodes without a path to the root get zeros.
  void backward(const Var& root) {
    const Node& r = node(root);
    if (r.value.numel() != 1) {
      throw ContractError("backward root must be a scalar, got shape " +
                          r.value.shape().to_string());
    }
    for (auto& n : nodes_) n.grad.reset();
    nodes_[root.id].grad = Tensor<T>::ones(r.value.shape());
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.grad || !n.backward) continue;
      n.backward(*this, Var{i});
    }
    for (auto& n : nodes_) {
      if (!n.grad) n.grad = Tensor<T>::zeros_like(n.value);
    }
  }

  void accumulate_grad(const Var& v, const Tensor<T>& g) {
    Node& n = nodes_[v.id];
    if (!n.grad) {
      n.grad = g;
    } else {
      convformer::accumulate(*n.grad, g);
    }
  }

  // ---- operations ---------------------------------------------------------

  Var add(const Var& a, const Var& b) {
    return record("add", {a, b}, convformer::add(value(a), value(b)), [](Tape& t, const Var& self) {
      const auto& in = t.inputs(self);
      t.accumulate_grad(in[0], t.grad(self));
      t.accumulate_grad(in[1], t.grad(self));
    });
  }

  Var sub(const Var& a, const Var& b) {
    return record("sub", {a, b}, convformer::sub(value(a), value(b)), [](Tape& t, const Var& self) {
      const auto& in = t.inputs(self);
      t.accumulate_grad(in[0], t.grad(self));
      t.accumulate_grad(in[1], convformer::scale(t.grad(self), T(-1)));
    });
  }

  Var mul(const Var& a, const Var& b) {
    return record("mul", {a, b}, convformer::mul(value(a), value(b)), [](Tape& t, const Var& self) {
      const auto& in = t.inputs(self);
      t.accumulate_grad(in[0], convformer::mul(t.grad(self), t.value(in[1])));
      t.accumulate_grad(in[1], convformer::mul(t.grad(self), t.value(in[0])));
    });
  }

  Var square(const Var& a) { return mul(a, a); }

  Var mul_channelwise(const Var& x, const Var& s) {
    return record("mul_channelwise", {x, s}, convformer::mul_channelwise(value(x), value(s)),
                  [](Tape& t, const Var& self) {
                    const auto& in = t.inputs(self);
                    const Tensor<T>& gy = t.grad(self);
                    const Tensor<T>& xv = t.value(in[0]);
                    const Tensor<T>& sv = t.value(in[1]);
                    t.accumulate_grad(in[0], convformer::mul_channelwise(gy, sv));
                    Tensor<T> gs(sv.shape());
                    const std::int64_t hw = xv.shape().spatial();
                    for (std::int64_t nc = 0; nc < sv.numel(); ++nc) {
                      T acc = 0;
                      for (std::int64_t i = 0; i < hw; ++i) acc += gy[nc * hw + i] * xv[nc * hw + i];
                      gs[nc] = acc;
                    }
                    t.accumulate_grad(in[1], gs);
                  });
  }

  Var sum(const Var& x) {
    Tensor<T> out(Shape4{1, 1, 1, 1}, convformer::sum_all(value(x)));
    return record("sum", {x}, std::move(out), [](Tape& t, const Var& self) {
      const Var in = t.inputs(self)[0];
      t.accumulate_grad(in, Tensor<T>::constant(t.value(in).shape(), t.grad(self)[0]));
    });
  }

  Var mean(const Var& x) {
    const auto count = static_cast<T>(std::max<std::int64_t>(1, value(x).numel()));
    Tensor<T> out(Shape4{1, 1, 1, 1}, convformer::sum_all(value(x)) / count);
    return record("mean", {x}, std::move(out), [count](Tape& t, const Var& self) {
      const Var in = t.inputs(self)[0];
      t.accumulate_grad(in, Tensor<T>::constant(t.value(in).shape(), t.grad(self)[0] / count));
    });
  }

  // sum(x * weights) for a constant weight tensor; a generic scalar probe for
  // gradient checks.
  Var weighted_sum(const Var& x, Tensor<T> weights) {
    require_same_shape(value(x).shape(), weights.shape(), "weighted_sum");
    T acc = 0;
    for (std::int64_t i = 0; i < weights.numel(); ++i) acc += value(x)[i] * weights[i];
    return record("weighted_sum", {x}, Tensor<T>(Shape4{1, 1, 1, 1}, acc),
                  [w = std::move(weights)](Tape& t, const Var& self) {
                    t.accumulate_grad(t.inputs(self)[0], convformer::scale(w, t.grad(self)[0]));
                  });
  }

  Var conv2d(const Var& x, const Var& weight, const Var* bias, const ConvGeometry& g) {
    const Tensor<T>* b = bias ? &value(*bias) : nullptr;
    Tensor<T> out = convformer::conv2d(value(x), value(weight), b, g);
    std::vector<Var> ins{x, weight};
    if (bias) ins.push_back(*bias);
    return record("conv2d", std::move(ins), std::move(out), [g](Tape& t, const Var& self) {
      const auto& in = t.inputs(self);
      auto grads = conv2d_backward(t.value(in[0]), t.value(in[1]), in.size() > 2, g, t.grad(self));
      t.accumulate_grad(in[0], grads.input);
      t.accumulate_grad(in[1], grads.weight);
      if (in.size() > 2) t.accumulate_grad(in[2], grads.bias->reshaped(t.value(in[2]).shape()));
    });
  }

  Var conv2d(const Var& x, ConvParams<T>& p) {
    const Var w = param(p.weight);
    if (p.bias) {
      const Var b = param(*p.bias);
      return conv2d(x, w, &b, p.geometry);
    }
    return conv2d(x, w, nullptr, p.geometry);
  }

  Var batchnorm(const Var& x, BatchNormState<T>& s, Mode mode) {
    const Var gamma = param(s.gamma);
    const Var beta = param(s.beta);
    auto cache = std::make_shared<BatchNormCache<T>>();
    Tensor<T> out = convformer::batchnorm2d(value(x), value(gamma), value(beta), s.running_mean,
                                            s.running_var, s.epsilon, s.momentum, mode,
                                            cache.get());
    return record("batchnorm2d", {x, gamma, beta}, std::move(out),
                  [cache](Tape& t, const Var& self) {
                    const auto& in = t.inputs(self);
                    auto g = batchnorm2d_backward(t.value(in[1]), *cache, t.grad(self));
                    t.accumulate_grad(in[0], g.input);
                    t.accumulate_grad(in[1], g.gamma);
                    t.accumulate_grad(in[2], g.beta);
                  });
  }

  Var activation(const Var& x, Activation kind) {
    return record(to_string(kind), {x}, convformer::activation(value(x), kind),
                  [kind](Tape& t, const Var& self) {
                    const Var in = t.inputs(self)[0];
                    t.accumulate_grad(in, activation_backward(t.value(in), t.value(self),
                                                              t.grad(self), kind));
                  });
  }

  Var global_avg_pool(const Var& x) {
    return record("global_avg_pool", {x}, convformer::global_avg_pool(value(x)),
                  [](Tape& t, const Var& self) {
                    const Var in = t.inputs(self)[0];
                    t.accumulate_grad(in,
                                      global_avg_pool_backward(t.value(in).shape(), t.grad(self)));
                  });
  }

  Var linear(const Var& x, LinearParams<T>& p) { return linear_impl(x, p, false); }
  Var pointwise_linear(const Var& x, LinearParams<T>& p) { return linear_impl(x, p, true); }

  Var drop_path(const Var& x, double rate, Mode mode, Rng& rng) {
    auto mask = drop_path_mask<T>(value(x).shape().n, rate, mode, rng);
    if (mode == Mode::eval || rate == 0.0) {
      return record("drop_path", {x}, value(x), [](Tape& t, const Var& self) {
        t.accumulate_grad(t.inputs(self)[0], t.grad(self));
      });
    }
    Tensor<T> out = apply_sample_mask(value(x), mask);
    return record("drop_path", {x}, std::move(out), [mask](Tape& t, const Var& self) {
      t.accumulate_grad(t.inputs(self)[0], apply_sample_mask(t.grad(self), mask));
    });
  }

  // Mean over the batch of -log softmax(logits)[label]; logits [N, k, 1, 1].
  Var cross_entropy(const Var& logits, const std::vector<int>& labels) {
    const Tensor<T>& z = value(logits);
    const Shape4& s = z.shape();
    const std::int64_t k = s.c * s.h * s.w;
    if (static_cast<std::int64_t>(labels.size()) != s.n) {
      throw ContractError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch " +
                          std::to_string(s.n));
    }
    Tensor<T> probs(s);
    T loss = 0;
    for (std::int64_t n = 0; n < s.n; ++n) {
      const int label = labels[static_cast<std::size_t>(n)];
      if (label < 0 || label >= k) {
        throw ContractError("cross_entropy: label " + std::to_string(label) + " outside [0, " +
                            std::to_string(k) + ")");
      }
      const T* row = z.raw() + n * k;
      const T mx = *std::max_element(row, row + k);
      T denom = 0;
      for (std::int64_t j = 0; j < k; ++j) denom += std::exp(row[j] - mx);
      for (std::int64_t j = 0; j < k; ++j) probs[n * k + j] = std::exp(row[j] - mx) / denom;
      loss += -(row[label] - mx - std::log(denom));
    }
    loss /= static_cast<T>(s.n);
    return record("cross_entropy", {logits}, Tensor<T>(Shape4{1, 1, 1, 1}, loss),
                  [probs = std::move(probs), labels, k](Tape& t, const Var& self) {
                    Tensor<T> g = probs;
                    const std::int64_t n_batch = g.shape().n;
                    for (std::int64_t n = 0; n < n_batch; ++n) {
                      g[n * k + labels[static_cast<std::size_t>(n)]] -= T(1);
                    }
                    t.accumulate_grad(t.inputs(self)[0],
                                      convformer::scale(g, t.grad(self)[0] / static_cast<T>(n_batch)));
                  });
  }

 private:
  struct Node {
    std::string op;
    std::vector<Var> inputs;
    Tensor<T> value;
    std::optional<Tensor<T>> grad;
    BackwardFn backward;
  };

  const Node& node(const Var& v) const {
    if (v.id >= nodes_.size()) throw GraphError("unknown node id " + std::to_string(v.id));
    return nodes_[v.id];
  }

  Var linear_impl(const Var& x, LinearParams<T>& p, bool pointwise) {
    const Var w = param(p.weight);
    std::vector<Var> ins{x, w};
    if (p.bias) ins.push_back(param(*p.bias));
    const Tensor<T>* b = p.bias ? &value(ins[2]) : nullptr;
    Tensor<T> out = pointwise ? convformer::pointwise_linear(value(x), value(w), b)
                              : convformer::linear(value(x), value(w), b);
    return record(pointwise ? "pointwise_linear" : "linear", std::move(ins), std::move(out),
                  [pointwise](Tape& t, const Var& self) {
                    const auto& in = t.inputs(self);
                    const bool has_bias = in.size() > 2;
                    auto g = pointwise ? pointwise_linear_backward(t.value(in[0]), t.value(in[1]),
                                                                   has_bias, t.grad(self))
                                       : linear_backward(t.value(in[0]), t.value(in[1]), has_bias,
                                                         t.grad(self));
                    t.accumulate_grad(in[0], g.input);
                    t.accumulate_grad(in[1], g.weight);
                    if (has_bias) t.accumulate_grad(in[2], *g.bias);
                  });
  }

  std::vector<Node> nodes_;
  std::unordered_map<const Tensor<T>*, Var> params_;
};

// ---------------------------------------------------------------------------
// Finite-difference gradient check
// ---------------------------------------------------------------------------

struct GradCheckOptions {
  double step = 1e-4;
  // Tensors up to this size are swept fully; larger ones are subsampled.
  std::int64_t full_sweep_limit = 512;
  std::int64_t samples_per_tensor = 64;
  std::uint64_t seed = 0x5eed;
  // A probe whose +h or -h evaluation flips the sign of any ReLU input is
  // retried with the step divided by 10, at most this many times, then skipped.
  int kink_retries = 2;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_tensor = 0;
  std::int64_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::int64_t coordinates_checked = 0;
  std::int64_t kinks_skipped = 0;
};

inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

// Sign pattern of every ReLU input on the tape, in node order.
template <class T>
std::vector<bool> relu_pattern(const Tape<T>& tape) {
  std::vector<bool> bits;
  for (std::size_t i = 0; i < tape.size(); ++i) {
    const Var v{i};
    if (tape.op(v) != "relu") continue;
    for (const T x : tape.value(tape.inputs(v)[0]).data()) bits.push_back(x > T(0));
  }
  return bits;
}

// `f` builds a scalar on a fresh tape and must register every tensor in `wrt`
// through Tape::param. Tape gradients are compared with central differences
// taken by perturbing the tensors in place (restored afterwards).
inline GradCheckResult grad_check(const std::function<Var(Tape<double>&)>& f,
                                  const std::vector<Tensor<double>*>& wrt,
                                  const GradCheckOptions& opt = {}) {
  Tape<double> tape;
  const Var root = f(tape);
  tape.backward(root);
  const std::vector<bool> base_pattern = relu_pattern(tape);
  std::vector<Tensor<double>> analytic;
  analytic.reserve(wrt.size());
  for (const auto* t : wrt) analytic.push_back(tape.param_grad(*t));

  // value at the current parameters; false if the ReLU pattern moved
  auto evaluate = [&](double& value) {
    Tape<double> t;
    const Var r = f(t);
    value = t.value(r)[0];
    return relu_pattern(t) == base_pattern;
  };

  GradCheckResult result;
  Rng rng(opt.seed);
  for (std::size_t ti = 0; ti < wrt.size(); ++ti) {
    Tensor<double>& tensor = *wrt[ti];
    std::vector<std::int64_t> coords;
    if (tensor.numel() <= opt.full_sweep_limit) {
      for (std::int64_t i = 0; i < tensor.numel(); ++i) coords.push_back(i);
    } else {
      for (std::int64_t s = 0; s < opt.samples_per_tensor; ++s) {
        coords.push_back(static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(tensor.numel()))));
      }
    }
    for (const std::int64_t i : coords) {
      const double orig = tensor[i];
      double h = opt.step;
      std::optional<double> numeric;
      for (int attempt = 0; attempt <= opt.kink_retries && !numeric; ++attempt, h /= 10.0) {
        double plus = 0.0, minus = 0.0;
        tensor[i] = orig + h;
        const bool smooth_plus = evaluate(plus);
        tensor[i] = orig - h;
        const bool smooth_minus = evaluate(minus);
        tensor[i] = orig;
        if (smooth_plus && smooth_minus) numeric = (plus - minus) / (2.0 * h);
      }
      if (!numeric) {
        ++result.kinks_skipped;
        continue;
      }
      const double err = relative_error(analytic[ti][i], *numeric);
      ++result.coordinates_checked;
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_tensor = ti;
        result.worst_index = i;
        result.worst_analytic = analytic[ti][i];
        result.worst_numeric = *numeric;
      }
    }
  }
  return result;
}

}  // namespace convformer
