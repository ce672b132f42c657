#pragma once

#include <string>
#include <utility>

#include "convformer/nnops.hpp"
#include "convformer/tensor.hpp"

namespace convformer {

// Model code is written once against a "graph" policy and instantiated with
// Eager (plain evaluation), Tape (reverse-mode autodiff) or CostCounter
// (shape walk for MAC accounting). Every policy exposes the same operations;
// parameters are passed as the owning structs so tapes can register them.
//
// Scopes name the module an op belongs to ("stages.1.blocks.0.mca"). Only the
// counter uses them.
template <class Graph>
class ScopeGuard {
 public:
  ScopeGuard(Graph& g, const std::string& name) : g_(g) { g_.push_scope(name); }
  ~ScopeGuard() { g_.pop_scope(); }
  ScopeGuard(const ScopeGuard&) = delete;
  ScopeGuard& operator=(const ScopeGuard&) = delete;

 private:
  Graph& g_;
};

template <class T>
class Eager {
 public:
  using Scalar = T;
  using Var = Tensor<T>;

  void push_scope(const std::string&) {}
  void pop_scope() {}

  const Tensor<T>& value(const Var& v) const { return v; }
  Shape4 shape(const Var& v) const { return v.shape(); }
  Var input(Tensor<T> t) { return t; }

  Var conv2d(const Var& x, ConvParams<T>& p) { return convformer::conv2d(x, p); }
  Var batchnorm(const Var& x, BatchNormState<T>& s, Mode mode) {
    return convformer::batchnorm2d(x, s, mode);
  }
  Var activation(const Var& x, Activation kind) { return convformer::activation(x, kind); }
  Var global_avg_pool(const Var& x) { return convformer::global_avg_pool(x); }
  Var linear(const Var& x, LinearParams<T>& p) { return convformer::linear(x, p); }
  Var pointwise_linear(const Var& x, LinearParams<T>& p) {
    return convformer::pointwise_linear(x, p);
  }
  Var add(const Var& a, const Var& b) { return convformer::add(a, b); }
  Var mul_channelwise(const Var& x, const Var& s) { return convformer::mul_channelwise(x, s); }
  Var drop_path(const Var& x, double rate, Mode mode, Rng& rng) {
    return convformer::drop_path(x, rate, mode, rng);
  }
};

}  // namespace convformer
