#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "convformer/error.hpp"
#include "convformer/graph.hpp"
#include "convformer/nnops.hpp"
#include "convformer/rng.hpp"
#include "convformer/tensor.hpp"

namespace convformer {

struct BranchSpec {
  std::int64_t kernel = 3;
  std::int64_t dilation = 1;
  friend bool operator==(const BranchSpec&, const BranchSpec&) = default;
};

// Multi-kernel convolutional attention block configuration.
//
//   X_E  = expand(X)                         1x1, C -> N*C
//   X_P  = ReLU(BN(sum_i branch_i(X_E)))     depthwise, dilated, size-preserving
//   X'   = X + reduce(X_P)                   1x1, N*C -> C
//   Attn = sigmoid(fc2(ReLU(fc1(GAP(X)))))
//   out  = proj(Attn * out_conv(X'))         proj: bias-free 1x1, C -> C
struct MCAConfig {
  std::int64_t channels = 0;
  std::int64_t expand = 4;
  std::vector<BranchSpec> branches{{3, 1}, {5, 2}, {7, 3}};
  // Branch used when use_parallel is off.
  BranchSpec single_branch{7, 3};
  std::int64_t gate_reduction = 1;
  bool use_expand = true;
  bool use_parallel = true;
  bool use_inner_residual = true;
  bool use_gating = true;
  bool use_out_proj = true;

  friend bool operator==(const MCAConfig&, const MCAConfig&) = default;

  std::int64_t expand_ratio() const { return use_expand ? expand : 1; }
  std::int64_t hidden_channels() const { return channels * expand_ratio(); }
  std::int64_t gate_width() const { return channels / gate_reduction; }

  std::vector<BranchSpec> active_branches() const {
    return use_parallel ? branches : std::vector<BranchSpec>{single_branch};
  }

  MCAConfig with_channels(std::int64_t c) const {
    MCAConfig out = *this;
    out.channels = c;
    return out;
  }

  void validate() const {
    if (channels <= 0) throw ConfigError("mca: channels must be positive");
    if (expand <= 0) throw ConfigError("mca: expand factor must be positive");
    if (gate_reduction <= 0 || channels % gate_reduction != 0) {
      throw ConfigError("mca: gate reduction " + std::to_string(gate_reduction) +
                        " must divide channels " + std::to_string(channels));
    }
    const auto active = active_branches();
    if (active.empty()) throw ConfigError("mca: at least one branch is required");
    for (const auto& b : active) {
      if (b.kernel <= 0 || b.kernel % 2 == 0 || b.dilation <= 0) {
        throw ConfigError("mca: branch kernels must be odd and positive, dilation positive");
      }
    }
  }
};

template <class T>
struct MCAParams {
  ConvParams<T> expand_conv;
  std::vector<ConvParams<T>> branch_convs;
  BatchNormState<T> branch_bn;
  ConvParams<T> reduce_conv;
  ConvParams<T> out_conv;
  std::optional<LinearParams<T>> gate_fc1;
  std::optional<LinearParams<T>> gate_fc2;
  std::optional<ConvParams<T>> out_proj;
};

namespace detail {

// A null rng builds all-zero weights (used for structural accounting).
inline Init trunc_normal_or_zero(Rng* rng, double stddev) {
  if (!rng) return init::Zeros{};
  return init::TruncNormal{*rng, stddev};
}

inline Init kaiming_or_zero(Rng* rng, std::int64_t fan_in) {
  if (!rng) return init::Zeros{};
  return init::Kaiming{*rng, fan_in};
}

template <class T>
ConvParams<T> pointwise_conv(std::int64_t in, std::int64_t out, bool bias, Rng* rng) {
  ConvParams<T> p;
  p.weight = Tensor<T>::create({out, in, 1, 1}, trunc_normal_or_zero(rng, 0.02));
  if (bias) p.bias = Tensor<T>::zeros({1, 1, 1, out});
  return p;
}

template <class T>
LinearParams<T> dense(std::int64_t in, std::int64_t out, Rng* rng) {
  return {Tensor<T>::create({1, 1, in, out}, trunc_normal_or_zero(rng, 0.02)),
          Tensor<T>::zeros({1, 1, 1, out})};
}

}  // namespace detail

// 1x1 and FC weights: truncated normal (std 0.02); depthwise branches:
// normal with std sqrt(2 / K^2); biases zero, BN gamma 1 and beta 0.
template <class T>
MCAParams<T> init_mca_params(const MCAConfig& cfg, Rng* rng) {
  cfg.validate();
  const std::int64_t c = cfg.channels;
  const std::int64_t hidden = cfg.hidden_channels();
  MCAParams<T> p;
  p.expand_conv = detail::pointwise_conv<T>(c, hidden, true, rng);
  for (const auto& b : cfg.active_branches()) {
    ConvParams<T> conv;
    conv.weight =
        Tensor<T>::create({hidden, 1, b.kernel, b.kernel}, detail::kaiming_or_zero(rng, b.kernel * b.kernel));
    conv.geometry = {1, same_padding(b.kernel, b.dilation), b.dilation, hidden};
    p.branch_convs.push_back(std::move(conv));
  }
  p.branch_bn = BatchNormState<T>::make(hidden);
  p.reduce_conv = detail::pointwise_conv<T>(hidden, c, true, rng);
  p.out_conv = detail::pointwise_conv<T>(c, c, true, rng);
  if (cfg.use_gating) {
    p.gate_fc1 = detail::dense<T>(c, cfg.gate_width(), rng);
    p.gate_fc2 = detail::dense<T>(cfg.gate_width(), c, rng);
  }
  if (cfg.use_out_proj) p.out_proj = detail::pointwise_conv<T>(c, c, false, rng);
  return p;
}

template <class T>
MCAParams<T> init_mca_params(const MCAConfig& cfg, Rng& rng) {
  return init_mca_params<T>(cfg, &rng);
}

// Channel attention vector Attn = sigmoid(fc2(ReLU(fc1(GAP(x))))), shape
// [N, C, 1, 1].
template <class Graph>
typename Graph::Var gating(Graph& g, const typename Graph::Var& x,
                           MCAParams<typename Graph::Scalar>& p, const MCAConfig& cfg) {
  if (!cfg.use_gating || !p.gate_fc1 || !p.gate_fc2) {
    throw ConfigError("mca: gating requested on a block built without gating");
  }
  if (cfg.gate_reduction <= 0 || cfg.channels % cfg.gate_reduction != 0) {
    throw ConfigError("mca: gate reduction must divide channels");
  }
  auto pooled = g.global_avg_pool(x);
  auto hidden = g.activation(g.linear(pooled, *p.gate_fc1), Activation::relu);
  return g.activation(g.linear(hidden, *p.gate_fc2), Activation::sigmoid);
}

template <class Graph>
typename Graph::Var mca_forward(Graph& g, const typename Graph::Var& x,
                                MCAParams<typename Graph::Scalar>& p, const MCAConfig& cfg,
                                Mode mode) {
  const Shape4 xs = g.shape(x);
  if (xs.c != cfg.channels) {
    throw ShapeError("mca: input has " + std::to_string(xs.c) + " channels, block expects " +
                     std::to_string(cfg.channels));
  }
  auto expanded = g.conv2d(x, p.expand_conv);
  auto fused = g.conv2d(expanded, p.branch_convs.at(0));
  for (std::size_t i = 1; i < p.branch_convs.size(); ++i) {
    fused = g.add(fused, g.conv2d(expanded, p.branch_convs[i]));
  }
  auto mixed = g.activation(g.batchnorm(fused, p.branch_bn, mode), Activation::relu);
  auto reduced = g.conv2d(mixed, p.reduce_conv);
  auto refined = cfg.use_inner_residual ? g.add(x, reduced) : reduced;
  auto out = g.conv2d(refined, p.out_conv);
  if (cfg.use_gating) out = g.mul_channelwise(out, gating(g, x, p, cfg));
  if (cfg.use_out_proj) {
    if (!p.out_proj) throw ConfigError("mca: output projection enabled but not built");
    out = g.conv2d(out, *p.out_proj);
  }
  return out;
}

}  // namespace convformer
