#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "convformer/error.hpp"
#include "convformer/graph.hpp"
#include "convformer/mca.hpp"
#include "convformer/nnops.hpp"
#include "convformer/rng.hpp"
#include "convformer/tensor.hpp"

namespace convformer {

struct StageSpec {
  std::int64_t channels = 0;
  std::int64_t blocks = 0;
  std::int64_t mlp_ratio = 4;
  friend bool operator==(const StageSpec&, const StageSpec&) = default;
};

enum class Ablation { none, no_expand, no_parallel, no_residual, no_gating };

struct ModelConfig {
  std::string name = "custom";
  std::array<StageSpec, 4> stages{};
  std::int64_t num_classes = 1000;
  double drop_path_rate = 0.0;
  // Kernel of the stride-2 convolution between stages; padding (k-1)/2.
  std::int64_t downsample_kernel = 2;
  // Channels of the 7x7 and 3x3 stem convolutions; 0 means stem_out.
  std::int64_t stem_hidden = 0;
  // Template for every block's MCA; channels are filled in per stage.
  MCAConfig mca{};

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;

  std::int64_t stem_out() const { return stages[0].channels; }
  std::int64_t stem_width() const { return stem_hidden > 0 ? stem_hidden : stem_out(); }
  std::int64_t total_blocks() const {
    std::int64_t total = 0;
    for (const auto& s : stages) total += s.blocks;
    return total;
  }
  MCAConfig mca_for_stage(std::size_t i) const { return mca.with_channels(stages[i].channels); }

  void validate() const {
    for (std::size_t i = 0; i < stages.size(); ++i) {
      const auto& s = stages[i];
      if (s.channels <= 0 || s.blocks <= 0 || s.mlp_ratio <= 0) {
        throw ConfigError("stage " + std::to_string(i + 1) +
                          ": channels, blocks and mlp_ratio must be positive");
      }
      mca_for_stage(i).validate();
    }
    if (num_classes <= 0) throw ConfigError("num_classes must be positive");
    if (!(drop_path_rate >= 0.0 && drop_path_rate < 1.0)) {
      throw ConfigError("drop_path_rate must be in [0, 1)");
    }
    if (downsample_kernel < 2) throw ConfigError("downsample_kernel must be at least 2");
    if (stem_hidden < 0) throw ConfigError("stem_hidden must be >= 0");
  }
};

namespace presets {

inline ModelConfig convformer_s() {
  ModelConfig c;
  c.name = "convformer-s";
  c.stages = {{{64, 2, 8}, {128, 2, 8}, {320, 6, 4}, {512, 2, 4}}};
  c.num_classes = 1000;
  c.drop_path_rate = 0.2;
  return c;
}

inline ModelConfig convformer_l() {
  ModelConfig c = convformer_s();
  c.name = "convformer-l";
  c.stages[0].blocks = 3;
  c.stages[1].blocks = 3;
  c.stages[2].blocks = 12;
  c.stages[3].blocks = 3;
  return c;
}

inline ModelConfig tiny() {
  ModelConfig c;
  c.name = "tiny";
  c.stages = {{{8, 1, 8}, {16, 1, 8}, {32, 2, 4}, {64, 1, 4}}};
  c.num_classes = 10;
  c.drop_path_rate = 0.0;
  return c;
}

}  // namespace presets

inline const char* to_string(Ablation a) {
  switch (a) {
    case Ablation::none: return "none";
    case Ablation::no_expand: return "no-expand";
    case Ablation::no_parallel: return "no-parallel";
    case Ablation::no_residual: return "no-residual";
    case Ablation::no_gating: return "no-gating";
  }
  return "?";
}

inline std::optional<Ablation> parse_ablation(const std::string& s) {
  for (auto a : {Ablation::none, Ablation::no_expand, Ablation::no_parallel, Ablation::no_residual,
                 Ablation::no_gating}) {
    if (s == to_string(a)) return a;
  }
  return std::nullopt;
}

// Switches one MCA component off. With rebalance, stage-3 depth is adjusted
// the way the ablation table keeps complexity comparable: doubled without the
// expand ratio, one extra block without gating.
inline ModelConfig apply_ablation(ModelConfig cfg, Ablation a, bool rebalance = true) {
  switch (a) {
    case Ablation::none: break;
    case Ablation::no_expand:
      cfg.mca.use_expand = false;
      if (rebalance) cfg.stages[2].blocks *= 2;
      break;
    case Ablation::no_parallel: cfg.mca.use_parallel = false; break;
    case Ablation::no_residual: cfg.mca.use_inner_residual = false; break;
    case Ablation::no_gating:
      cfg.mca.use_gating = false;
      if (rebalance) cfg.stages[2].blocks += 1;
      break;
  }
  if (a != Ablation::none) cfg.name += "/" + std::string(to_string(a));
  return cfg;
}

// Linearly ramped stochastic-depth rates, 0 for the first block up to
// `rate` for the last.
inline std::vector<double> drop_path_schedule(std::int64_t blocks, double rate) {
  std::vector<double> out(static_cast<std::size_t>(blocks), 0.0);
  if (blocks > 1) {
    for (std::int64_t i = 0; i < blocks; ++i) {
      out[static_cast<std::size_t>(i)] = rate * static_cast<double>(i) / static_cast<double>(blocks - 1);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

template <class T>
struct StemParams {
  ConvParams<T> conv1;  // 7x7 s2
  BatchNormState<T> bn1;
  ConvParams<T> conv2;  // 3x3 s1
  BatchNormState<T> bn2;
  ConvParams<T> conv3;  // 2x2 s2
  BatchNormState<T> bn3;
};

template <class T>
struct DownsampleParams {
  ConvParams<T> conv;
  BatchNormState<T> bn;
};

template <class T>
struct BlockParams {
  BatchNormState<T> norm1;
  MCAParams<T> mca;
  BatchNormState<T> norm2;
  LinearParams<T> fc1;
  LinearParams<T> fc2;
  double drop_path = 0.0;
};

template <class T>
struct StageParams {
  std::optional<DownsampleParams<T>> downsample;
  std::vector<BlockParams<T>> blocks;
};

template <class T>
struct HeadParams {
  BatchNormState<T> norm;
  LinearParams<T> fc;
};

template <class T>
struct Model {
  ModelConfig config;
  StemParams<T> stem;
  std::array<StageParams<T>, 4> stages;
  HeadParams<T> head;
};

enum class TensorKind { parameter, buffer };

// One entry of the ordered tensor view of a model. `module` is the scope
// path the tensor belongs to (shared with the MAC counter).
template <class Tens>
struct ParamEntry {
  std::string name;
  std::string module;
  Tens* tensor;
  TensorKind kind;
};

namespace detail {

template <class M, class Fn>
void visit_conv(M& conv, const std::string& module, const std::string& local, Fn& fn) {
  const std::string prefix = local.empty() ? module : module + "." + local;
  fn(prefix + ".weight", module, conv.weight, TensorKind::parameter);
  if (conv.bias) fn(prefix + ".bias", module, *conv.bias, TensorKind::parameter);
}

template <class M, class Fn>
void visit_bn(M& bn, const std::string& module, const std::string& local, Fn& fn) {
  const std::string prefix = local.empty() ? module : module + "." + local;
  fn(prefix + ".gamma", module, bn.gamma, TensorKind::parameter);
  fn(prefix + ".beta", module, bn.beta, TensorKind::parameter);
}

template <class M, class Fn>
void visit_bn_buffers(M& bn, const std::string& module, const std::string& local, Fn& fn) {
  const std::string prefix = local.empty() ? module : module + "." + local;
  fn(prefix + ".running_mean", module, bn.running_mean, TensorKind::buffer);
  fn(prefix + ".running_var", module, bn.running_var, TensorKind::buffer);
}

template <class BN, class Fn>
void visit_bn_all(BN& bn, const std::string& module, const std::string& local, Fn& fn,
                  bool buffers) {
  if (buffers) {
    visit_bn_buffers(bn, module, local, fn);
  } else {
    visit_bn(bn, module, local, fn);
  }
}

// One pass over the model in module order: learnable tensors when `buffers`
// is false, BN running statistics when it is true.
template <class ModelT, class Fn>
void visit_model(ModelT& m, Fn& fn, bool buffers) {
  if (!buffers) visit_conv(m.stem.conv1, "stem", "conv1", fn);
  visit_bn_all(m.stem.bn1, "stem", "bn1", fn, buffers);
  if (!buffers) visit_conv(m.stem.conv2, "stem", "conv2", fn);
  visit_bn_all(m.stem.bn2, "stem", "bn2", fn, buffers);
  if (!buffers) visit_conv(m.stem.conv3, "stem", "conv3", fn);
  visit_bn_all(m.stem.bn3, "stem", "bn3", fn, buffers);
  for (std::size_t s = 0; s < m.stages.size(); ++s) {
    auto& stage = m.stages[s];
    const std::string sp = "stages." + std::to_string(s);
    if (stage.downsample) {
      const std::string dp = sp + ".downsample";
      if (!buffers) visit_conv(stage.downsample->conv, dp, "conv", fn);
      visit_bn_all(stage.downsample->bn, dp, "bn", fn, buffers);
    }
    for (std::size_t b = 0; b < stage.blocks.size(); ++b) {
      auto& blk = stage.blocks[b];
      const std::string bp = sp + ".blocks." + std::to_string(b);
      visit_bn_all(blk.norm1, bp + ".norm1", "", fn, buffers);
      const std::string mp = bp + ".mca";
      if (!buffers) {
        visit_conv(blk.mca.expand_conv, mp, "expand", fn);
        for (std::size_t i = 0; i < blk.mca.branch_convs.size(); ++i) {
          visit_conv(blk.mca.branch_convs[i], mp, "branch" + std::to_string(i), fn);
        }
      }
      visit_bn_all(blk.mca.branch_bn, mp, "branch_bn", fn, buffers);
      if (!buffers) {
        visit_conv(blk.mca.reduce_conv, mp, "reduce", fn);
        visit_conv(blk.mca.out_conv, mp, "out_conv", fn);
        if (blk.mca.gate_fc1) visit_conv(*blk.mca.gate_fc1, mp, "gate_fc1", fn);
        if (blk.mca.gate_fc2) visit_conv(*blk.mca.gate_fc2, mp, "gate_fc2", fn);
        if (blk.mca.out_proj) visit_conv(*blk.mca.out_proj, mp, "out_proj", fn);
      }
      visit_bn_all(blk.norm2, bp + ".norm2", "", fn, buffers);
      if (!buffers) {
        visit_conv(blk.fc1, bp + ".mlp", "fc1", fn);
        visit_conv(blk.fc2, bp + ".mlp", "fc2", fn);
      }
    }
  }
  visit_bn_all(m.head.norm, "head", "norm", fn, buffers);
  if (!buffers) visit_conv(m.head.fc, "head", "fc", fn);
}

}  // namespace detail

// Ordered tensor view: stem, stages in order, head; learnable parameters
// first, then BN running statistics in the same module order.
template <class T>
std::vector<ParamEntry<Tensor<T>>> param_set(Model<T>& m, bool include_buffers = true) {
  std::vector<ParamEntry<Tensor<T>>> out;
  auto collect = [&out](const std::string& name, const std::string& module, Tensor<T>& t,
                        TensorKind kind) { out.push_back({name, module, &t, kind}); };
  detail::visit_model(m, collect, false);
  if (include_buffers) detail::visit_model(m, collect, true);
  return out;
}

template <class T>
std::vector<ParamEntry<const Tensor<T>>> param_set(const Model<T>& m, bool include_buffers = true) {
  std::vector<ParamEntry<const Tensor<T>>> out;
  auto collect = [&out](const std::string& name, const std::string& module, const Tensor<T>& t,
                        TensorKind kind) { out.push_back({name, module, &t, kind}); };
  detail::visit_model(m, collect, false);
  if (include_buffers) detail::visit_model(m, collect, true);
  return out;
}

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

template <class T>
ConvParams<T> spatial_conv(std::int64_t in, std::int64_t out, std::int64_t kernel,
                           const ConvGeometry& g, bool bias, Rng* rng) {
  ConvParams<T> p;
  p.weight = Tensor<T>::create({out, in / g.groups, kernel, kernel},
                               detail::kaiming_or_zero(rng, in / g.groups * kernel * kernel));
  if (bias) p.bias = Tensor<T>::zeros({1, 1, 1, out});
  p.geometry = g;
  return p;
}

template <class T>
BlockParams<T> init_block(const MCAConfig& mca, std::int64_t channels, std::int64_t mlp_ratio,
                          double drop_path, Rng* rng) {
  BlockParams<T> b;
  b.norm1 = BatchNormState<T>::make(channels);
  b.mca = init_mca_params<T>(mca, rng);
  b.norm2 = BatchNormState<T>::make(channels);
  b.fc1 = detail::dense<T>(channels, channels * mlp_ratio, rng);
  b.fc2 = detail::dense<T>(channels * mlp_ratio, channels, rng);
  b.drop_path = drop_path;
  return b;
}

// Tensors are drawn from `rng` in construction order, so a seed always yields
// the same model. A null rng gives all-zero weights.
template <class T>
Model<T> build_model(const ModelConfig& cfg, Rng* rng) {
  cfg.validate();
  Model<T> m;
  m.config = cfg;
  const std::int64_t c0 = cfg.stem_out();
  const std::int64_t hid = cfg.stem_width();
  m.stem.conv1 = spatial_conv<T>(3, hid, 7, {2, 3, 1, 1}, true, rng);
  m.stem.bn1 = BatchNormState<T>::make(hid);
  m.stem.conv2 = spatial_conv<T>(hid, hid, 3, {1, 1, 1, 1}, true, rng);
  m.stem.bn2 = BatchNormState<T>::make(hid);
  m.stem.conv3 = spatial_conv<T>(hid, c0, 2, {2, 0, 1, 1}, true, rng);
  m.stem.bn3 = BatchNormState<T>::make(c0);
  const auto rates = drop_path_schedule(cfg.total_blocks(), cfg.drop_path_rate);
  std::size_t block_index = 0;
  for (std::size_t s = 0; s < 4; ++s) {
    const auto& spec = cfg.stages[s];
    auto& stage = m.stages[s];
    if (s > 0) {
      const std::int64_t k = cfg.downsample_kernel;
      DownsampleParams<T> ds;
      ds.conv = spatial_conv<T>(cfg.stages[s - 1].channels, spec.channels, k, {2, (k - 1) / 2, 1, 1},
                                true, rng);
      ds.bn = BatchNormState<T>::make(spec.channels);
      stage.downsample = std::move(ds);
    }
    const MCAConfig mca = cfg.mca_for_stage(s);
    for (std::int64_t b = 0; b < spec.blocks; ++b) {
      stage.blocks.push_back(
          init_block<T>(mca, spec.channels, spec.mlp_ratio, rates[block_index++], rng));
    }
  }
  m.head.norm = BatchNormState<T>::make(cfg.stages[3].channels);
  m.head.fc = detail::dense<T>(cfg.stages[3].channels, cfg.num_classes, rng);
  return m;
}

template <class T>
Model<T> build_model(const ModelConfig& cfg, Rng& rng) {
  return build_model<T>(cfg, &rng);
}

template <class T>
Model<T> build_model(const ModelConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  return build_model<T>(cfg, &rng);
}

// Same model in another precision.
template <class U, class T>
Model<U> cast_model(const Model<T>& m) {
  Model<U> out = build_model<U>(m.config, static_cast<Rng*>(nullptr));
  auto src = param_set(m);
  auto dst = param_set(out);
  for (std::size_t i = 0; i < src.size(); ++i) *dst[i].tensor = src[i].tensor->template cast<U>();
  return out;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

template <class Graph>
typename Graph::Var conv_stem(Graph& g, const typename Graph::Var& images,
                              StemParams<typename Graph::Scalar>& p, Mode mode) {
  const Shape4 s = g.shape(images);
  if (s.c != 3) throw ShapeError("conv_stem: expected 3 input channels, got " + s.to_string());
  if (s.h % 4 != 0 || s.w % 4 != 0) {
    throw GeometryError("conv_stem: input height and width must be divisible by 4, got " +
                        s.to_string());
  }
  ScopeGuard<Graph> scope(g, "stem");
  auto x = g.activation(g.batchnorm(g.conv2d(images, p.conv1), p.bn1, mode), Activation::relu);
  x = g.activation(g.batchnorm(g.conv2d(x, p.conv2), p.bn2, mode), Activation::relu);
  return g.batchnorm(g.conv2d(x, p.conv3), p.bn3, mode);
}

template <class Graph>
typename Graph::Var downsample(Graph& g, const typename Graph::Var& x,
                               DownsampleParams<typename Graph::Scalar>& p, Mode mode) {
  const Shape4 s = g.shape(x);
  if (s.h % 2 != 0 || s.w % 2 != 0) {
    throw GeometryError("downsample: spatial size must be even, got " + s.to_string());
  }
  return g.batchnorm(g.conv2d(x, p.conv), p.bn, mode);
}

// Y = x + drop_path(MCA(BN(x)));  Z = Y + drop_path(fc2(GELU(fc1(BN(Y))))).
// The MLP acts on channels at every spatial position.
template <class Graph>
typename Graph::Var convformer_block(Graph& g, const typename Graph::Var& x,
                                     BlockParams<typename Graph::Scalar>& p, const MCAConfig& mca,
                                     Mode mode, Rng& rng) {
  const Shape4 s = g.shape(x);
  if (s.c != p.norm1.channels()) {
    throw ShapeError("convformer_block: input has " + std::to_string(s.c) +
                     " channels, block expects " + std::to_string(p.norm1.channels()));
  }
  typename Graph::Var y = x;
  {
    typename Graph::Var normed = [&] {
      ScopeGuard<Graph> scope(g, "norm1");
      return g.batchnorm(x, p.norm1, mode);
    }();
    ScopeGuard<Graph> scope(g, "mca");
    y = g.add(x, g.drop_path(mca_forward(g, normed, p.mca, mca, mode), p.drop_path, mode, rng));
  }
  typename Graph::Var normed = [&] {
    ScopeGuard<Graph> scope(g, "norm2");
    return g.batchnorm(y, p.norm2, mode);
  }();
  ScopeGuard<Graph> scope(g, "mlp");
  auto hidden = g.activation(g.pointwise_linear(normed, p.fc1), Activation::gelu);
  return g.add(y, g.drop_path(g.pointwise_linear(hidden, p.fc2), p.drop_path, mode, rng));
}

// Per-stage input (after stem or downsample) and output, for inspection.
template <class Var>
struct StageTrace {
  Var input;
  Var output;
};

template <class Graph>
typename Graph::Var model_trunk(Graph& g, Model<typename Graph::Scalar>& m,
                                const typename Graph::Var& images, Mode mode, Rng& rng,
                                std::vector<StageTrace<typename Graph::Var>>* trace = nullptr) {
  const Shape4 s = g.shape(images);
  if (s.h % 32 != 0 || s.w % 32 != 0) {
    throw GeometryError("model: input height and width must be divisible by 32, got " +
                        s.to_string());
  }
  auto x = conv_stem(g, images, m.stem, mode);
  for (std::size_t i = 0; i < m.stages.size(); ++i) {
    auto& stage = m.stages[i];
    const std::string sp = "stages." + std::to_string(i);
    if (stage.downsample) {
      ScopeGuard<Graph> scope(g, sp + ".downsample");
      x = downsample(g, x, *stage.downsample, mode);
    }
    const auto input = x;
    const MCAConfig mca = m.config.mca_for_stage(i);
    for (std::size_t b = 0; b < stage.blocks.size(); ++b) {
      ScopeGuard<Graph> scope(g, sp + ".blocks." + std::to_string(b));
      x = convformer_block(g, x, stage.blocks[b], mca, mode, rng);
    }
    if (trace) trace->push_back({input, x});
  }
  return x;
}

// Logits [N, num_classes, 1, 1]. `rng` drives stochastic depth in train mode.
template <class Graph>
typename Graph::Var model_forward(Graph& g, Model<typename Graph::Scalar>& m,
                                  const typename Graph::Var& images, Mode mode, Rng& rng) {
  auto x = model_trunk(g, m, images, mode, rng);
  ScopeGuard<Graph> scope(g, "head");
  return g.linear(g.global_avg_pool(g.batchnorm(x, m.head.norm, mode)), m.head.fc);
}

// Eval-mode convenience.
template <class T>
Tensor<T> predict(Model<T>& m, const Tensor<T>& images) {
  Eager<T> g;
  Rng rng(0);
  return model_forward(g, m, images, Mode::eval, rng);
}

}  // namespace convformer
