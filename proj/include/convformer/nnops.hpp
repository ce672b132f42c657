#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "convformer/error.hpp"
#include "convformer/rng.hpp"
#include "convformer/tensor.hpp"

namespace convformer {

enum class Mode { train, eval };

inline const char* to_string(Mode m) { return m == Mode::train ? "train" : "eval"; }

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

struct ConvGeometry {
  std::int64_t stride = 1;
  std::int64_t padding = 0;
  std::int64_t dilation = 1;
  std::int64_t groups = 1;

  friend bool operator==(const ConvGeometry&, const ConvGeometry&) = default;
};

// Padding that keeps the spatial size for stride 1 (odd kernels).
inline std::int64_t same_padding(std::int64_t kernel, std::int64_t dilation) {
  return dilation * (kernel - 1) / 2;
}

inline std::int64_t conv_output_size(std::int64_t in, std::int64_t kernel, const ConvGeometry& g) {
  const std::int64_t span = in + 2 * g.padding - g.dilation * (kernel - 1) - 1;
  if (span < 0) {
    throw GeometryError("convolution window (kernel " + std::to_string(kernel) + ", dilation " +
                        std::to_string(g.dilation) + ") does not fit input size " +
                        std::to_string(in) + " with padding " + std::to_string(g.padding));
  }
  return span / g.stride + 1;
}

// weight: [C_out, C_in/groups, K, K]; bias: [1, 1, 1, C_out].
template <class T>
struct ConvParams {
  Tensor<T> weight;
  std::optional<Tensor<T>> bias;
  ConvGeometry geometry;

  std::int64_t out_channels() const { return weight.shape().c == 0 ? 0 : weight.shape().n; }
  std::int64_t kernel() const { return weight.shape().h; }
};

inline void validate_conv(const Shape4& x, const Shape4& w, const ConvGeometry& g,
                          const std::optional<Shape4>& bias) {
  if (g.stride <= 0 || g.dilation <= 0 || g.padding < 0 || g.groups <= 0) {
    throw ConfigError("conv2d: stride, dilation and groups must be positive, padding >= 0");
  }
  if (w.h != w.w) throw ShapeError("conv2d: only square kernels are supported");
  if (x.c % g.groups != 0 || w.n % g.groups != 0) {
    throw ShapeError("conv2d: groups " + std::to_string(g.groups) +
                     " must divide C_in=" + std::to_string(x.c) +
                     " and C_out=" + std::to_string(w.n));
  }
  if (w.c != x.c / g.groups) {
    throw ShapeError("conv2d: weight " + w.to_string() + " expects " +
                     std::to_string(w.c * g.groups) + " input channels, input has " +
                     std::to_string(x.c));
  }
  if (bias && (bias->numel() != w.n)) {
    throw ShapeError("conv2d: bias length does not match C_out");
  }
}

inline Shape4 conv2d_output_shape(const Shape4& x, const Shape4& w, const ConvGeometry& g) {
  validate_conv(x, w, g, std::nullopt);
  const auto ho = conv_output_size(x.h, w.h, g);
  const auto wo = conv_output_size(x.w, w.w, g);
  if (ho <= 0 || wo <= 0) throw GeometryError("conv2d: non-positive output size");
  return {x.n, w.n, ho, wo};
}

namespace detail {

// Range of output columns whose tap (kernel offset `k_off`) lands inside
// [0, in): ow * stride + k_off - padding in [0, in).
inline void valid_range(std::int64_t in, std::int64_t out, std::int64_t k_off, std::int64_t stride,
                        std::int64_t padding, std::int64_t& lo, std::int64_t& hi) {
  const std::int64_t shift = k_off - padding;
  // smallest ow with ow*stride + shift >= 0
  lo = shift >= 0 ? 0 : (-shift + stride - 1) / stride;
  // largest ow with ow*stride + shift <= in-1
  const std::int64_t top = in - 1 - shift;
  hi = top < 0 ? -1 : std::min(out - 1, top / stride);
}

}  // namespace detail

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias,
                 const ConvGeometry& g) {
  const Shape4& xs = x.shape();
  const Shape4& ws = weight.shape();
  validate_conv(xs, ws, g, bias ? std::optional<Shape4>(bias->shape()) : std::nullopt);
  const Shape4 os = conv2d_output_shape(xs, ws, g);
  Tensor<T> out(os);
  const std::int64_t ohw = os.h * os.w;
  const std::int64_t ihw = xs.h * xs.w;
  if (bias) {
    for (std::int64_t n = 0; n < os.n; ++n) {
      for (std::int64_t co = 0; co < os.c; ++co) {
        std::fill_n(out.raw() + (n * os.c + co) * ohw, ohw, (*bias)[co]);
      }
    }
  }
  const bool pointwise = ws.h == 1 && g.stride == 1 && g.padding == 0;
  const std::int64_t cin_g = xs.c / g.groups;
  const std::int64_t cout_g = ws.n / g.groups;
  for (std::int64_t n = 0; n < xs.n; ++n) {
    for (std::int64_t co = 0; co < ws.n; ++co) {
      const std::int64_t grp = co / cout_g;
      T* po = out.raw() + (n * os.c + co) * ohw;
      for (std::int64_t cl = 0; cl < cin_g; ++cl) {
        const std::int64_t ci = grp * cin_g + cl;
        const T* px = x.raw() + (n * xs.c + ci) * ihw;
        const T* pw = weight.raw() + (co * ws.c + cl) * ws.h * ws.w;
        if (pointwise) {
          const T wv = pw[0];
          for (std::int64_t i = 0; i < ohw; ++i) po[i] += wv * px[i];
          continue;
        }
        for (std::int64_t kh = 0; kh < ws.h; ++kh) {
          std::int64_t oh_lo, oh_hi;
          detail::valid_range(xs.h, os.h, kh * g.dilation, g.stride, g.padding, oh_lo, oh_hi);
          for (std::int64_t kw = 0; kw < ws.w; ++kw) {
            const T wv = pw[kh * ws.w + kw];
            std::int64_t ow_lo, ow_hi;
            detail::valid_range(xs.w, os.w, kw * g.dilation, g.stride, g.padding, ow_lo, ow_hi);
            for (std::int64_t oh = oh_lo; oh <= oh_hi; ++oh) {
              const std::int64_t ih = oh * g.stride + kh * g.dilation - g.padding;
              const T* row = px + ih * xs.w + kw * g.dilation - g.padding;
              T* orow = po + oh * os.w;
              if (g.stride == 1) {
                for (std::int64_t ow = ow_lo; ow <= ow_hi; ++ow) orow[ow] += wv * row[ow];
              } else {
                for (std::int64_t ow = ow_lo; ow <= ow_hi; ++ow) orow[ow] += wv * row[ow * g.stride];
              }
            }
          }
        }
      }
    }
  }
  return out;
}

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const ConvParams<T>& p) {
  return conv2d(x, p.weight, p.bias ? &*p.bias : nullptr, p.geometry);
}

template <class T>
struct ConvGrads {
  Tensor<T> input;
  Tensor<T> weight;
  std::optional<Tensor<T>> bias;
};

template <class T>
ConvGrads<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& weight, bool has_bias,
                             const ConvGeometry& g, const Tensor<T>& grad_out) {
  const Shape4& xs = x.shape();
  const Shape4& ws = weight.shape();
  const Shape4& os = grad_out.shape();
  ConvGrads<T> grads{Tensor<T>(xs), Tensor<T>(ws), std::nullopt};
  const std::int64_t ohw = os.h * os.w;
  const std::int64_t ihw = xs.h * xs.w;
  if (has_bias) {
    Tensor<T> gb(Shape4{1, 1, 1, os.c});
    for (std::int64_t n = 0; n < os.n; ++n) {
      for (std::int64_t co = 0; co < os.c; ++co) {
        const T* pg = grad_out.raw() + (n * os.c + co) * ohw;
        T acc = 0;
        for (std::int64_t i = 0; i < ohw; ++i) acc += pg[i];
        gb[co] += acc;
      }
    }
    grads.bias = std::move(gb);
  }
  const std::int64_t cin_g = xs.c / g.groups;
  const std::int64_t cout_g = ws.n / g.groups;
  for (std::int64_t n = 0; n < xs.n; ++n) {
    for (std::int64_t co = 0; co < ws.n; ++co) {
      const std::int64_t grp = co / cout_g;
      const T* pg = grad_out.raw() + (n * os.c + co) * ohw;
      for (std::int64_t cl = 0; cl < cin_g; ++cl) {
        const std::int64_t ci = grp * cin_g + cl;
        const T* px = x.raw() + (n * xs.c + ci) * ihw;
        T* pgx = grads.input.raw() + (n * xs.c + ci) * ihw;
        const T* pw = weight.raw() + (co * ws.c + cl) * ws.h * ws.w;
        T* pgw = grads.weight.raw() + (co * ws.c + cl) * ws.h * ws.w;
        for (std::int64_t kh = 0; kh < ws.h; ++kh) {
          std::int64_t oh_lo, oh_hi;
          detail::valid_range(xs.h, os.h, kh * g.dilation, g.stride, g.padding, oh_lo, oh_hi);
          for (std::int64_t kw = 0; kw < ws.w; ++kw) {
            const T wv = pw[kh * ws.w + kw];
            std::int64_t ow_lo, ow_hi;
            detail::valid_range(xs.w, os.w, kw * g.dilation, g.stride, g.padding, ow_lo, ow_hi);
            T wacc = 0;
            for (std::int64_t oh = oh_lo; oh <= oh_hi; ++oh) {
              const std::int64_t ih = oh * g.stride + kh * g.dilation - g.padding;
              const std::int64_t off = ih * xs.w + kw * g.dilation - g.padding;
              const T* row = px + off;
              T* grow = pgx + off;
              const T* gorow = pg + oh * os.w;
              for (std::int64_t ow = ow_lo; ow <= ow_hi; ++ow) {
                const T go = gorow[ow];
                wacc += go * row[ow * g.stride];
                grow[ow * g.stride] += go * wv;
              }
            }
            pgw[kh * ws.w + kw] += wacc;
          }
        }
      }
    }
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

// Per-channel state. gamma/beta are learnable; running statistics are
// buffers. Variance uses the biased (1/M) estimator in both the normalization
// and the running average.
template <class T>
struct BatchNormState {
  Tensor<T> gamma;
  Tensor<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
  double epsilon = 1e-5;
  double momentum = 0.1;

  static BatchNormState make(std::int64_t channels, double epsilon = 1e-5, double momentum = 0.1) {
    const Shape4 s{1, channels, 1, 1};
    return {Tensor<T>::ones(s), Tensor<T>::zeros(s), Tensor<T>::zeros(s), Tensor<T>::ones(s),
            epsilon, momentum};
  }

  std::int64_t channels() const { return gamma.numel(); }
};

// Values saved by the forward pass for the backward pass.
template <class T>
struct BatchNormCache {
  Tensor<T> normalized;  // x_hat
  std::vector<T> inv_std;
  Mode mode = Mode::eval;
};

template <class T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      Tensor<T>& running_mean, Tensor<T>& running_var, double epsilon,
                      double momentum, Mode mode, BatchNormCache<T>* cache = nullptr) {
  const Shape4& s = x.shape();
  if (gamma.numel() != s.c || beta.numel() != s.c || running_mean.numel() != s.c ||
      running_var.numel() != s.c) {
    throw ShapeError("batchnorm2d: channel mismatch, input " + s.to_string() + " vs state of " +
                     std::to_string(gamma.numel()) + " channels");
  }
  const std::int64_t hw = s.spatial();
  const std::int64_t m = s.n * hw;
  Tensor<T> out(s);
  if (cache) {
    cache->normalized = Tensor<T>(s);
    cache->inv_std.assign(static_cast<std::size_t>(s.c), T(0));
    cache->mode = mode;
  }
  for (std::int64_t c = 0; c < s.c; ++c) {
    T mean, var;
    if (mode == Mode::train) {
      if (m == 0) throw GeometryError("batchnorm2d: empty batch in train mode");
      double acc = 0;
      for (std::int64_t n = 0; n < s.n; ++n) {
        const T* p = x.raw() + (n * s.c + c) * hw;
        for (std::int64_t i = 0; i < hw; ++i) acc += p[i];
      }
      const double mu = acc / static_cast<double>(m);
      double sq = 0;
      for (std::int64_t n = 0; n < s.n; ++n) {
        const T* p = x.raw() + (n * s.c + c) * hw;
        for (std::int64_t i = 0; i < hw; ++i) {
          const double d = p[i] - mu;
          sq += d * d;
        }
      }
      mean = static_cast<T>(mu);
      var = static_cast<T>(sq / static_cast<double>(m));
      running_mean[c] = static_cast<T>((1.0 - momentum) * running_mean[c] + momentum * mean);
      running_var[c] = static_cast<T>((1.0 - momentum) * running_var[c] + momentum * var);
    } else {
      mean = running_mean[c];
      var = running_var[c];
    }
    const T inv_std = T(1) / std::sqrt(var + static_cast<T>(epsilon));
    const T gm = gamma[c];
    const T bt = beta[c];
    for (std::int64_t n = 0; n < s.n; ++n) {
      const std::int64_t base = (n * s.c + c) * hw;
      const T* p = x.raw() + base;
      T* po = out.raw() + base;
      for (std::int64_t i = 0; i < hw; ++i) {
        const T xh = (p[i] - mean) * inv_std;
        if (cache) cache->normalized[base + i] = xh;
        po[i] = gm * xh + bt;
      }
    }
    if (cache) cache->inv_std[static_cast<std::size_t>(c)] = inv_std;
  }
  return out;
}

template <class T>
Tensor<T> batchnorm2d(const Tensor<T>& x, BatchNormState<T>& s, Mode mode,
                      BatchNormCache<T>* cache = nullptr) {
  return batchnorm2d(x, s.gamma, s.beta, s.running_mean, s.running_var, s.epsilon, s.momentum,
                     mode, cache);
}

template <class T>
struct BatchNormGrads {
  Tensor<T> input;
  Tensor<T> gamma;
  Tensor<T> beta;
};

template <class T>
BatchNormGrads<T> batchnorm2d_backward(const Tensor<T>& gamma, const BatchNormCache<T>& cache,
                                       const Tensor<T>& grad_out) {
  const Shape4& s = grad_out.shape();
  const std::int64_t hw = s.spatial();
  const std::int64_t m = s.n * hw;
  BatchNormGrads<T> g{Tensor<T>(s), Tensor<T>(gamma.shape()), Tensor<T>(gamma.shape())};
  for (std::int64_t c = 0; c < s.c; ++c) {
    T sum_dy = 0, sum_dy_xh = 0;
    for (std::int64_t n = 0; n < s.n; ++n) {
      const std::int64_t base = (n * s.c + c) * hw;
      for (std::int64_t i = 0; i < hw; ++i) {
        sum_dy += grad_out[base + i];
        sum_dy_xh += grad_out[base + i] * cache.normalized[base + i];
      }
    }
    g.beta[c] = sum_dy;
    g.gamma[c] = sum_dy_xh;
    const T k = gamma[c] * cache.inv_std[static_cast<std::size_t>(c)];
    for (std::int64_t n = 0; n < s.n; ++n) {
      const std::int64_t base = (n * s.c + c) * hw;
      for (std::int64_t i = 0; i < hw; ++i) {
        if (cache.mode == Mode::eval) {
          g.input[base + i] = grad_out[base + i] * k;
        } else {
          const T mm = static_cast<T>(m);
          g.input[base + i] =
              k / mm * (mm * grad_out[base + i] - sum_dy - cache.normalized[base + i] * sum_dy_xh);
        }
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

enum class Activation { relu, gelu, sigmoid };

inline const char* to_string(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::gelu: return "gelu";
    case Activation::sigmoid: return "sigmoid";
  }
  return "?";
}

template <class T>
T sigmoid(T v) {
  if (v >= 0) return T(1) / (T(1) + std::exp(-v));
  const T e = std::exp(v);
  return e / (T(1) + e);
}

// Exact GELU: x * Phi(x).
template <class T>
T gelu(T v) {
  return T(0.5) * v * (T(1) + std::erf(v / std::numbers::sqrt2_v<T>));
}

template <class T>
T gelu_derivative(T v) {
  const T cdf = T(0.5) * (T(1) + std::erf(v / std::numbers::sqrt2_v<T>));
  const T pdf = std::exp(T(-0.5) * v * v) * std::numbers::inv_sqrtpi_v<T> / std::numbers::sqrt2_v<T>;
  return cdf + v * pdf;
}

template <class T>
Tensor<T> activation(const Tensor<T>& x, Activation kind) {
  Tensor<T> out(x.shape());
  const T* px = x.raw();
  T* po = out.raw();
  const std::int64_t count = x.numel();
  switch (kind) {
    case Activation::relu:
      for (std::int64_t i = 0; i < count; ++i) po[i] = px[i] > T(0) ? px[i] : T(0);
      break;
    case Activation::gelu:
      for (std::int64_t i = 0; i < count; ++i) po[i] = gelu(px[i]);
      break;
    case Activation::sigmoid:
      for (std::int64_t i = 0; i < count; ++i) po[i] = sigmoid(px[i]);
      break;
  }
  return out;
}

// `y` is the forward output (used by sigmoid).
template <class T>
Tensor<T> activation_backward(const Tensor<T>& x, const Tensor<T>& y, const Tensor<T>& grad_out,
                              Activation kind) {
  Tensor<T> g(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    switch (kind) {
      case Activation::relu: g[i] = x[i] > T(0) ? grad_out[i] : T(0); break;
      case Activation::gelu: g[i] = grad_out[i] * gelu_derivative(x[i]); break;
      case Activation::sigmoid: g[i] = grad_out[i] * y[i] * (T(1) - y[i]); break;
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  const Shape4& s = x.shape();
  const std::int64_t hw = s.spatial();
  if (hw < 1) throw GeometryError("global_avg_pool: empty spatial extent " + s.to_string());
  Tensor<T> out(Shape4{s.n, s.c, 1, 1});
  for (std::int64_t nc = 0; nc < s.n * s.c; ++nc) {
    const T* p = x.raw() + nc * hw;
    T acc = 0;
    for (std::int64_t i = 0; i < hw; ++i) acc += p[i];
    out[nc] = acc / static_cast<T>(hw);
  }
  return out;
}

template <class T>
Tensor<T> global_avg_pool_backward(const Shape4& input_shape, const Tensor<T>& grad_out) {
  Tensor<T> g(input_shape);
  const std::int64_t hw = input_shape.spatial();
  for (std::int64_t nc = 0; nc < input_shape.n * input_shape.c; ++nc) {
    const T v = grad_out[nc] / static_cast<T>(hw);
    std::fill_n(g.raw() + nc * hw, hw, v);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Linear layers
// ---------------------------------------------------------------------------

// weight: [1, 1, in, out] (row-major in x out); bias: [1, 1, 1, out].
template <class T>
struct LinearParams {
  Tensor<T> weight;
  std::optional<Tensor<T>> bias;

  std::int64_t in_features() const { return weight.shape().h; }
  std::int64_t out_features() const { return weight.shape().w; }
};

inline void validate_linear(std::int64_t features, const Shape4& w, const Shape4* bias) {
  if (w.n != 1 || w.c != 1 || w.h <= 0 || w.w <= 0) {
    throw ShapeError("linear: weight must be [1,1,in,out] with positive dims, got " +
                     w.to_string());
  }
  if (features != w.h) {
    throw ShapeError("linear: input has " + std::to_string(features) + " features, weight expects " +
                     std::to_string(w.h));
  }
  if (bias && bias->numel() != w.w) throw ShapeError("linear: bias length does not match out");
}

// x is read as [N, C*H*W]; the result is [N, out, 1, 1].
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias) {
  const Shape4& s = x.shape();
  const std::int64_t in = s.c * s.h * s.w;
  const Shape4 bshape = bias ? bias->shape() : Shape4{};
  validate_linear(in, weight.shape(), bias ? &bshape : nullptr);
  const std::int64_t out_f = weight.shape().w;
  Tensor<T> out(Shape4{s.n, out_f, 1, 1});
  for (std::int64_t n = 0; n < s.n; ++n) {
    T* po = out.raw() + n * out_f;
    if (bias) std::copy_n(bias->raw(), out_f, po);
    const T* px = x.raw() + n * in;
    for (std::int64_t i = 0; i < in; ++i) {
      const T xv = px[i];
      const T* pw = weight.raw() + i * out_f;
      for (std::int64_t o = 0; o < out_f; ++o) po[o] += xv * pw[o];
    }
  }
  return out;
}

template <class T>
Tensor<T> linear(const Tensor<T>& x, const LinearParams<T>& p) {
  return linear(x, p.weight, p.bias ? &*p.bias : nullptr);
}

template <class T>
struct LinearGrads {
  Tensor<T> input;
  Tensor<T> weight;
  std::optional<Tensor<T>> bias;
};

template <class T>
LinearGrads<T> linear_backward(const Tensor<T>& x, const Tensor<T>& weight, bool has_bias,
                               const Tensor<T>& grad_out) {
  const Shape4& s = x.shape();
  const std::int64_t in = s.c * s.h * s.w;
  const std::int64_t out_f = weight.shape().w;
  LinearGrads<T> g{Tensor<T>(s), Tensor<T>(weight.shape()), std::nullopt};
  if (has_bias) g.bias = Tensor<T>(Shape4{1, 1, 1, out_f});
  for (std::int64_t n = 0; n < s.n; ++n) {
    const T* pg = grad_out.raw() + n * out_f;
    const T* px = x.raw() + n * in;
    T* pgx = g.input.raw() + n * in;
    if (has_bias) {
      for (std::int64_t o = 0; o < out_f; ++o) (*g.bias)[o] += pg[o];
    }
    for (std::int64_t i = 0; i < in; ++i) {
      const T* pw = weight.raw() + i * out_f;
      T* pgw = g.weight.raw() + i * out_f;
      T acc = 0;
      for (std::int64_t o = 0; o < out_f; ++o) {
        acc += pg[o] * pw[o];
        pgw[o] += px[i] * pg[o];
      }
      pgx[i] = acc;
    }
  }
  return g;
}

// Linear map over the channel axis at every spatial position (channels as
// features): out[n,o,h,w] = sum_c x[n,c,h,w] * W[c,o] + b[o].
template <class T>
Tensor<T> pointwise_linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias) {
  const Shape4& s = x.shape();
  const Shape4 bshape = bias ? bias->shape() : Shape4{};
  validate_linear(s.c, weight.shape(), bias ? &bshape : nullptr);
  const std::int64_t out_f = weight.shape().w;
  const std::int64_t hw = s.spatial();
  Tensor<T> out(Shape4{s.n, out_f, s.h, s.w});
  for (std::int64_t n = 0; n < s.n; ++n) {
    for (std::int64_t o = 0; o < out_f; ++o) {
      T* po = out.raw() + (n * out_f + o) * hw;
      if (bias) std::fill_n(po, hw, (*bias)[o]);
      for (std::int64_t c = 0; c < s.c; ++c) {
        const T wv = weight[c * out_f + o];
        const T* px = x.raw() + (n * s.c + c) * hw;
        for (std::int64_t i = 0; i < hw; ++i) po[i] += wv * px[i];
      }
    }
  }
  return out;
}

template <class T>
Tensor<T> pointwise_linear(const Tensor<T>& x, const LinearParams<T>& p) {
  return pointwise_linear(x, p.weight, p.bias ? &*p.bias : nullptr);
}

template <class T>
LinearGrads<T> pointwise_linear_backward(const Tensor<T>& x, const Tensor<T>& weight,
                                         bool has_bias, const Tensor<T>& grad_out) {
  const Shape4& s = x.shape();
  const std::int64_t out_f = weight.shape().w;
  const std::int64_t hw = s.spatial();
  LinearGrads<T> g{Tensor<T>(s), Tensor<T>(weight.shape()), std::nullopt};
  if (has_bias) g.bias = Tensor<T>(Shape4{1, 1, 1, out_f});
  for (std::int64_t n = 0; n < s.n; ++n) {
    for (std::int64_t o = 0; o < out_f; ++o) {
      const T* pg = grad_out.raw() + (n * out_f + o) * hw;
      if (has_bias) {
        T acc = 0;
        for (std::int64_t i = 0; i < hw; ++i) acc += pg[i];
        (*g.bias)[o] += acc;
      }
      for (std::int64_t c = 0; c < s.c; ++c) {
        const T wv = weight[c * out_f + o];
        const T* px = x.raw() + (n * s.c + c) * hw;
        T* pgx = g.input.raw() + (n * s.c + c) * hw;
        T acc = 0;
        for (std::int64_t i = 0; i < hw; ++i) {
          acc += pg[i] * px[i];
          pgx[i] += pg[i] * wv;
        }
        g.weight[c * out_f + o] += acc;
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Stochastic depth
// ---------------------------------------------------------------------------

// Per-sample scale factors: 0 for dropped samples, 1/(1-rate) for kept ones.
// Eval mode and rate 0 leave the rng untouched and return all ones.
template <class T>
std::vector<T> drop_path_mask(std::int64_t batch, double rate, Mode mode, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw ConfigError("drop_path: rate must be in [0, 1), got " + std::to_string(rate));
  }
  std::vector<T> mask(static_cast<std::size_t>(batch), T(1));
  if (mode == Mode::eval || rate == 0.0) return mask;
  const T keep_scale = T(1) / (T(1) - static_cast<T>(rate));
  for (auto& m : mask) m = rng.bernoulli(1.0 - rate) ? keep_scale : T(0);
  return mask;
}

template <class T>
Tensor<T> apply_sample_mask(const Tensor<T>& x, const std::vector<T>& mask) {
  const Shape4& s = x.shape();
  const std::int64_t per = s.c * s.h * s.w;
  Tensor<T> out(s);
  for (std::int64_t n = 0; n < s.n; ++n) {
    const T k = mask[static_cast<std::size_t>(n)];
    for (std::int64_t i = 0; i < per; ++i) out[n * per + i] = x[n * per + i] * k;
  }
  return out;
}

template <class T>
Tensor<T> drop_path(const Tensor<T>& x, double rate, Mode mode, Rng& rng) {
  const auto mask = drop_path_mask<T>(x.shape().n, rate, mode, rng);
  if (mode == Mode::eval || rate == 0.0) return x;
  return apply_sample_mask(x, mask);
}

}  // namespace convformer
