#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "convformer/error.hpp"
#include "convformer/rng.hpp"

namespace convformer {

// Rank-4 NCHW shape.
struct Shape4 {
  std::int64_t n = 0;
  std::int64_t c = 0;
  std::int64_t h = 0;
  std::int64_t w = 0;

  friend bool operator==(const Shape4&, const Shape4&) = default;

  std::int64_t spatial() const { return h * w; }

  // Element count; throws SizeError when n*c*h*w does not fit the index range.
  std::int64_t numel() const {
    if (n < 0 || c < 0 || h < 0 || w < 0) {
      throw ShapeError("negative shape component in " + to_string());
    }
    std::int64_t total = 1;
    for (std::int64_t d : {n, c, h, w}) {
      if (d != 0 && total > std::numeric_limits<std::int64_t>::max() / d) {
        throw SizeError("element count overflows for shape " + to_string());
      }
      total *= d;
    }
    return total;
  }

  std::string to_string() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
           std::to_string(w) + ")";
  }
};

namespace init {

struct Zeros {};
struct Ones {};
struct Constant {
  double value;
};
struct Uniform {
  std::reference_wrapper<Rng> rng;
  double lo;
  double hi;
};
// Normal with std sqrt(2 / fan_in).
struct Kaiming {
  std::reference_wrapper<Rng> rng;
  std::int64_t fan_in;
};
// Normal truncated at two standard deviations.
struct TruncNormal {
  std::reference_wrapper<Rng> rng;
  double stddev;
};

}  // namespace init

using Init = std::variant<init::Zeros, init::Ones, init::Constant, init::Uniform, init::Kaiming,
                          init::TruncNormal>;

// Dense NCHW tensor owning a contiguous buffer. T is float on the production
// path and double for finite-difference checks.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape4 shape, T fill = T(0)) : shape_(shape) {
    const auto count = shape.numel();
    if (static_cast<std::uint64_t>(count) > std::vector<T>{}.max_size()) {
      throw SizeError("tensor too large: " + shape.to_string());
    }
    data_.assign(static_cast<std::size_t>(count), fill);
  }

  Tensor(Shape4 shape, std::vector<T> values) : shape_(shape), data_(std::move(values)) {
    if (static_cast<std::int64_t>(data_.size()) != shape.numel()) {
      throw ShapeError("value count " + std::to_string(data_.size()) + " does not match shape " +
                       shape.to_string());
    }
  }

  static Tensor create(Shape4 shape, const Init& how) {
    Tensor t(shape);
    std::visit([&t](const auto& spec) { t.fill_with(spec); }, how);
    return t;
  }

  static Tensor zeros(Shape4 shape) { return Tensor(shape); }
  static Tensor ones(Shape4 shape) { return Tensor(shape, T(1)); }
  static Tensor constant(Shape4 shape, T value) { return Tensor(shape, value); }
  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape()); }

  const Shape4& shape() const { return shape_; }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  T* raw() { return data_.data(); }
  const T* raw() const { return data_.data(); }

  std::int64_t index(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
    return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }

  T& operator()(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) {
    return data_[static_cast<std::size_t>(index(n, c, h, w))];
  }
  T operator()(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
    return data_[static_cast<std::size_t>(index(n, c, h, w))];
  }

  T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  T operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  // Same buffer under a new shape with identical element count.
  Tensor reshaped(Shape4 shape) const {
    if (shape.numel() != numel()) {
      throw ShapeError("cannot reshape " + shape_.to_string() + " to " + shape.to_string());
    }
    return Tensor(shape, data_);
  }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
    return Tensor<U>(shape_, std::move(out));
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void fill_with(const init::Zeros&) { fill(T(0)); }
  void fill_with(const init::Ones&) { fill(T(1)); }
  void fill_with(const init::Constant& c) { fill(static_cast<T>(c.value)); }
  void fill_with(const init::Uniform& u) {
    if (!(u.lo <= u.hi)) throw ConfigError("uniform init requires lo <= hi");
    for (auto& v : data_) v = static_cast<T>(u.rng.get().uniform(u.lo, u.hi));
  }
  void fill_with(const init::Kaiming& k) {
    if (k.fan_in <= 0) throw ConfigError("kaiming init requires fan_in > 0");
    const double stddev = std::sqrt(2.0 / static_cast<double>(k.fan_in));
    for (auto& v : data_) v = static_cast<T>(k.rng.get().normal() * stddev);
  }
  void fill_with(const init::TruncNormal& t) {
    for (auto& v : data_) v = static_cast<T>(t.rng.get().truncated_normal(t.stddev));
  }

  Shape4 shape_{};
  std::vector<T> data_;
};

inline void require_same_shape(const Shape4& a, const Shape4& b, const char* op) {
  if (a != b) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.to_string() + " vs " + b.to_string());
  }
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out(a.shape());
  const T* pa = a.raw();
  const T* pb = b.raw();
  T* po = out.raw();
  for (std::int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] + pb[i];
  return out;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "sub");
  Tensor<T> out(a.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a[i] - b[i];
  return out;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> out(a.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a[i] * b[i];
  return out;
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  Tensor<T> out(a.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a[i] * factor;
  return out;
}

// In-place a += b.
template <class T>
void accumulate(Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "accumulate");
  T* pa = a.raw();
  const T* pb = b.raw();
  for (std::int64_t i = 0; i < a.numel(); ++i) pa[i] += pb[i];
}

// out[n,c,h,w] = x[n,c,h,w] * s[n,c,0,0]
template <class T>
Tensor<T> mul_channelwise(const Tensor<T>& x, const Tensor<T>& s) {
  const auto& xs = x.shape();
  const auto& ss = s.shape();
  if (ss.h != 1 || ss.w != 1) {
    throw ShapeError("mul_channelwise: scale must be 1x1 spatially, got " + ss.to_string());
  }
  if (ss.n != xs.n || ss.c != xs.c) {
    throw ShapeError("mul_channelwise: batch/channel mismatch " + xs.to_string() + " vs " +
                     ss.to_string());
  }
  Tensor<T> out(xs);
  const std::int64_t hw = xs.spatial();
  for (std::int64_t nc = 0; nc < xs.n * xs.c; ++nc) {
    const T k = s[nc];
    const T* px = x.raw() + nc * hw;
    T* po = out.raw() + nc * hw;
    for (std::int64_t i = 0; i < hw; ++i) po[i] = px[i] * k;
  }
  return out;
}

template <class T>
T sum_all(const Tensor<T>& x) {
  T total = 0;
  for (T v : x.data()) total += v;
  return total;
}

template <class T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "max_abs_diff");
  T worst = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

template <class T>
bool all_finite(const Tensor<T>& x) {
  return std::all_of(x.data().begin(), x.data().end(), [](T v) { return std::isfinite(v); });
}

}  // namespace convformer
