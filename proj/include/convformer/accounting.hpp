#pragma once

#include <cstdint>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "convformer/backbone.hpp"
#include "convformer/error.hpp"
#include "convformer/format.hpp"
#include "convformer/nnops.hpp"
#include "convformer/tensor.hpp"

namespace convformer {

// Multiply-accumulate counts (one MAC = one "FLOP" in the vision-paper
// convention). Normalization, activations, pooling and elementwise ops count
// zero; counts are per image.
namespace macs {

inline std::int64_t conv2d(const Shape4& out, const Shape4& weight) {
  return out.c * weight.c * weight.h * weight.w * out.h * out.w;
}
inline std::int64_t linear(std::int64_t in, std::int64_t out) { return in * out; }
inline std::int64_t pointwise_linear(std::int64_t in, std::int64_t out, std::int64_t spatial) {
  return in * out * spatial;
}

}  // namespace macs

struct CostEntry {
  std::string path;
  std::int64_t params = 0;
  std::int64_t macs = 0;
  friend bool operator==(const CostEntry&, const CostEntry&) = default;
};

struct CostReport {
  std::string model;
  Shape4 input{};
  std::int64_t total_params = 0;
  std::int64_t total_macs = 0;
  std::vector<CostEntry> breakdown;
  friend bool operator==(const CostReport&, const CostReport&) = default;
};

// Graph policy that propagates shapes only and books MACs against the current
// scope path.
template <class T>
class CostCounter {
 public:
  using Scalar = T;
  using Var = Shape4;

  void push_scope(const std::string& name) {
    stack_.push_back(stack_.empty() ? name : stack_.back() + "." + name);
  }
  void pop_scope() { stack_.pop_back(); }

  Shape4 shape(const Var& v) const { return v; }
  Var input(const Tensor<T>& t) { return t.shape(); }

  Var conv2d(const Var& x, const ConvParams<T>& p) {
    const Shape4 out = conv2d_output_shape(x, p.weight.shape(), p.geometry);
    book(macs::conv2d(out, p.weight.shape()));
    return out;
  }
  Var batchnorm(const Var& x, const BatchNormState<T>& s, Mode) {
    if (x.c != s.channels()) throw ShapeError("batchnorm2d: channel mismatch");
    return x;
  }
  Var activation(const Var& x, Activation) { return x; }
  Var global_avg_pool(const Var& x) {
    if (x.spatial() < 1) throw GeometryError("global_avg_pool: empty spatial extent");
    return {x.n, x.c, 1, 1};
  }
  Var linear(const Var& x, const LinearParams<T>& p) {
    validate_linear(x.c * x.h * x.w, p.weight.shape(), nullptr);
    book(macs::linear(p.in_features(), p.out_features()));
    return {x.n, p.out_features(), 1, 1};
  }
  Var pointwise_linear(const Var& x, const LinearParams<T>& p) {
    validate_linear(x.c, p.weight.shape(), nullptr);
    book(macs::pointwise_linear(p.in_features(), p.out_features(), x.spatial()));
    return {x.n, p.out_features(), x.h, x.w};
  }
  Var add(const Var& a, const Var& b) {
    require_same_shape(a, b, "add");
    return a;
  }
  Var mul_channelwise(const Var& x, const Var& s) {
    if (s.h != 1 || s.w != 1 || s.n != x.n || s.c != x.c) {
      throw ShapeError("mul_channelwise: incompatible scale " + s.to_string());
    }
    return x;
  }
  Var drop_path(const Var& x, double, Mode, Rng&) { return x; }

  const std::map<std::string, std::int64_t>& macs_by_scope() const { return macs_; }
  std::int64_t total() const { return total_; }

 private:
  void book(std::int64_t m) {
    macs_[stack_.empty() ? std::string() : stack_.back()] += m;
    total_ += m;
  }

  std::vector<std::string> stack_;
  std::map<std::string, std::int64_t> macs_;
  std::int64_t total_ = 0;
};

namespace detail {

template <class T>
CostReport params_breakdown(const Model<T>& m) {
  CostReport r;
  r.model = m.config.name;
  std::map<std::string, std::size_t> index;
  for (const auto& e : param_set(m, false)) {
    auto [it, inserted] = index.emplace(e.module, r.breakdown.size());
    if (inserted) r.breakdown.push_back({e.module, 0, 0});
    r.breakdown[it->second].params += e.tensor->numel();
    r.total_params += e.tensor->numel();
  }
  return r;
}

}  // namespace detail

// Learnable scalars (weights, biases, BN gamma/beta); running statistics are
// excluded.
template <class T>
CostReport count_params(const Model<T>& m) {
  return detail::params_breakdown(m);
}

// Parameters plus per-image MACs at `input` (batch forced to 1).
template <class T>
CostReport count_flops(const Model<T>& m, Shape4 input) {
  CostReport r = detail::params_breakdown(m);
  input.n = 1;
  r.input = input;
  CostCounter<T> counter;
  Rng unused(0);
  // The counter never mutates parameters; the const_cast lets it share the
  // forward code written against mutable parameter structs.
  auto& mut = const_cast<Model<T>&>(m);
  model_forward(counter, mut, input, Mode::eval, unused);
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < r.breakdown.size(); ++i) index[r.breakdown[i].path] = i;
  for (const auto& [path, count] : counter.macs_by_scope()) {
    auto it = index.find(path);
    if (it == index.end()) {
      index[path] = r.breakdown.size();
      r.breakdown.push_back({path, 0, count});
    } else {
      r.breakdown[it->second].macs += count;
    }
  }
  r.total_macs = counter.total();
  return r;
}

// Zero-initialized model for structural counting; no random draws.
template <class T = float>
Model<T> skeleton(const ModelConfig& cfg) {
  return build_model<T>(cfg, static_cast<Rng*>(nullptr));
}

inline CostReport cost_report(const ModelConfig& cfg, std::int64_t height, std::int64_t width) {
  const auto m = skeleton<float>(cfg);
  return count_flops(m, Shape4{1, 3, height, width});
}

inline std::string render_text(const CostReport& r, bool with_breakdown = true) {
  std::ostringstream os;
  os << "# model: " << r.model << "\n";
  if (r.input.h > 0) {
    os << "# input: " << r.input.h << "x" << r.input.w << " (per image)\n";
  }
  os << "# MACs counted for conv/linear only; BN, activations, pooling and adds count 0\n";
  if (with_breakdown) {
    os << std::left << std::setw(40) << "module" << std::right << std::setw(14) << "params"
       << std::setw(16) << "MACs" << "\n";
    for (const auto& e : r.breakdown) {
      os << std::left << std::setw(40) << e.path << std::right << std::setw(14) << e.params
         << std::setw(16) << e.macs << "\n";
    }
  }
  os << "total_params " << r.total_params << " (" << format_number(r.total_params / 1e6) << "M)\n";
  if (r.input.h > 0) {
    os << "total_macs " << r.total_macs << " (" << format_number(r.total_macs / 1e9) << "G)\n";
  }
  return os.str();
}

}  // namespace convformer
