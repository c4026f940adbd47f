#pragma once

// Reverse-mode automatic differentiation over dense float64 tensors.
//
// A Tape records every forward op together with a closure that pushes the
// output gradient back to the op's inputs. Parameters live in a ParamStore;
// Tape::param() links a tape leaf to a stored parameter so backward() can
// deposit gradients there. Nothing in this header draws random numbers:
// sampling noise is always passed in by the caller.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <numbers>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "bcva/error.hpp"

namespace bcva::grad {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_size(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

class Tensor {
 public:
  Tensor() : shape_{}, data_(1, 0.0) {}
  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}
  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_size(shape_)) {
      throw ShapeError("tensor: data length " + std::to_string(data_.size()) + " does not match shape " +
                       shape_str(shape_));
    }
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  double item() const {
    if (data_.size() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape_) + " is not scalar");
    return data_[0];
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }
  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

// ---------------------------------------------------------------------------
// Parameters and optimizer

struct Parameter {
  Tensor value;
  Tensor grad;
  Tensor adam_m;
  Tensor adam_v;
  bool has_grad = false;
};

/// Named parameters with gradient slots and Adam moments. Iteration order is
/// lexicographic by name, so every reduction over parameters is ordered.
class ParamStore {
 public:
  Parameter& add(const std::string& name, Tensor init) {
    if (params_.count(name)) throw DomainError("parameter '" + name + "' already exists");
    Parameter p;
    p.grad = Tensor(init.shape());
    p.adam_m = Tensor(init.shape());
    p.adam_v = Tensor(init.shape());
    p.value = std::move(init);
    return params_.emplace(name, std::move(p)).first->second;
  }

  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  Parameter& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw DomainError("unknown parameter '" + name + "'");
    return it->second;
  }
  const Parameter& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw DomainError("unknown parameter '" + name + "'");
    return it->second;
  }

  /// Zeroes every gradient; gradients then count as populated.
  void zero_grad() {
    for (auto& [_, p] : params_) {
      p.grad.fill(0.0);
      p.has_grad = true;
    }
  }

  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, p] : params_) n += p.value.size();
    return n;
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  std::int64_t adam_steps() const { return adam_steps_; }
  void set_adam_steps(std::int64_t t) { adam_steps_ = t; }

 private:
  friend void adam_step(ParamStore&, double, double, double, double);
  std::map<std::string, Parameter> params_;
  std::int64_t adam_steps_ = 0;
};

/// One Adam update in the epsilon-hat form: the step size is bias-corrected
/// and eps_hat is added to sqrt(v) without correction.
inline void adam_step(ParamStore& store, double lr, double beta1, double beta2, double eps_hat) {
  for (const auto& [name, p] : store.params_) {
    if (!p.has_grad) throw DomainError("adam_step: missing gradient for parameter '" + name + "'");
  }
  const std::int64_t t = ++store.adam_steps_;
  const double step = lr * std::sqrt(1.0 - std::pow(beta2, static_cast<double>(t))) /
                      (1.0 - std::pow(beta1, static_cast<double>(t)));
  for (auto& [name, p] : store.params_) {
    double* w = p.value.data();
    const double* g = p.grad.data();
    double* m = p.adam_m.data();
    double* v = p.adam_v.data();
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
      v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
      w[i] -= step * m[i] / (std::sqrt(v[i]) + eps_hat);
    }
    p.has_grad = false;
  }
}

// ---------------------------------------------------------------------------
// Tape

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  double item() const { return value().item(); }
  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using Backprop = std::function<void(Tape&, const Tensor& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf with no gradient (inputs, targets, noise).
  Var constant(Tensor value) {
    nodes_.push_back(Node{std::move(value), {}, {}, "constant", nullptr, false, false});
    return Var(this, nodes_.size() - 1);
  }

  /// Leaf linked to a stored parameter; backward() adds into its gradient.
  Var param(ParamStore& store, const std::string& name) {
    Parameter& p = store.at(name);
    nodes_.push_back(Node{p.value, {}, {}, "param", &p, true, false});
    return Var(this, nodes_.size() - 1);
  }

  /// Leaf that receives a gradient but is not linked to any store.
  Var variable(Tensor value) {
    nodes_.push_back(Node{std::move(value), {}, {}, "variable", nullptr, true, false});
    return Var(this, nodes_.size() - 1);
  }

  Var record(const char* op, Tensor value, bool requires_grad, Backprop backprop) {
    if (!value.all_finite()) throw NumericError(std::string(op) + ": non-finite output");
    nodes_.push_back(Node{std::move(value), {}, std::move(backprop), op, nullptr, requires_grad, false});
    return Var(this, nodes_.size() - 1);
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  /// Gradient buffer of node `id`, zero-initialized on first use.
  Tensor& grad_buffer(std::size_t id) {
    Node& n = nodes_.at(id);
    if (!n.has_grad) {
      n.grad = Tensor(n.value.shape());
      n.has_grad = true;
    }
    return n.grad;
  }

  /// Gradient of the last backward() with respect to `v` (zeros if unreached).
  Tensor grad(Var v) const {
    const Node& n = nodes_.at(v.id());
    return n.has_grad ? n.grad : Tensor(n.value.shape());
  }

  /// Reverse sweep from a scalar node; each recorded op is visited once, in
  /// reverse recording order. Parameter gradients are added into the store.
  void backward(Var loss) {
    if (loss.tape() != this) throw DomainError("backward: variable belongs to another tape");
    if (loss.value().size() != 1) {
      throw ShapeError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    }
    for (auto& n : nodes_) {
      n.has_grad = false;
      n.grad = Tensor();
    }
    grad_buffer(loss.id()).fill(1.0);
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.has_grad || !n.backprop) continue;
      // Closures only touch the buffers of earlier nodes.
      n.backprop(*this, n.grad);
    }
    for (auto& n : nodes_) {
      if (n.param == nullptr || !n.has_grad) continue;
      Tensor& dst = n.param->grad;
      if (!n.param->has_grad) {
        dst = Tensor(n.value.shape());
        n.param->has_grad = true;
      }
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += n.grad[k];
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    Backprop backprop;
    const char* op;
    Parameter* param;
    bool requires_grad;
    bool has_grad;
  };
  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }

/// Full backward pass: zeroes the store's gradients, then accumulates.
inline void backward(Tape& tape, Var loss, ParamStore& store) {
  store.zero_grad();
  tape.backward(loss);
}

// ---------------------------------------------------------------------------
// Forward primitives

namespace detail {

inline Tape& same_tape(Var a, Var b, const char* op) {
  if (a.tape() == nullptr || a.tape() != b.tape()) throw DomainError(std::string(op) + ": operands on different tapes");
  return *a.tape();
}

[[noreturn]] inline void shape_mismatch(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

enum class Broadcast { Same, Row, Scalar };

inline Broadcast broadcast_kind(const char* op, const Shape& a, const Shape& b) {
  if (a == b) return Broadcast::Same;
  if (a.size() == 2 && b.size() == 1 && b[0] == a[1]) return Broadcast::Row;
  if (shape_size(b) == 1 && b.size() <= 1) return Broadcast::Scalar;
  shape_mismatch(op, a, b);
}

inline std::size_t b_index(Broadcast k, std::size_t i, std::size_t cols) {
  switch (k) {
    case Broadcast::Same: return i;
    case Broadcast::Row: return i % cols;
    case Broadcast::Scalar: return 0;
  }
  return 0;
}

/// Adds sign * g (reduced to b's broadcast shape) into b's gradient.
inline void reduce_into(Tape& t, std::size_t id, Broadcast k, const Tensor& g, std::size_t cols, double sign) {
  Tensor& gb = t.grad_buffer(id);
  for (std::size_t i = 0; i < g.size(); ++i) gb[b_index(k, i, cols)] += sign * g[i];
}

template <class F, class D>
Var unary(const char* op, Var a, F f, D dfdx) {
  Tape& t = *a.tape();
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  const std::size_t ia = a.id();
  return t.record(op, std::move(y), t.requires_grad(ia), [ia, dfdx](Tape& tp, const Tensor& g) {
    const Tensor& xv = tp.value(ia);
    Tensor& ga = tp.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * dfdx(xv[i]);
  });
}

inline void require_rank2(const char* op, const Shape& s) {
  if (s.size() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got shape " + shape_str(s));
}

}  // namespace detail

/// [n,k] x [k,m] -> [n,m]. Zero entries of the left operand are skipped.
inline Var matmul(Var a, Var b) {
  Tape& t = detail::same_tape(a, b, "matmul");
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0)) detail::shape_mismatch("matmul", A.shape(), B.shape());
  const std::size_t n = A.dim(0), k = A.dim(1), m = B.dim(1);
  Tensor C({n, m});
  for (std::size_t i = 0; i < n; ++i) {
    double* c = C.data() + i * m;
    const double* arow = A.data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = arow[p];
      if (aip == 0.0) continue;
      const double* brow = B.data() + p * m;
      for (std::size_t j = 0; j < m; ++j) c[j] += aip * brow[j];
    }
  }
  const std::size_t ia = a.id(), ib = b.id();
  const bool ra = t.requires_grad(ia), rb = t.requires_grad(ib);
  return t.record("matmul", std::move(C), ra || rb, [ia, ib, ra, rb, n, k, m](Tape& tp, const Tensor& g) {
    const Tensor& Av = tp.value(ia);
    const Tensor& Bv = tp.value(ib);
    if (ra) {
      Tensor& gA = tp.grad_buffer(ia);
      for (std::size_t i = 0; i < n; ++i) {
        const double* gi = g.data() + i * m;
        for (std::size_t p = 0; p < k; ++p) {
          const double* brow = Bv.data() + p * m;
          double s = 0.0;
          for (std::size_t j = 0; j < m; ++j) s += gi[j] * brow[j];
          gA.data()[i * k + p] += s;
        }
      }
    }
    if (rb) {
      Tensor& gB = tp.grad_buffer(ib);
      for (std::size_t i = 0; i < n; ++i) {
        const double* gi = g.data() + i * m;
        const double* arow = Av.data() + i * k;
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = arow[p];
          if (aip == 0.0) continue;
          double* gb = gB.data() + p * m;
          for (std::size_t j = 0; j < m; ++j) gb[j] += aip * gi[j];
        }
      }
    }
  });
}

/// Elementwise a + b; b may also be a row vector [m] added to every row of
/// an [n,m] matrix, or a single-element scalar.
inline Var add(Var a, Var b) {
  Tape& t = detail::same_tape(a, b, "add");
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  const auto kind = detail::broadcast_kind("add", A.shape(), B.shape());
  const std::size_t cols = A.rank() == 2 ? A.dim(1) : 1;
  Tensor C(A.shape());
  for (std::size_t i = 0; i < A.size(); ++i) C[i] = A[i] + B[detail::b_index(kind, i, cols)];
  const std::size_t ia = a.id(), ib = b.id();
  const bool ra = t.requires_grad(ia), rb = t.requires_grad(ib);
  return t.record("add", std::move(C), ra || rb, [=](Tape& tp, const Tensor& g) {
    if (ra) {
      Tensor& ga = tp.grad_buffer(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (rb) detail::reduce_into(tp, ib, kind, g, cols, 1.0);
  });
}

/// Elementwise a - b with the broadcasting rules of add().
inline Var sub(Var a, Var b) {
  Tape& t = detail::same_tape(a, b, "sub");
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  const auto kind = detail::broadcast_kind("sub", A.shape(), B.shape());
  const std::size_t cols = A.rank() == 2 ? A.dim(1) : 1;
  Tensor C(A.shape());
  for (std::size_t i = 0; i < A.size(); ++i) C[i] = A[i] - B[detail::b_index(kind, i, cols)];
  const std::size_t ia = a.id(), ib = b.id();
  const bool ra = t.requires_grad(ia), rb = t.requires_grad(ib);
  return t.record("sub", std::move(C), ra || rb, [=](Tape& tp, const Tensor& g) {
    if (ra) {
      Tensor& ga = tp.grad_buffer(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (rb) detail::reduce_into(tp, ib, kind, g, cols, -1.0);
  });
}

/// Elementwise product of equal shapes.
inline Var mul(Var a, Var b) {
  Tape& t = detail::same_tape(a, b, "mul");
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.shape() != B.shape()) detail::shape_mismatch("mul", A.shape(), B.shape());
  Tensor C(A.shape());
  for (std::size_t i = 0; i < A.size(); ++i) C[i] = A[i] * B[i];
  const std::size_t ia = a.id(), ib = b.id();
  const bool ra = t.requires_grad(ia), rb = t.requires_grad(ib);
  return t.record("mul", std::move(C), ra || rb, [=](Tape& tp, const Tensor& g) {
    const Tensor& Av = tp.value(ia);
    const Tensor& Bv = tp.value(ib);
    if (ra) {
      Tensor& ga = tp.grad_buffer(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * Bv[i];
    }
    if (rb) {
      Tensor& gb = tp.grad_buffer(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * Av[i];
    }
  });
}

inline Var scale(Var a, double c) {
  return detail::unary("scale", a, [c](double x) { return c * x; }, [c](double) { return c; });
}

inline Var relu(Var a) {
  return detail::unary("relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
                       [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Var tanh(Var a) {
  return detail::unary("tanh", a, [](double x) { return std::tanh(x); },
                       [](double x) {
                         const double y = std::tanh(x);
                         return 1.0 - y * y;
                       });
}

inline double softplus_value(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }
inline double sigmoid_value(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Var softplus(Var a) { return detail::unary("softplus", a, softplus_value, sigmoid_value); }

inline Var sigmoid(Var a) {
  return detail::unary("sigmoid", a, sigmoid_value, [](double x) {
    const double s = sigmoid_value(x);
    return s * (1.0 - s);
  });
}

inline Var exp(Var a) {
  return detail::unary("exp", a, [](double x) { return std::exp(x); }, [](double x) { return std::exp(x); });
}

inline Var log(Var a) {
  return detail::unary("log", a, [](double x) { return std::log(x); }, [](double x) { return 1.0 / x; });
}

/// Clamp to [lo, hi]; the gradient is zero outside the interval.
inline Var clamp(Var a, double lo, double hi) {
  return detail::unary("clamp", a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
                       [lo, hi](double x) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

/// Huber function with threshold delta: 0.5 x^2 inside, linear outside.
inline double huber_value(double x, double delta) {
  const double ax = std::abs(x);
  return ax <= delta ? 0.5 * x * x : delta * (ax - 0.5 * delta);
}

inline Var huber(Var residual, double delta = 1.0) {
  return detail::unary("huber", residual, [delta](double x) { return huber_value(x, delta); },
                       [delta](double x) { return std::abs(x) <= delta ? x : (x > 0 ? delta : -delta); });
}

/// Sum of all elements -> scalar.
inline Var sum(Var a) {
  Tape& t = *a.tape();
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  const std::size_t ia = a.id();
  return t.record("sum", Tensor::scalar(s), t.requires_grad(ia), [ia](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad_buffer(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[0];
  });
}

inline Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

/// log(sum(exp(x))) along the last axis: [k] -> scalar, [n,k] -> [n].
inline Var log_sum_exp(Var a) {
  Tape& t = *a.tape();
  const Tensor& X = a.value();
  if (X.rank() != 1 && X.rank() != 2) throw ShapeError("log_sum_exp: expected rank 1 or 2, got " + shape_str(X.shape()));
  const std::size_t rows = X.rank() == 2 ? X.dim(0) : 1;
  const std::size_t cols = X.rank() == 2 ? X.dim(1) : X.dim(0);
  if (cols == 0) throw ShapeError("log_sum_exp: empty reduction axis");
  Tensor Y = X.rank() == 2 ? Tensor({rows}) : Tensor();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = X.data() + r * cols;
    const double mx = *std::max_element(x, x + cols);
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += std::exp(x[c] - mx);
    Y[r] = mx + std::log(s);
  }
  const std::size_t ia = a.id();
  const std::size_t out_id = t.size();
  return t.record("log_sum_exp", std::move(Y), t.requires_grad(ia), [=](Tape& tp, const Tensor& g) {
    const Tensor& Xv = tp.value(ia);
    const Tensor& Yv = tp.value(out_id);
    Tensor& ga = tp.grad_buffer(ia);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) {
        ga[r * cols + c] += g[r] * std::exp(Xv[r * cols + c] - Yv[r]);
      }
    }
  });
}

/// mean + exp(log_std) * noise, elementwise; noise is supplied by the caller.
inline Var gaussian_reparam_sample(Var mean, Var log_std, const Tensor& noise) {
  Tape& t = detail::same_tape(mean, log_std, "gaussian_reparam_sample");
  const Tensor& M = mean.value();
  const Tensor& L = log_std.value();
  if (M.shape() != L.shape()) detail::shape_mismatch("gaussian_reparam_sample", M.shape(), L.shape());
  if (noise.shape() != M.shape()) detail::shape_mismatch("gaussian_reparam_sample", M.shape(), noise.shape());
  Tensor Z(M.shape());
  for (std::size_t i = 0; i < Z.size(); ++i) Z[i] = M[i] + std::exp(L[i]) * noise[i];
  const std::size_t im = mean.id(), il = log_std.id();
  const bool rm = t.requires_grad(im), rl = t.requires_grad(il);
  return t.record("gaussian_reparam_sample", std::move(Z), rm || rl, [=](Tape& tp, const Tensor& g) {
    if (rm) {
      Tensor& gm = tp.grad_buffer(im);
      for (std::size_t i = 0; i < g.size(); ++i) gm[i] += g[i];
    }
    if (rl) {
      const Tensor& Lv = tp.value(il);
      Tensor& gl = tp.grad_buffer(il);
      for (std::size_t i = 0; i < g.size(); ++i) gl[i] += g[i] * std::exp(Lv[i]) * noise[i];
    }
  });
}

inline constexpr double kHalfLog2Pi = 0.91893853320467274178;  // 0.5 * log(2 pi)

/// Log density of a diagonal Gaussian, summed over the last axis:
/// [d] -> scalar, [n,d] -> [n]. All three operands share one shape.
inline Var diag_gaussian_log_prob(Var x, Var mean, Var log_std) {
  Tape& t = detail::same_tape(x, mean, "diag_gaussian_log_prob");
  detail::same_tape(x, log_std, "diag_gaussian_log_prob");
  const Tensor& X = x.value();
  const Tensor& M = mean.value();
  const Tensor& L = log_std.value();
  if (X.shape() != M.shape()) detail::shape_mismatch("diag_gaussian_log_prob", X.shape(), M.shape());
  if (X.shape() != L.shape()) detail::shape_mismatch("diag_gaussian_log_prob", X.shape(), L.shape());
  if (X.rank() != 1 && X.rank() != 2) throw ShapeError("diag_gaussian_log_prob: expected rank 1 or 2");
  const std::size_t rows = X.rank() == 2 ? X.dim(0) : 1;
  const std::size_t d = X.rank() == 2 ? X.dim(1) : X.dim(0);
  Tensor Y = X.rank() == 2 ? Tensor({rows}) : Tensor();
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      const std::size_t i = r * d + c;
      const double u = (X[i] - M[i]) * std::exp(-L[i]);
      s += -0.5 * u * u - L[i] - kHalfLog2Pi;
    }
    Y[r] = s;
  }
  const std::size_t ix = x.id(), im = mean.id(), il = log_std.id();
  const bool rx = t.requires_grad(ix), rm = t.requires_grad(im), rl = t.requires_grad(il);
  return t.record("diag_gaussian_log_prob", std::move(Y), rx || rm || rl, [=](Tape& tp, const Tensor& g) {
    const Tensor& Xv = tp.value(ix);
    const Tensor& Mv = tp.value(im);
    const Tensor& Lv = tp.value(il);
    Tensor* gx = rx ? &tp.grad_buffer(ix) : nullptr;
    Tensor* gm = rm ? &tp.grad_buffer(im) : nullptr;
    Tensor* gl = rl ? &tp.grad_buffer(il) : nullptr;
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < d; ++c) {
        const std::size_t i = r * d + c;
        const double inv = std::exp(-Lv[i]);
        const double u = (Xv[i] - Mv[i]) * inv;
        if (gx) (*gx)[i] += g[r] * (-u * inv);
        if (gm) (*gm)[i] += g[r] * (u * inv);
        if (gl) (*gl)[i] += g[r] * (u * u - 1.0);
      }
    }
  });
}

/// Log density of every row of x [n,d] under every component of a diagonal
/// Gaussian family with means and log-stds [K,d] -> [n,K].
inline Var pairwise_diag_gaussian_log_prob(Var x, Var means, Var log_stds) {
  Tape& t = detail::same_tape(x, means, "pairwise_diag_gaussian_log_prob");
  detail::same_tape(x, log_stds, "pairwise_diag_gaussian_log_prob");
  const Tensor& X = x.value();
  const Tensor& M = means.value();
  const Tensor& L = log_stds.value();
  detail::require_rank2("pairwise_diag_gaussian_log_prob", X.shape());
  detail::require_rank2("pairwise_diag_gaussian_log_prob", M.shape());
  if (M.shape() != L.shape()) detail::shape_mismatch("pairwise_diag_gaussian_log_prob", M.shape(), L.shape());
  if (X.dim(1) != M.dim(1)) detail::shape_mismatch("pairwise_diag_gaussian_log_prob", X.shape(), M.shape());
  const std::size_t n = X.dim(0), K = M.dim(0), d = X.dim(1);
  Tensor Y({n, K});
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t k = 0; k < K; ++k) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        const double u = (X[r * d + c] - M[k * d + c]) * std::exp(-L[k * d + c]);
        s += -0.5 * u * u - L[k * d + c] - kHalfLog2Pi;
      }
      Y[r * K + k] = s;
    }
  }
  const std::size_t ix = x.id(), im = means.id(), il = log_stds.id();
  const bool rx = t.requires_grad(ix), rm = t.requires_grad(im), rl = t.requires_grad(il);
  return t.record("pairwise_diag_gaussian_log_prob", std::move(Y), rx || rm || rl,
                  [=](Tape& tp, const Tensor& g) {
                    const Tensor& Xv = tp.value(ix);
                    const Tensor& Mv = tp.value(im);
                    const Tensor& Lv = tp.value(il);
                    Tensor* gx = rx ? &tp.grad_buffer(ix) : nullptr;
                    Tensor* gm = rm ? &tp.grad_buffer(im) : nullptr;
                    Tensor* gl = rl ? &tp.grad_buffer(il) : nullptr;
                    for (std::size_t r = 0; r < n; ++r) {
                      for (std::size_t k = 0; k < K; ++k) {
                        const double gk = g[r * K + k];
                        for (std::size_t c = 0; c < d; ++c) {
                          const double inv = std::exp(-Lv[k * d + c]);
                          const double u = (Xv[r * d + c] - Mv[k * d + c]) * inv;
                          if (gx) (*gx)[r * d + c] += gk * (-u * inv);
                          if (gm) (*gm)[k * d + c] += gk * (u * inv);
                          if (gl) (*gl)[k * d + c] += gk * (u * u - 1.0);
                        }
                      }
                    }
                  });
}

}  // namespace bcva::grad
