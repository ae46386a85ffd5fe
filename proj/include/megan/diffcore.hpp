#pragma once

// Reverse-mode differentiation over dense 64-bit tensors.
//
// A Tape records every primitive applied to Vars created on it; backward()
// walks the record in exact reverse order and returns the gradient of a
// scalar loss with respect to every leaf created with requires_grad.
// Shapes are rank <= 2; binary elementwise ops broadcast row and column
// vectors (a dimension of extent 1 stretches to match the other operand).

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace megan::diff {

class Tensor {
 public:
  /// Scalar zero.
  Tensor();
  /// Throws ShapeError if the value count does not match the shape and
  /// NumericError if any value is NaN or infinite.
  Tensor(std::vector<std::size_t> shape, std::vector<double> values);

  static Tensor scalar(double v);
  static Tensor zeros(std::vector<std::size_t> shape);
  static Tensor full(std::vector<std::size_t> shape, double v);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);
  static Tensor row(std::vector<double> values);
  static Tensor column(std::vector<double> values);
  static Tensor identity(std::size_t n);

  const std::vector<std::size_t>& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return values_.size(); }
  /// Matrix view: rank 0 is 1x1, rank 1 is 1xn.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> values() const noexcept { return values_; }
  /// In-place access for optimizers. Callers must keep values finite.
  std::span<double> mutable_values() noexcept { return values_; }
  double operator[](std::size_t i) const { return values_[i]; }
  double at(std::size_t r, std::size_t c) const { return values_[r * cols() + c]; }
  /// Value of a single-element tensor.
  double item() const;

  bool operator==(const Tensor& other) const = default;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> values_;
};

std::string shape_string(const std::vector<std::size_t>& shape);

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid until the tape resets.
class Var {
 public:
  Var() = default;
  const Tensor& value() const;
  Tape& tape() const;
  std::size_t index() const noexcept { return index_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t index) : tape_(tape), index_(index) {}
  Tape* tape_ = nullptr;
  std::size_t index_ = 0;
};

/// Gradients of one backward pass, keyed by leaf Var.
class Gradients {
 public:
  /// Throws StateError if the Var is not a requires_grad leaf of the tape.
  const Tensor& operator[](Var v) const;
  bool contains(Var v) const;
  std::size_t size() const noexcept { return count_; }

 private:
  friend class Tape;
  std::vector<Tensor> grads_;
  std::vector<bool> present_;
  std::size_t count_ = 0;
};

/// Arguments handed to a primitive's derivative kernel.
struct BackwardArgs {
  const Tensor& out_value;
  const Tensor& out_grad;
  std::span<const Tensor* const> in_values;
  /// Null for inputs that do not require gradients. Kernels accumulate (+=).
  std::span<Tensor* const> in_grads;
};
using BackwardFn = std::function<void(const BackwardArgs&)>;

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad);
  Var parameter(Tensor value) { return leaf(std::move(value), true); }
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Records a primitive. `backward` may be empty for non-differentiable ops.
  Var record(Tensor value, std::vector<Var> inputs, BackwardFn backward);

  /// Reverse pass from a scalar loss. Throws StateError when called a second
  /// time without reset() and ShapeError if `loss` is not a single element.
  Gradients backward(Var loss);

  /// Clears all nodes; previously issued Vars become dangling.
  void reset();

  std::size_t size() const noexcept { return nodes_.size(); }
  bool consumed() const noexcept { return consumed_; }
  const Tensor& value(std::size_t index) const { return nodes_.at(index).value; }

 private:
  struct Node {
    Tensor value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    bool is_leaf = false;
  };
  void check_open() const;

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

// ---- dense primitives -------------------------------------------------------

Var matmul(Var a, Var b);
Var transpose(Var a);
Var reshape(Var a, std::size_t rows, std::size_t cols);

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var add_scalar(Var a, double s);
Var scale(Var a, double s);
Var neg(Var a);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }
inline Var operator+(Var a, double s) { return add_scalar(a, s); }
inline Var operator-(Var a, double s) { return add_scalar(a, -s); }
inline Var operator*(Var a, double s) { return scale(a, s); }
inline Var operator*(double s, Var a) { return scale(a, s); }
inline Var operator-(Var a) { return neg(a); }
/// s - a
inline Var rsub(double s, Var a) { return add_scalar(neg(a), s); }

/// Sum of all elements, shape {}.
Var sum(Var a);
/// Mean of all elements, shape {}.
Var mean(Var a);
/// Row sums, shape (rows x 1).
Var sum_rows(Var a);
/// Column sums, shape (1 x cols).
Var sum_cols(Var a);

/// Row-wise softmax.
Var softmax_rows(Var a);
/// Row-wise log-softmax (x - logsumexp(x)).
Var log_softmax_rows(Var a);

Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
inline Var concat_rows(std::initializer_list<Var> parts) {
  return concat_rows(std::span<const Var>(parts.begin(), parts.size()));
}
inline Var concat_cols(std::initializer_list<Var> parts) {
  return concat_cols(std::span<const Var>(parts.begin(), parts.size()));
}

// ---- elementwise functions --------------------------------------------------

enum class Fn { tanh, sigmoid, relu, exp, log };

/// Applies `fn` elementwise. DomainError for log of a non-positive value.
Var elementwise(Var x, Fn fn);
inline Var tanh(Var x) { return elementwise(x, Fn::tanh); }
inline Var sigmoid(Var x) { return elementwise(x, Fn::sigmoid); }
inline Var relu(Var x) { return elementwise(x, Fn::relu); }
inline Var exp(Var x) { return elementwise(x, Fn::exp); }
inline Var log(Var x) { return elementwise(x, Fn::log); }

/// log(1 + exp(x)) evaluated as max(x, 0) + log1p(exp(-|x|)).
Var softplus(Var x);
/// DomainError for x <= 0.
Var lgamma(Var x);
/// DomainError for x <= 0. Derivative kernel is trigamma.
Var digamma(Var x);

/// Clamp to [lo, hi]; the gradient passes where lo <= x <= hi.
Var clamp(Var x, double lo, double hi);

/// Inverted dropout: multiplies by a Bernoulli(1 - rate) mask scaled by
/// 1 / (1 - rate). rate == 0 returns x unchanged.
Var dropout(Var x, double rate, std::mt19937_64& rng);

// ---- segmented (bagged) ops -------------------------------------------------
// `offsets` has B+1 entries; segment b covers rows [offsets[b], offsets[b+1]).

/// Softmax over each segment of a column vector (n x 1).
Var segment_softmax(Var scores, std::span<const std::size_t> offsets);
/// out[b] = sum_{j in segment b} weights[j] * rows[j]; weights is n x 1,
/// rows is n x h, result B x h.
Var segment_pool(Var weights, Var rows, std::span<const std::size_t> offsets);

// ---- plain scalar kernels (also used by the tape ops) -----------------------

double softplus_value(double x);
double sigmoid_value(double x);

// ---- gradient checking ------------------------------------------------------

using ScalarFunction = std::function<Var(Tape&, std::span<const Var>)>;

/// Max over every parameter element of
/// |analytic - central difference| / (|analytic| + |central difference| + 1e-12).
double grad_check(const ScalarFunction& f, const std::vector<Tensor>& params, double h = 1e-5);

}  // namespace megan::diff
