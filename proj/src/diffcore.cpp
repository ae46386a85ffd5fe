#include "megan/diffcore.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "megan/errors.hpp"
#include "megan/special_functions.hpp"

namespace megan::diff {
namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMajor>;
using MutMap = Eigen::Map<RowMajor>;

std::size_t product(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<std::size_t>());
}

ConstMap as_matrix(const Tensor& t) { return ConstMap(t.values().data(), t.rows(), t.cols()); }

MutMap as_matrix(Tensor& t) { return MutMap(t.mutable_values().data(), t.rows(), t.cols()); }

void add_into(Tensor& dst, std::span<const double> src) {
  auto d = dst.mutable_values();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += src[i];
}

Tape& common_tape(Var a, Var b) {
  if (&a.tape() != &b.tape()) throw StateError("operands recorded on different tapes");
  return a.tape();
}

struct Broadcast {
  std::size_t rows, cols;
  std::size_t a_rows, a_cols, b_rows, b_cols;
  std::vector<std::size_t> shape;

  std::size_t a_index(std::size_t r, std::size_t c) const {
    return (a_rows == 1 ? 0 : r) * a_cols + (a_cols == 1 ? 0 : c);
  }
  std::size_t b_index(std::size_t r, std::size_t c) const {
    return (b_rows == 1 ? 0 : r) * b_cols + (b_cols == 1 ? 0 : c);
  }
};

Broadcast broadcast(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rank() > 2 || b.rank() > 2) throw ShapeError(std::string(op) + ": rank > 2 unsupported");
  Broadcast bc{0, 0, a.rows(), a.cols(), b.rows(), b.cols(), {}};
  auto dim = [&](std::size_t x, std::size_t y) {
    if (x == y || y == 1) return x;
    if (x == 1) return y;
    throw ShapeError(std::string(op) + ": cannot broadcast " + shape_string(a.shape()) + " with " +
                     shape_string(b.shape()));
  };
  bc.rows = dim(bc.a_rows, bc.b_rows);
  bc.cols = dim(bc.a_cols, bc.b_cols);
  if (a.shape() == b.shape()) {
    bc.shape = a.shape();
  } else {
    bc.shape = {bc.rows, bc.cols};
  }
  return bc;
}

template <class Forward, class Backward>
Var binary(Var a, Var b, const char* name, Forward fwd, Backward bwd) {
  Tape& tape = common_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const Broadcast bc = broadcast(av, bv, name);
  std::vector<double> out(bc.rows * bc.cols);
  for (std::size_t r = 0; r < bc.rows; ++r) {
    for (std::size_t c = 0; c < bc.cols; ++c) {
      out[r * bc.cols + c] = fwd(av[bc.a_index(r, c)], bv[bc.b_index(r, c)]);
    }
  }
  return tape.record(Tensor(bc.shape, std::move(out)), {a, b}, [bc, bwd](const BackwardArgs& args) {
    const Tensor& x = *args.in_values[0];
    const Tensor& y = *args.in_values[1];
    Tensor* gx = args.in_grads[0];
    Tensor* gy = args.in_grads[1];
    auto gxv = gx ? gx->mutable_values() : std::span<double>{};
    auto gyv = gy ? gy->mutable_values() : std::span<double>{};
    for (std::size_t r = 0; r < bc.rows; ++r) {
      for (std::size_t c = 0; c < bc.cols; ++c) {
        const std::size_t o = r * bc.cols + c;
        const std::size_t ia = bc.a_index(r, c);
        const std::size_t ib = bc.b_index(r, c);
        double da = 0.0;
        double db = 0.0;
        bwd(x[ia], y[ib], args.out_value[o], args.out_grad[o], da, db);
        if (gx) gxv[ia] += da;
        if (gy) gyv[ib] += db;
      }
    }
  });
}

template <class Forward, class Derivative>
Var unary(Var x, Forward fwd, Derivative deriv) {
  const Tensor& xv = x.value();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xv[i]);
  return x.tape().record(Tensor(xv.shape(), std::move(out)), {x}, [deriv](const BackwardArgs& args) {
    auto g = args.in_grads[0]->mutable_values();
    const Tensor& in = *args.in_values[0];
    for (std::size_t i = 0; i < g.size(); ++i) {
      g[i] += args.out_grad[i] * deriv(in[i], args.out_value[i]);
    }
  });
}

void check_offsets(std::span<const std::size_t> offsets, std::size_t n, const char* op) {
  if (offsets.size() < 2 || offsets.front() != 0 || offsets.back() != n) {
    throw ShapeError(std::string(op) + ": offsets must start at 0 and end at the row count");
  }
  for (std::size_t b = 0; b + 1 < offsets.size(); ++b) {
    if (offsets[b + 1] <= offsets[b]) throw ShapeError(std::string(op) + ": empty segment");
  }
}

}  // namespace

// ---- Tensor -----------------------------------------------------------------

Tensor::Tensor() : shape_{}, values_{0.0} {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  if (product(shape_) != values_.size()) {
    throw ShapeError("tensor shape " + shape_string(shape_) + " expects " +
                     std::to_string(product(shape_)) + " values, got " +
                     std::to_string(values_.size()));
  }
  for (double v : values_) {
    if (!std::isfinite(v)) throw NumericError("non-finite value in tensor " + shape_string(shape_));
  }
}

Tensor Tensor::scalar(double v) { return Tensor({}, {v}); }

Tensor Tensor::zeros(std::vector<std::size_t> shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(std::vector<std::size_t> shape, double v) {
  const std::size_t n = product(shape);
  return Tensor(std::move(shape), std::vector<double>(n, v));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
  return Tensor({rows, cols}, std::move(values));
}

Tensor Tensor::row(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor({1, n}, std::move(values));
}

Tensor Tensor::column(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor({n, 1}, std::move(values));
}

Tensor Tensor::identity(std::size_t n) {
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
  return matrix(n, n, std::move(v));
}

std::size_t Tensor::rows() const {
  switch (shape_.size()) {
    case 0:
    case 1:
      return 1;
    case 2:
      return shape_[0];
    default:
      throw ShapeError("rank " + std::to_string(shape_.size()) + " tensor has no matrix view");
  }
}

std::size_t Tensor::cols() const {
  switch (shape_.size()) {
    case 0:
      return 1;
    case 1:
      return shape_[0];
    case 2:
      return shape_[1];
    default:
      throw ShapeError("rank " + std::to_string(shape_.size()) + " tensor has no matrix view");
  }
}

double Tensor::item() const {
  if (values_.size() != 1) throw ShapeError("item() on tensor " + shape_string(shape_));
  return values_[0];
}

std::string shape_string(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

// ---- Var / Gradients / Tape -------------------------------------------------

const Tensor& Var::value() const { return tape().value(index_); }

Tape& Var::tape() const {
  if (tape_ == nullptr) throw StateError("use of an unbound Var");
  return *tape_;
}

const Tensor& Gradients::operator[](Var v) const {
  if (!contains(v)) throw StateError("no gradient recorded for node " + std::to_string(v.index()));
  return grads_[v.index()];
}

bool Gradients::contains(Var v) const { return v.index() < present_.size() && present_[v.index()]; }

void Tape::check_open() const {
  if (consumed_) throw StateError("tape already ran backward(); call reset() before reuse");
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  check_open();
  nodes_.push_back(Node{std::move(value), {}, {}, requires_grad, true});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::vector<Var> inputs, BackwardFn backward) {
  check_open();
  Node node;
  node.value = std::move(value);
  node.inputs.reserve(inputs.size());
  for (const Var& v : inputs) {
    if (v.tape_ != this) throw StateError("input Var belongs to a different tape");
    node.inputs.push_back(v.index_);
    node.requires_grad = node.requires_grad || nodes_[v.index_].requires_grad;
  }
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Gradients Tape::backward(Var loss) {
  check_open();
  if (loss.tape_ != this) throw StateError("loss Var belongs to a different tape");
  if (loss.value().size() != 1) {
    throw ShapeError("backward() needs a scalar loss, got " + shape_string(loss.value().shape()));
  }
  consumed_ = true;

  std::vector<Tensor> grads(nodes_.size());
  std::vector<bool> has(nodes_.size(), false);
  grads[loss.index_] = Tensor::full(nodes_[loss.index_].value.shape(), 1.0);
  has[loss.index_] = true;

  std::vector<const Tensor*> in_values;
  std::vector<Tensor*> in_grads;
  for (std::size_t i = loss.index_ + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!has[i] || node.is_leaf || !node.backward) continue;
    in_values.clear();
    in_grads.clear();
    for (std::size_t in : node.inputs) {
      in_values.push_back(&nodes_[in].value);
      if (nodes_[in].requires_grad) {
        if (!has[in]) {
          grads[in] = Tensor::zeros(nodes_[in].value.shape());
          has[in] = true;
        }
        in_grads.push_back(&grads[in]);
      } else {
        in_grads.push_back(nullptr);
      }
    }
    node.backward(BackwardArgs{node.value, grads[i], in_values, in_grads});
  }

  Gradients out;
  out.present_.assign(nodes_.size(), false);
  out.grads_.resize(nodes_.size());
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].is_leaf && nodes_[i].requires_grad) {
      out.grads_[i] = has[i] ? std::move(grads[i]) : Tensor::zeros(nodes_[i].value.shape());
      out.present_[i] = true;
      ++out.count_;
    }
  }
  return out;
}

void Tape::reset() {
  nodes_.clear();
  consumed_ = false;
}

// ---- dense primitives -------------------------------------------------------

Var matmul(Var a, Var b) {
  Tape& tape = common_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.rows()) {
    throw ShapeError("matmul: " + shape_string(av.shape()) + " x " + shape_string(bv.shape()));
  }
  Tensor out = Tensor::zeros({av.rows(), bv.cols()});
  as_matrix(out).noalias() = as_matrix(av) * as_matrix(bv);
  for (double v : out.values()) {
    if (!std::isfinite(v)) throw NumericError("matmul produced a non-finite value");
  }
  return tape.record(std::move(out), {a, b}, [](const BackwardArgs& args) {
    const auto g = as_matrix(args.out_grad);
    if (Tensor* ga = args.in_grads[0]) {
      as_matrix(*ga).noalias() += g * as_matrix(*args.in_values[1]).transpose();
    }
    if (Tensor* gb = args.in_grads[1]) {
      as_matrix(*gb).noalias() += as_matrix(*args.in_values[0]).transpose() * g;
    }
  });
}

Var transpose(Var a) {
  const Tensor& av = a.value();
  const std::size_t r = av.rows();
  const std::size_t c = av.cols();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
  return a.tape().record(Tensor({c, r}, std::move(out)), {a}, [r, c](const BackwardArgs& args) {
    auto g = args.in_grads[0]->mutable_values();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += args.out_grad[j * r + i];
  });
}

Var reshape(Var a, std::size_t rows, std::size_t cols) {
  const Tensor& av = a.value();
  if (rows * cols != av.size()) {
    throw ShapeError("reshape: " + shape_string(av.shape()) + " to " + std::to_string(rows) + "x" +
                     std::to_string(cols));
  }
  std::vector<double> v(av.values().begin(), av.values().end());
  return a.tape().record(Tensor({rows, cols}, std::move(v)), {a}, [](const BackwardArgs& args) {
    add_into(*args.in_grads[0], args.out_grad.values());
  });
}

Var add(Var a, Var b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double, double, double g, double& dx, double& dy) {
        dx = g;
        dy = g;
      });
}

Var sub(Var a, Var b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double, double, double g, double& dx, double& dy) {
        dx = g;
        dy = -g;
      });
}

Var mul(Var a, Var b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double x, double y, double, double g, double& dx, double& dy) {
        dx = g * y;
        dy = g * x;
      });
}

Var div(Var a, Var b) {
  const Tensor& bv = b.value();
  for (double v : bv.values()) {
    if (v == 0.0) throw DomainError("div: division by zero");
  }
  return binary(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double x, double y, double, double g, double& dx, double& dy) {
        dx = g / y;
        dy = -g * x / (y * y);
      });
}

Var add_scalar(Var a, double s) {
  return unary(
      a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Var scale(Var a, double s) {
  return unary(
      a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Var neg(Var a) { return scale(a, -1.0); }

Var sum(Var a) {
  const Tensor& av = a.value();
  double s = 0.0;
  for (double v : av.values()) s += v;
  return a.tape().record(Tensor::scalar(s), {a}, [](const BackwardArgs& args) {
    const double g = args.out_grad[0];
    for (double& x : args.in_grads[0]->mutable_values()) x += g;
  });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  return scale(sum(a), 1.0 / n);
}

Var sum_rows(Var a) {
  const Tensor& av = a.value();
  const std::size_t r = av.rows();
  const std::size_t c = av.cols();
  std::vector<double> out(r, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i] += av[i * c + j];
  return a.tape().record(Tensor({r, 1}, std::move(out)), {a}, [r, c](const BackwardArgs& args) {
    auto g = args.in_grads[0]->mutable_values();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += args.out_grad[i];
  });
}

Var sum_cols(Var a) {
  const Tensor& av = a.value();
  const std::size_t r = av.rows();
  const std::size_t c = av.cols();
  std::vector<double> out(c, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j] += av[i * c + j];
  return a.tape().record(Tensor({1, c}, std::move(out)), {a}, [r, c](const BackwardArgs& args) {
    auto g = args.in_grads[0]->mutable_values();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += args.out_grad[j];
  });
}

namespace {

void softmax_span(std::span<const double> x, std::span<double> y) {
  const double m = *std::max_element(x.begin(), x.end());
  double z = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    y[i] = std::exp(x[i] - m);
    z += y[i];
  }
  for (double& v : y) v /= z;
}

void softmax_backward_span(std::span<const double> y, std::span<const double> gy,
                           std::span<double> gx) {
  double dot = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) dot += y[i] * gy[i];
  for (std::size_t i = 0; i < y.size(); ++i) gx[i] += y[i] * (gy[i] - dot);
}

}  // namespace

Var softmax_rows(Var a) {
  const Tensor& av = a.value();
  const std::size_t r = av.rows();
  const std::size_t c = av.cols();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    softmax_span(av.values().subspan(i * c, c), std::span(out).subspan(i * c, c));
  }
  return a.tape().record(Tensor(av.shape(), std::move(out)), {a}, [r, c](const BackwardArgs& args) {
    auto g = args.in_grads[0]->mutable_values();
    for (std::size_t i = 0; i < r; ++i) {
      softmax_backward_span(args.out_value.values().subspan(i * c, c),
                            args.out_grad.values().subspan(i * c, c), g.subspan(i * c, c));
    }
  });
}

Var log_softmax_rows(Var a) {
  const Tensor& av = a.value();
  const std::size_t r = av.rows();
  const std::size_t c = av.cols();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    auto x = av.values().subspan(i * c, c);
    const double m = *std::max_element(x.begin(), x.end());
    double z = 0.0;
    for (double v : x) z += std::exp(v - m);
    const double lse = m + std::log(z);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x[j] - lse;
  }
  return a.tape().record(Tensor(av.shape(), std::move(out)), {a}, [r, c](const BackwardArgs& args) {
    auto g = args.in_grads[0]->mutable_values();
    for (std::size_t i = 0; i < r; ++i) {
      double gsum = 0.0;
      for (std::size_t j = 0; j < c; ++j) gsum += args.out_grad[i * c + j];
      for (std::size_t j = 0; j < c; ++j) {
        g[i * c + j] += args.out_grad[i * c + j] - std::exp(args.out_value[i * c + j]) * gsum;
      }
    }
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  Tape& tape = parts[0].tape();
  const std::size_t c = parts[0].value().cols();
  std::vector<double> out;
  std::vector<std::size_t> row_counts;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    if (v.cols() != c) throw ShapeError("concat_rows: column mismatch");
    out.insert(out.end(), v.values().begin(), v.values().end());
    row_counts.push_back(v.rows());
  }
  const std::size_t r = out.size() / c;
  return tape.record(Tensor({r, c}, std::move(out)), std::vector<Var>(parts.begin(), parts.end()),
                     [row_counts, c](const BackwardArgs& args) {
                       std::size_t off = 0;
                       for (std::size_t k = 0; k < row_counts.size(); ++k) {
                         const std::size_t n = row_counts[k] * c;
                         if (Tensor* g = args.in_grads[k]) {
                           add_into(*g, args.out_grad.values().subspan(off, n));
                         }
                         off += n;
                       }
                     });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  Tape& tape = parts[0].tape();
  const std::size_t r = parts[0].value().rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Var& p : parts) {
    if (p.value().rows() != r) throw ShapeError("concat_cols: row mismatch");
    widths.push_back(p.value().cols());
    total += widths.back();
  }
  std::vector<double> out(r * total);
  std::size_t col = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& v = parts[k].value();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < widths[k]; ++j) out[i * total + col + j] = v[i * widths[k] + j];
    col += widths[k];
  }
  return tape.record(Tensor({r, total}, std::move(out)), std::vector<Var>(parts.begin(), parts.end()),
                     [widths, r, total](const BackwardArgs& args) {
                       std::size_t col0 = 0;
                       for (std::size_t k = 0; k < widths.size(); ++k) {
                         if (Tensor* g = args.in_grads[k]) {
                           auto gv = g->mutable_values();
                           for (std::size_t i = 0; i < r; ++i)
                             for (std::size_t j = 0; j < widths[k]; ++j)
                               gv[i * widths[k] + j] += args.out_grad[i * total + col0 + j];
                         }
                         col0 += widths[k];
                       }
                     });
}

// ---- elementwise ------------------------------------------------------------

double softplus_value(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

double sigmoid_value(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Var elementwise(Var x, Fn fn) {
  switch (fn) {
    case Fn::tanh:
      return unary(
          x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
    case Fn::sigmoid:
      return unary(x, sigmoid_value, [](double, double y) { return y * (1.0 - y); });
    case Fn::relu:
      return unary(
          x, [](double v) { return v > 0.0 ? v : 0.0; },
          [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
    case Fn::exp:
      return unary(
          x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
    case Fn::log:
      for (double v : x.value().values()) {
        if (!(v > 0.0)) throw DomainError("log of non-positive value " + std::to_string(v));
      }
      return unary(
          x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
  }
  throw DomainError("unknown elementwise function");
}

Var softplus(Var x) {
  return unary(x, softplus_value, [](double v, double) { return sigmoid_value(v); });
}

Var lgamma(Var x) {
  return unary(x, special::log_gamma, [](double v, double) { return special::digamma(v); });
}

Var digamma(Var x) {
  return unary(x, special::digamma, [](double v, double) { return special::trigamma(v); });
}

Var clamp(Var x, double lo, double hi) {
  if (lo > hi) throw DomainError("clamp: lo > hi");
  return unary(
      x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

Var dropout(Var x, double rate, std::mt19937_64& rng) {
  if (rate < 0.0 || rate >= 1.0) throw DomainError("dropout rate must lie in [0, 1)");
  if (rate == 0.0) return x;
  const double keep = 1.0 - rate;
  std::bernoulli_distribution coin(keep);
  const Tensor& xv = x.value();
  std::vector<double> mask(xv.size());
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    mask[i] = coin(rng) ? 1.0 / keep : 0.0;
    out[i] = xv[i] * mask[i];
  }
  return x.tape().record(Tensor(xv.shape(), std::move(out)), {x},
                         [mask = std::move(mask)](const BackwardArgs& args) {
                           auto g = args.in_grads[0]->mutable_values();
                           for (std::size_t i = 0; i < g.size(); ++i) g[i] += args.out_grad[i] * mask[i];
                         });
}

// ---- segmented ops ----------------------------------------------------------

Var segment_softmax(Var scores, std::span<const std::size_t> offsets) {
  const Tensor& sv = scores.value();
  if (sv.cols() != 1) throw ShapeError("segment_softmax: scores must be a column vector");
  check_offsets(offsets, sv.rows(), "segment_softmax");
  std::vector<std::size_t> off(offsets.begin(), offsets.end());
  std::vector<double> out(sv.size());
  for (std::size_t b = 0; b + 1 < off.size(); ++b) {
    const std::size_t n = off[b + 1] - off[b];
    softmax_span(sv.values().subspan(off[b], n), std::span(out).subspan(off[b], n));
  }
  return scores.tape().record(Tensor(sv.shape(), std::move(out)), {scores},
                              [off](const BackwardArgs& args) {
                                auto g = args.in_grads[0]->mutable_values();
                                for (std::size_t b = 0; b + 1 < off.size(); ++b) {
                                  const std::size_t n = off[b + 1] - off[b];
                                  softmax_backward_span(args.out_value.values().subspan(off[b], n),
                                                        args.out_grad.values().subspan(off[b], n),
                                                        g.subspan(off[b], n));
                                }
                              });
}

Var segment_pool(Var weights, Var rows, std::span<const std::size_t> offsets) {
  Tape& tape = common_tape(weights, rows);
  const Tensor& wv = weights.value();
  const Tensor& hv = rows.value();
  if (wv.cols() != 1 || wv.rows() != hv.rows()) {
    throw ShapeError("segment_pool: weights " + shape_string(wv.shape()) + " vs rows " +
                     shape_string(hv.shape()));
  }
  check_offsets(offsets, hv.rows(), "segment_pool");
  std::vector<std::size_t> off(offsets.begin(), offsets.end());
  const std::size_t segments = off.size() - 1;
  const std::size_t h = hv.cols();
  std::vector<double> out(segments * h, 0.0);
  for (std::size_t b = 0; b < segments; ++b) {
    double* dst = out.data() + b * h;
    for (std::size_t j = off[b]; j < off[b + 1]; ++j) {
      const double w = wv[j];
      const double* src = hv.values().data() + j * h;
      for (std::size_t c = 0; c < h; ++c) dst[c] += w * src[c];
    }
  }
  return tape.record(Tensor({segments, h}, std::move(out)), {weights, rows},
                     [off, h](const BackwardArgs& args) {
                       const Tensor& w = *args.in_values[0];
                       const Tensor& x = *args.in_values[1];
                       Tensor* gw = args.in_grads[0];
                       Tensor* gx = args.in_grads[1];
                       for (std::size_t b = 0; b + 1 < off.size(); ++b) {
                         const double* go = args.out_grad.values().data() + b * h;
                         for (std::size_t j = off[b]; j < off[b + 1]; ++j) {
                           const double* xr = x.values().data() + j * h;
                           if (gw) {
                             double dot = 0.0;
                             for (std::size_t c = 0; c < h; ++c) dot += go[c] * xr[c];
                             gw->mutable_values()[j] += dot;
                           }
                           if (gx) {
                             double* gxr = gx->mutable_values().data() + j * h;
                             for (std::size_t c = 0; c < h; ++c) gxr[c] += w[j] * go[c];
                           }
                         }
                       }
                     });
}

// ---- gradient check ---------------------------------------------------------

double grad_check(const ScalarFunction& f, const std::vector<Tensor>& params, double h) {
  auto evaluate = [&f](const std::vector<Tensor>& ps) {
    Tape tape;
    std::vector<Var> vars;
    vars.reserve(ps.size());
    for (const Tensor& p : ps) vars.push_back(tape.constant(p));
    return f(tape, vars).value().item();
  };

  Tape tape;
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const Tensor& p : params) vars.push_back(tape.parameter(p));
  const Var loss = f(tape, vars);
  const Gradients grads = tape.backward(loss);

  double worst = 0.0;
  std::vector<Tensor> probe = params;
  for (std::size_t k = 0; k < params.size(); ++k) {
    const Tensor& analytic = grads[vars[k]];
    for (std::size_t i = 0; i < params[k].size(); ++i) {
      const double original = params[k][i];
      probe[k].mutable_values()[i] = original + h;
      const double up = evaluate(probe);
      probe[k].mutable_values()[i] = original - h;
      const double down = evaluate(probe);
      probe[k].mutable_values()[i] = original;
      const double cd = (up - down) / (2.0 * h);
      const double a = analytic[i];
      const double err = std::abs(a - cd) / (std::abs(a) + std::abs(cd) + 1e-12);
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace megan::diff
