#include "trajguide/grad.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace trajguide::grad {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), data_(std::move(values)) {
  if (data_.size() != numel(shape_)) {
    throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                     " does not match shape " + shape_str(shape_));
  }
}

double Tensor::item() const {
  if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (numel(shape) != data_.size()) {
    throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  return Tensor(std::move(shape), data_);
}

const Tensor& Var::value() const { return tape_->value(id_); }

// ---- tape -------------------------------------------------------------------

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::leaf(Tensor value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  return push(std::move(n));
}

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, Backward backward) {
  Node n;
  n.value = std::move(value);
  for (const Var& v : inputs) {
    if (v.tape_ != this) throw std::invalid_argument("operands belong to different tapes");
    n.requires_grad = n.requires_grad || nodes_[v.id_].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  return push(std::move(n));
}

Var Tape::record(Tensor value, const std::vector<Var>& inputs, Backward backward) {
  Node n;
  n.value = std::move(value);
  for (const Var& v : inputs) {
    if (v.tape_ != this) throw std::invalid_argument("operands belong to different tapes");
    n.requires_grad = n.requires_grad || nodes_[v.id_].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  return push(std::move(n));
}

Tensor& Tape::grad_buffer(int id) {
  Node& n = nodes_[id];
  if (n.grad.shape() != n.value.shape() || n.grad.size() != n.value.size()) {
    n.grad = Tensor(n.value.shape(), 0.0);
  }
  return n.grad;
}

void Tape::backward(Var root) {
  if (root.tape_ != this) throw std::invalid_argument("root belongs to a different tape");
  if (nodes_[root.id_].value.size() != 1) {
    throw ShapeError("backward root must be scalar, got shape " +
                     shape_str(nodes_[root.id_].value.shape()));
  }
  for (Node& n : nodes_) n.grad = Tensor();
  grad_buffer(root.id_)[0] = 1.0;
  for (int i = root.id_; i >= 0; --i) {
    Node& n = nodes_[i];
    if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
    n.backward(*this, n.grad, n.value);
  }
}

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_[v.id_];
  if (n.grad.empty() && !n.value.empty()) return Tensor(n.value.shape(), 0.0);
  return n.grad;
}

// ---- helpers ------------------------------------------------------------------

namespace {

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

struct Broadcast {
  Shape out;
  std::size_t na = 0;
  std::size_t nb = 0;
};

Broadcast broadcast(const Tensor& a, const Tensor& b, const char* op) {
  Broadcast r;
  r.na = a.size();
  r.nb = b.size();
  if (a.shape() == b.shape()) {
    r.out = a.shape();
  } else if (b.size() == 1 || is_suffix(b.shape(), a.shape())) {
    r.out = a.shape();
  } else if (a.size() == 1 || is_suffix(a.shape(), b.shape())) {
    r.out = b.shape();
  } else {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  return r;
}

template <class F, class DA, class DB>
Var binary(Var a, Var b, const char* name, F f, DA da, DB db) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Broadcast bc = broadcast(av, bv, name);
  Tensor out(bc.out);
  const std::size_t n = out.size();
  const std::size_t na = bc.na;
  const std::size_t nb = bc.nb;
  for (std::size_t i = 0; i < n; ++i) out[i] = f(av[i % na], bv[i % nb]);
  const int ia = a.id();
  const int ib = b.id();
  return a.tape().record(std::move(out), {a, b},
                         [ia, ib, na, nb, da, db](Tape& t, const Tensor& g, const Tensor& y) {
                           const Tensor& A = t.value(ia);
                           const Tensor& B = t.value(ib);
                           const std::size_t n = g.size();
                           if (t.requires_grad(ia)) {
                             Tensor& ga = t.grad_buffer(ia);
                             for (std::size_t i = 0; i < n; ++i) {
                               ga[i % na] += g[i] * da(A[i % na], B[i % nb], y[i]);
                             }
                           }
                           if (t.requires_grad(ib)) {
                             Tensor& gb = t.grad_buffer(ib);
                             for (std::size_t i = 0; i < n; ++i) {
                               gb[i % nb] += g[i] * db(A[i % na], B[i % nb], y[i]);
                             }
                           }
                         });
}

// df(x, y) is the derivative given input x and output y.
template <class F, class DF>
Var unary(Var a, F f, DF df) {
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  const int ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, df](Tape& t, const Tensor& g, const Tensor& y) {
    const Tensor& A = t.value(ia);
    Tensor& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(A[i], y[i]);
  });
}

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t n = 1;
  std::size_t inner = 1;
  Shape out;
};

AxisSplit split_axis(const Shape& shape, int axis, const char* op) {
  const int rank = static_cast<int>(shape.size());
  const int ax = axis < 0 ? axis + rank : axis;
  if (ax < 0 || ax >= rank) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " +
                     shape_str(shape));
  }
  AxisSplit s;
  for (int i = 0; i < ax; ++i) s.outer *= shape[i];
  s.n = shape[ax];
  for (int i = ax + 1; i < rank; ++i) s.inner *= shape[i];
  for (int i = 0; i < rank; ++i) {
    if (i != ax) s.out.push_back(shape[i]);
  }
  return s;
}

// C (+)= op(A) * op(B); A is [M,K] ([K,M] if ta), B is [K,N] ([N,K] if tb).
void gemm(bool ta, bool tb, std::size_t M, std::size_t N, std::size_t K, const double* A,
          const double* B, double* C) {
  if (!ta && !tb) {
    for (std::size_t i = 0; i < M; ++i) {
      double* c = C + i * N;
      const double* a = A + i * K;
      for (std::size_t k = 0; k < K; ++k) {
        const double av = a[k];
        if (av == 0.0) continue;
        const double* b = B + k * N;
        for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
      }
    }
  } else if (!ta && tb) {
    for (std::size_t i = 0; i < M; ++i) {
      const double* a = A + i * K;
      for (std::size_t j = 0; j < N; ++j) {
        const double* b = B + j * K;
        double acc = 0.0;
        for (std::size_t k = 0; k < K; ++k) acc += a[k] * b[k];
        C[i * N + j] += acc;
      }
    }
  } else if (ta && !tb) {
    for (std::size_t k = 0; k < K; ++k) {
      const double* b = B + k * N;
      for (std::size_t i = 0; i < M; ++i) {
        const double av = A[k * M + i];
        if (av == 0.0) continue;
        double* c = C + i * N;
        for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
      }
    }
  } else {
    for (std::size_t i = 0; i < M; ++i) {
      for (std::size_t j = 0; j < N; ++j) {
        double acc = 0.0;
        for (std::size_t k = 0; k < K; ++k) acc += A[k * M + i] * B[j * K + k];
        C[i * N + j] += acc;
      }
    }
  }
}

}  // namespace

// ---- binary ------------------------------------------------------------------

Var add(Var a, Var b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return 1.0; });
}

Var sub(Var a, Var b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return -1.0; });
}

Var mul(Var a, Var b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double, double y, double) { return y; }, [](double x, double, double) { return x; });
}

Var div(Var a, Var b) {
  return binary(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double, double y, double) { return 1.0 / y; },
      [](double x, double y, double) { return -x / (y * y); });
}

Var minimum(Var a, Var b) {
  return binary(
      a, b, "minimum", [](double x, double y) { return y < x ? y : x; },
      [](double x, double y, double) { return y < x ? 0.0 : 1.0; },
      [](double x, double y, double) { return y < x ? 1.0 : 0.0; });
}

Var maximum(Var a, Var b) {
  return binary(
      a, b, "maximum", [](double x, double y) { return y > x ? y : x; },
      [](double x, double y, double) { return y > x ? 0.0 : 1.0; },
      [](double x, double y, double) { return y > x ? 1.0 : 0.0; });
}

Var atan2(Var y, Var x) {
  if (y.shape() != x.shape()) {
    throw ShapeError("atan2: shape mismatch " + shape_str(y.shape()) + " vs " +
                     shape_str(x.shape()));
  }
  return binary(
      y, x, "atan2", [](double yy, double xx) { return std::atan2(yy, xx); },
      [](double yy, double xx, double) {
        const double r2 = xx * xx + yy * yy;
        return r2 > 0.0 ? xx / r2 : 0.0;
      },
      [](double yy, double xx, double) {
        const double r2 = xx * xx + yy * yy;
        return r2 > 0.0 ? -yy / r2 : 0.0;
      });
}

Var add(Var a, double b) {
  return unary(
      a, [b](double x) { return x + b; }, [](double, double) { return 1.0; });
}

Var mul(Var a, double b) {
  return unary(
      a, [b](double x) { return x * b; }, [b](double, double) { return b; });
}

// ---- unary -------------------------------------------------------------------

Var neg(Var a) {
  return unary(
      a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Var relu(Var a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var sin(Var a) {
  return unary(
      a, [](double x) { return std::sin(x); }, [](double x, double) { return std::cos(x); });
}

Var cos(Var a) {
  return unary(
      a, [](double x) { return std::cos(x); }, [](double x, double) { return -std::sin(x); });
}

Var exp(Var a) {
  return unary(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var sqrt(Var a) {
  return unary(
      a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

Var square(Var a) {
  return unary(
      a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var abs(Var a) {
  return unary(
      a, [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Var clamp(Var a, double lo, double hi) {
  return unary(
      a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

// ---- reductions ----------------------------------------------------------------

Var sum(Var a) {
  const Tensor& av = a.value();
  double s = 0.0;
  for (double v : av.values()) s += v;
  const int ia = a.id();
  return a.tape().record(Tensor::scalar(s), {a}, [ia](Tape& t, const Tensor& g, const Tensor&) {
    Tensor& ga = t.grad_buffer(ia);
    for (double& v : ga.values()) v += g[0];
  });
}

Var mean(Var a) {
  const std::size_t n = a.size();
  if (n == 0) throw ShapeError("mean of empty tensor");
  return mul(sum(a), 1.0 / static_cast<double>(n));
}

namespace {

Var extreme_all(Var a, bool want_max) {
  const Tensor& av = a.value();
  if (av.empty()) throw ShapeError("min/max of empty tensor");
  std::size_t best = 0;
  for (std::size_t i = 1; i < av.size(); ++i) {
    if (want_max ? av[i] > av[best] : av[i] < av[best]) best = i;
  }
  const int ia = a.id();
  return a.tape().record(Tensor::scalar(av[best]), {a},
                         [ia, best](Tape& t, const Tensor& g, const Tensor&) {
                           t.grad_buffer(ia)[best] += g[0];
                         });
}

Var extreme_axis(Var a, int axis, bool want_max) {
  const Tensor& av = a.value();
  AxisSplit s = split_axis(av.shape(), axis, want_max ? "max" : "min");
  if (s.n == 0) throw ShapeError("min/max over empty axis");
  Tensor out(s.out);
  std::vector<std::size_t> arg(out.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      std::size_t best = o * s.n * s.inner + in;
      for (std::size_t k = 1; k < s.n; ++k) {
        const std::size_t idx = (o * s.n + k) * s.inner + in;
        if (want_max ? av[idx] > av[best] : av[idx] < av[best]) best = idx;
      }
      out[o * s.inner + in] = av[best];
      arg[o * s.inner + in] = best;
    }
  }
  const int ia = a.id();
  return a.tape().record(std::move(out), {a},
                         [ia, arg = std::move(arg)](Tape& t, const Tensor& g, const Tensor&) {
                           Tensor& ga = t.grad_buffer(ia);
                           for (std::size_t i = 0; i < g.size(); ++i) ga[arg[i]] += g[i];
                         });
}

}  // namespace

Var min(Var a) { return extreme_all(a, false); }
Var max(Var a) { return extreme_all(a, true); }
Var min(Var a, int axis) { return extreme_axis(a, axis, false); }
Var max(Var a, int axis) { return extreme_axis(a, axis, true); }

Var sum(Var a, int axis) {
  const Tensor& av = a.value();
  AxisSplit s = split_axis(av.shape(), axis, "sum");
  Tensor out(s.out);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t k = 0; k < s.n; ++k) {
      const double* src = av.data() + (o * s.n + k) * s.inner;
      double* dst = out.data() + o * s.inner;
      for (std::size_t in = 0; in < s.inner; ++in) dst[in] += src[in];
    }
  }
  const int ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, s](Tape& t, const Tensor& g, const Tensor&) {
    Tensor& ga = t.grad_buffer(ia);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t k = 0; k < s.n; ++k) {
        double* dst = ga.data() + (o * s.n + k) * s.inner;
        const double* src = g.data() + o * s.inner;
        for (std::size_t in = 0; in < s.inner; ++in) dst[in] += src[in];
      }
    }
  });
}

Var mean(Var a, int axis) {
  AxisSplit s = split_axis(a.shape(), axis, "mean");
  if (s.n == 0) throw ShapeError("mean over empty axis");
  return mul(sum(a, axis), 1.0 / static_cast<double>(s.n));
}

// ---- matmul ----------------------------------------------------------------------

Var matmul(Var a, Var b, bool transpose_b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  auto mismatch = [&]() {
    return ShapeError("matmul: shape mismatch " + shape_str(A.shape()) + " vs " +
                      shape_str(B.shape()) + (transpose_b ? " (transposed)" : ""));
  };
  if (B.rank() == 2) {
    if (A.rank() < 1) throw mismatch();
    const std::size_t k = transpose_b ? B.dim(1) : B.dim(0);
    const std::size_t n = transpose_b ? B.dim(0) : B.dim(1);
    if (A.shape().back() != k) throw mismatch();
    const std::size_t m = A.size() / k;
    Shape out_shape(A.shape().begin(), A.shape().end() - 1);
    out_shape.push_back(n);
    Tensor C(out_shape);
    gemm(false, transpose_b, m, n, k, A.data(), B.data(), C.data());
    const int ia = a.id();
    const int ib = b.id();
    return a.tape().record(
        std::move(C), {a, b}, [ia, ib, m, n, k, transpose_b](Tape& t, const Tensor& g, const Tensor&) {
          const Tensor& Av = t.value(ia);
          const Tensor& Bv = t.value(ib);
          if (t.requires_grad(ia)) {
            gemm(false, !transpose_b, m, k, n, g.data(), Bv.data(), t.grad_buffer(ia).data());
          }
          if (t.requires_grad(ib)) {
            if (!transpose_b) {
              gemm(true, false, k, n, m, Av.data(), g.data(), t.grad_buffer(ib).data());
            } else {
              gemm(true, false, n, k, m, g.data(), Av.data(), t.grad_buffer(ib).data());
            }
          }
        });
  }
  if (B.rank() == 3 && A.rank() == 3 && A.dim(0) == B.dim(0)) {
    const std::size_t batch = A.dim(0);
    const std::size_t m = A.dim(1);
    const std::size_t k = A.dim(2);
    const std::size_t bk = transpose_b ? B.dim(2) : B.dim(1);
    const std::size_t n = transpose_b ? B.dim(1) : B.dim(2);
    if (bk != k) throw mismatch();
    Tensor C({batch, m, n});
    for (std::size_t i = 0; i < batch; ++i) {
      gemm(false, transpose_b, m, n, k, A.data() + i * m * k, B.data() + i * k * n,
           C.data() + i * m * n);
    }
    const int ia = a.id();
    const int ib = b.id();
    return a.tape().record(
        std::move(C), {a, b},
        [ia, ib, batch, m, n, k, transpose_b](Tape& t, const Tensor& g, const Tensor&) {
          const Tensor& Av = t.value(ia);
          const Tensor& Bv = t.value(ib);
          for (std::size_t i = 0; i < batch; ++i) {
            const double* gi = g.data() + i * m * n;
            const double* ai = Av.data() + i * m * k;
            const double* bi = Bv.data() + i * k * n;
            if (t.requires_grad(ia)) {
              gemm(false, !transpose_b, m, k, n, gi, bi, t.grad_buffer(ia).data() + i * m * k);
            }
            if (t.requires_grad(ib)) {
              double* gb = t.grad_buffer(ib).data() + i * k * n;
              if (!transpose_b) {
                gemm(true, false, k, n, m, ai, gi, gb);
              } else {
                gemm(true, false, n, k, m, gi, ai, gb);
              }
            }
          }
        });
  }
  throw mismatch();
}

// ---- softmax / layernorm -----------------------------------------------------------

namespace {

Var softmax_impl(Var a, const Tensor* mask) {
  const Tensor& av = a.value();
  if (av.rank() == 0) throw ShapeError("softmax of a scalar");
  if (mask && mask->shape() != av.shape()) {
    throw ShapeError("softmax: mask shape " + shape_str(mask->shape()) + " vs " +
                     shape_str(av.shape()));
  }
  const std::size_t n = av.shape().back();
  const std::size_t rows = n ? av.size() / n : 0;
  Tensor out(av.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = av.data() + r * n;
    double* y = out.data() + r * n;
    const double* m = mask ? mask->data() + r * n : nullptr;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (!m || m[j] != 0.0) mx = std::max(mx, x[j]);
    }
    if (mx == -std::numeric_limits<double>::infinity()) continue;
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      y[j] = (!m || m[j] != 0.0) ? std::exp(x[j] - mx) : 0.0;
      z += y[j];
    }
    for (std::size_t j = 0; j < n; ++j) y[j] /= z;
  }
  const int ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, n, rows](Tape& t, const Tensor& g, const Tensor& y) {
    Tensor& ga = t.grad_buffer(ia);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* yr = y.data() + r * n;
      const double* gr = g.data() + r * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += yr[j] * gr[j];
      double* dst = ga.data() + r * n;
      for (std::size_t j = 0; j < n; ++j) dst[j] += yr[j] * (gr[j] - dot);
    }
  });
}

}  // namespace

Var softmax(Var a) { return softmax_impl(a, nullptr); }
Var softmax(Var a, const Tensor& mask) { return softmax_impl(a, &mask); }

Var layernorm(Var a, double eps) {
  const Tensor& av = a.value();
  if (av.rank() == 0) throw ShapeError("layernorm of a scalar");
  const std::size_t n = av.shape().back();
  const std::size_t rows = n ? av.size() / n : 0;
  Tensor out(av.shape());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = av.data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += x[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (x[j] - mu) * (x[j] - mu);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    double* y = out.data() + r * n;
    for (std::size_t j = 0; j < n; ++j) y[j] = (x[j] - mu) * is;
  }
  const int ia = a.id();
  return a.tape().record(
      std::move(out), {a},
      [ia, n, rows, inv_std = std::move(inv_std)](Tape& t, const Tensor& g, const Tensor& y) {
        Tensor& ga = t.grad_buffer(ia);
        const double inv_n = 1.0 / static_cast<double>(n);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* yr = y.data() + r * n;
          const double* gr = g.data() + r * n;
          double gm = 0.0;
          double gy = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            gm += gr[j];
            gy += gr[j] * yr[j];
          }
          gm *= inv_n;
          gy *= inv_n;
          double* dst = ga.data() + r * n;
          for (std::size_t j = 0; j < n; ++j) dst[j] += inv_std[r] * (gr[j] - gm - yr[j] * gy);
        }
      });
}

// ---- structure ------------------------------------------------------------------------

Var gather(Var a, std::span<const std::size_t> indices) {
  const Tensor& av = a.value();
  if (av.rank() == 0) throw ShapeError("gather on a scalar");
  const std::size_t rows = av.dim(0);
  const std::size_t row = rows ? av.size() / rows : 0;
  Shape out_shape = av.shape();
  out_shape[0] = indices.size();
  Tensor out(out_shape);
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= rows) {
      throw ShapeError("gather: index " + std::to_string(idx[i]) + " out of range for " +
                       shape_str(av.shape()));
    }
    std::copy_n(av.data() + idx[i] * row, row, out.data() + i * row);
  }
  const int ia = a.id();
  return a.tape().record(std::move(out), {a},
                         [ia, row, idx = std::move(idx)](Tape& t, const Tensor& g, const Tensor&) {
                           Tensor& ga = t.grad_buffer(ia);
                           for (std::size_t i = 0; i < idx.size(); ++i) {
                             double* dst = ga.data() + idx[i] * row;
                             const double* src = g.data() + i * row;
                             for (std::size_t j = 0; j < row; ++j) dst[j] += src[j];
                           }
                         });
}

Var gather(Var a, std::initializer_list<std::size_t> indices) {
  return gather(a, std::span<const std::size_t>(indices.begin(), indices.size()));
}

Var concat(const std::vector<Var>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const Shape& first = parts[0].shape();
  AxisSplit base = split_axis(first, axis, "concat");
  const int rank = static_cast<int>(first.size());
  const int ax = axis < 0 ? axis + rank : axis;
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Var& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (int i = 0; ok && i < rank; ++i) {
      if (i != ax && s[i] != first[i]) ok = false;
    }
    if (!ok) {
      throw ShapeError("concat: shape mismatch " + shape_str(first) + " vs " + shape_str(s));
    }
    widths.push_back(s[ax] * base.inner);
    total += s[ax];
  }
  Shape out_shape = first;
  out_shape[ax] = total;
  Tensor out(out_shape);
  const std::size_t out_row = total * base.inner;
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Tensor& v = parts[p].value();
    offsets.push_back(offset);
    for (std::size_t o = 0; o < base.outer; ++o) {
      std::copy_n(v.data() + o * widths[p], widths[p], out.data() + o * out_row + offset);
    }
    offset += widths[p];
  }
  std::vector<int> ids;
  for (const Var& p : parts) ids.push_back(p.id());
  const std::size_t outer = base.outer;
  return parts[0].tape().record(
      std::move(out), parts,
      [ids, widths, offsets, outer, out_row](Tape& t, const Tensor& g, const Tensor&) {
        for (std::size_t p = 0; p < ids.size(); ++p) {
          if (!t.requires_grad(ids[p])) continue;
          Tensor& gp = t.grad_buffer(ids[p]);
          for (std::size_t o = 0; o < outer; ++o) {
            const double* src = g.data() + o * out_row + offsets[p];
            double* dst = gp.data() + o * widths[p];
            for (std::size_t j = 0; j < widths[p]; ++j) dst[j] += src[j];
          }
        }
      });
}

Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  const int ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia](Tape& t, const Tensor& g, const Tensor&) {
    Tensor& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

}  // namespace trajguide::grad
