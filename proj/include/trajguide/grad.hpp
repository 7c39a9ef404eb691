#pragma once

// Reverse-mode automatic differentiation over dense row-major float64 tensors.
//
// A Tape records every operation applied to its Vars. Calling backward() on a
// scalar Var walks the tape in reverse and accumulates exact gradients into
// every node that (transitively) depends on a leaf.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace trajguide::grad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double v) { return Tensor({}, std::vector<double>{v}); }
  static Tensor vector(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor({n}, std::move(v));
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
    return Tensor({rows, cols}, std::move(v));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  std::vector<double>& storage() noexcept { return data_; }
  const std::vector<double>& storage() const noexcept { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * shape_.back() + c]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * shape_.back() + c]; }

  // Value of a single-element tensor.
  double item() const;
  Tensor reshaped(Shape shape) const;

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

class Tape;

// Lightweight handle to a node on a Tape. Copyable; valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
  Tape& tape() const { return *tape_; }
  int id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  // Backward function of a node: receives the gradient w.r.t. the node output
  // (and the output value) and accumulates into its inputs via grad_buffer().
  using Backward = std::function<void(Tape&, const Tensor& grad_out, const Tensor& out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value);
  Var constant(Tensor value);
  Var record(Tensor value, std::initializer_list<Var> inputs, Backward backward);
  Var record(Tensor value, const std::vector<Var>& inputs, Backward backward);

  // Root must hold exactly one element.
  void backward(Var root);

  // Gradient accumulated for v; a zero tensor if v never received gradient.
  Tensor grad(Var v) const;

  Tensor& grad_buffer(int id);
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  const Tensor& value(int id) const { return nodes_[id].value; }
  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Backward backward;
  };

  Var push(Node node);

  std::vector<Node> nodes_;
};

// ---- elementwise binary ops --------------------------------------------------
// Broadcasting: the operands must have equal shapes, or one operand's shape
// must be a trailing suffix of the other's (a single element also broadcasts).
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var minimum(Var a, Var b);  // ties route gradient to a
Var maximum(Var a, Var b);  // ties route gradient to a
Var atan2(Var y, Var x);    // equal shapes only

Var add(Var a, double b);
Var mul(Var a, double b);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }
inline Var operator+(Var a, double b) { return add(a, b); }
inline Var operator-(Var a, double b) { return add(a, -b); }
inline Var operator*(Var a, double b) { return mul(a, b); }
inline Var operator*(double a, Var b) { return mul(b, a); }

// ---- elementwise unary ops ---------------------------------------------------
Var neg(Var a);
Var relu(Var a);  // relu'(0) = 0
Var sin(Var a);
Var cos(Var a);
Var exp(Var a);
Var sqrt(Var a);
Var square(Var a);
Var abs(Var a);  // abs'(0) = 0
Var clamp(Var a, double lo, double hi);

// ---- reductions ---------------------------------------------------------------
Var sum(Var a);
Var mean(Var a);
Var min(Var a);  // gradient goes to the first argmin
Var max(Var a);  // gradient goes to the first argmax
Var sum(Var a, int axis);
Var mean(Var a, int axis);
Var min(Var a, int axis);
Var max(Var a, int axis);

// ---- linear algebra and structure -------------------------------------------
// a: [..., k] with b: [k, n]            -> [..., n]
// a: [B, m, k] with b: [B, k, n]        -> [B, m, n]
// transpose_b reads b as [n, k] / [B, n, k].
Var matmul(Var a, Var b, bool transpose_b = false);

// Softmax over the last axis. With a mask (same shape, nonzero = keep), masked
// entries get probability 0; a fully masked row yields all zeros.
Var softmax(Var a);
Var softmax(Var a, const Tensor& mask);

// Normalizes over the last axis to zero mean and unit variance (no affine).
Var layernorm(Var a, double eps = 1e-5);

// Selects rows along axis 0.
Var gather(Var a, std::span<const std::size_t> indices);
Var gather(Var a, std::initializer_list<std::size_t> indices);

Var concat(const std::vector<Var>& parts, int axis);
Var reshape(Var a, Shape shape);

}  // namespace trajguide::grad
