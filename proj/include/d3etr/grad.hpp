#pragma once

// Reverse-mode differentiation over dense row-major arrays.
//
// A DiffArray is a cheap handle to a shared node. Nodes created from inputs
// that require gradients record their inputs and a backward closure; nodes
// built only from constants carry no history, so frozen-model forward passes
// build no graph at all.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace d3etr::ad {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

class GradError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first touched; logically zero
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;
  bool requires_grad = false;
  const char* op = "leaf";

  std::vector<double>& grad_buffer();
};

class DiffArray {
 public:
  DiffArray() = default;

  static DiffArray constant(Shape shape, std::vector<double> values);
  static DiffArray parameter(Shape shape, std::vector<double> values);
  static DiffArray zeros(Shape shape, bool requires_grad = false);
  static DiffArray scalar(double v);

  // Used by op implementations: wraps a freshly computed value and records
  // history only when some input requires gradients.
  static DiffArray from_op(const char* op, Shape shape, std::vector<double> values,
                           std::vector<DiffArray> inputs,
                           std::function<void(Node&)> backward);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  std::size_t rows() const;
  std::size_t cols() const;
  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return !node_->backward; }
  const char* op() const { return node_->op; }

  std::span<const double> values() const { return node_->value; }
  std::span<double> mutable_values() { return node_->value; }
  double item() const;
  double at(std::size_t i) const { return node_->value[i]; }
  double at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }

  // Always has size() entries; zero until backward() reaches this array.
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  // Same values, no history, no gradient flow.
  DiffArray detach() const;
  DiffArray clone() const;

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  explicit DiffArray(std::shared_ptr<Node> n) : node_(std::move(n)) {}
  std::shared_ptr<Node> node_;
};

// Accumulates d(loss)/d(x) into every ancestor that requires gradients.
// Interior gradients are recomputed on each call; leaf gradients accumulate.
void backward(const DiffArray& loss);

// ---- elementwise and broadcasting arithmetic --------------------------------
// Binary ops accept equal shapes, a scalar right-hand side, or for rank-2
// left operands a [1,n] / [n] row or an [m,1] column on the right.
DiffArray add(const DiffArray& a, const DiffArray& b);
DiffArray sub(const DiffArray& a, const DiffArray& b);
DiffArray mul(const DiffArray& a, const DiffArray& b);
DiffArray div(const DiffArray& a, const DiffArray& b);
// a / b where b != 0, exactly 0 (with zero gradient) where b == 0.
DiffArray safe_div(const DiffArray& a, const DiffArray& b);
DiffArray minimum(const DiffArray& a, const DiffArray& b);
DiffArray maximum(const DiffArray& a, const DiffArray& b);

DiffArray scale(const DiffArray& a, double s);
DiffArray add_scalar(const DiffArray& a, double s);
DiffArray neg(const DiffArray& a);
DiffArray exp(const DiffArray& a);
DiffArray log(const DiffArray& a);
DiffArray sigmoid(const DiffArray& a);
DiffArray relu(const DiffArray& a);
DiffArray abs(const DiffArray& a);
DiffArray clamp(const DiffArray& a, double lo, double hi);

// ---- linear algebra ---------------------------------------------------------
DiffArray matmul(const DiffArray& a, const DiffArray& b);     // [m,k]x[k,n]
DiffArray matmul_nt(const DiffArray& a, const DiffArray& b);  // [m,k]x[n,k]^T

// ---- normalization ----------------------------------------------------------
DiffArray softmax(const DiffArray& x, int axis = -1);
// Softmax over the last axis of a rank-2 array; mask[r*cols+c] == 0 forces
// weight exactly 0. A row with no allowed entry is an error.
DiffArray masked_softmax(const DiffArray& x, std::span<const std::uint8_t> mask);
// Normalizes the last axis, then applies per-feature gamma/beta ([n] or [1,n]).
DiffArray layer_norm(const DiffArray& x, const DiffArray& gamma, const DiffArray& beta,
                     double eps = 1e-5);

// ---- structure --------------------------------------------------------------
DiffArray concat(const std::vector<DiffArray>& parts, int axis);
// Selects entries of a rank-2 array along axis 0 (rows) or 1 (columns).
DiffArray gather(const DiffArray& x, int axis, std::span<const std::size_t> index);
DiffArray slice_cols(const DiffArray& x, std::size_t begin, std::size_t end);
DiffArray slice_rows(const DiffArray& x, std::size_t begin, std::size_t end);
DiffArray reshape(const DiffArray& x, Shape shape);

// ---- reductions -------------------------------------------------------------
DiffArray sum(const DiffArray& x);
DiffArray mean(const DiffArray& x);
DiffArray max(const DiffArray& x);
DiffArray sum_axis(const DiffArray& x, int axis);  // keeps the reduced axis as 1
DiffArray mse(const DiffArray& a, const DiffArray& b);

}  // namespace d3etr::ad
