#pragma once

#include <functional>
#include <memory>
#include <vector>

#include <Eigen/Core>

namespace edge::ag {

using Matrix = Eigen::MatrixXd;

struct Node {
  Matrix value;
  Matrix grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void accumulate(const Matrix& g);
};

/// Reverse-mode differentiable 2-D value. Copies share the underlying node.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Matrix value, bool requires_grad = false);

  const Matrix& value() const { return node_->value; }
  Matrix& mutable_value() { return node_->value; }
  /// Zero matrix of the right shape when nothing has been accumulated.
  Matrix grad() const;
  bool has_grad() const { return node_ && node_->grad.size() > 0; }
  void zero_grad() { node_->grad.resize(0, 0); }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  double item() const { return node_->value(0, 0); }
  bool defined() const { return static_cast<bool>(node_); }

  /// Backpropagates from this 1x1 tensor with seed `scale`.
  void backward(double scale = 1.0) const;

  const std::shared_ptr<Node>& node() const { return node_; }

  /// Builds a result node. Under NoGradGuard or when no parent needs a
  /// gradient the backward closure is dropped.
  static Tensor make(Matrix value, std::vector<Tensor> parents, std::function<void(Node&)> backward);

 private:
  std::shared_ptr<Node> node_;
};

/// Disables graph construction on this thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

Tensor constant(Matrix value);

// elementwise / structural
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
/// a + row, row is 1 x cols broadcast over rows.
Tensor add_row(const Tensor& a, const Tensor& row);
/// a .* row, row is 1 x cols broadcast over rows.
Tensor mul_row(const Tensor& a, const Tensor& row);
/// a .* col, col is rows x 1 broadcast over columns.
Tensor mul_col(const Tensor& a, const Tensor& col);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor slice_cols(const Tensor& a, Eigen::Index start, Eigen::Index count);
Tensor slice_rows(const Tensor& a, Eigen::Index start, Eigen::Index count);
Tensor concat_rows(const Tensor& top, const Tensor& bottom);
/// Repeats a 1 x C row `rows` times.
Tensor broadcast_rows(const Tensor& row, Eigen::Index rows);
/// out[i] = a[i+1] - a[i]
Tensor diff_rows(const Tensor& a);
/// Per-row sum, rows x 1.
Tensor row_sum(const Tensor& a);

// nonlinearities
Tensor square(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
/// Clamps to [lo, hi]; the gradient is zero outside the interval.
Tensor clamp(const Tensor& a, double lo, double hi);

// reductions
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// composites with fused backward
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
/// Multi-head scaled dot-product attention: q (Nq x d), k and v (Nk x d).
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads);
/// Multiplies by a fixed mask (inverted dropout scaling is the caller's job).
Tensor mask_mul(const Tensor& a, const Matrix& mask);

/// Wraps a user-supplied function with an explicit vector-Jacobian product.
Tensor custom(const Tensor& input, Matrix value, std::function<Matrix(const Matrix& grad_out)> vjp);

}  // namespace edge::ag
