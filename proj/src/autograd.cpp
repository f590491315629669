#include "edge/autograd.hpp"

#include <cmath>
#include <unordered_set>

#include "edge/errors.hpp"

namespace edge::ag {

namespace {

thread_local bool g_grad_enabled = true;

void check_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeMismatch(std::string(op) + ": " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) + " vs " +
                        std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
}

Node& parent(Node& n, std::size_t i) { return *n.parents[i]; }

}  // namespace

void Node::accumulate(const Matrix& g) {
  if (!requires_grad) return;
  if (grad.size() == 0)
    grad = g;
  else
    grad += g;
}

Tensor::Tensor(Matrix value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Matrix Tensor::grad() const {
  if (node_->grad.size() == 0) return Matrix::Zero(rows(), cols());
  return node_->grad;
}

Tensor Tensor::make(Matrix value, std::vector<Tensor> parents, std::function<void(Node&)> backward) {
  Tensor out(std::move(value));
  if (!g_grad_enabled) return out;
  bool needs = false;
  for (const auto& p : parents) needs = needs || p.requires_grad();
  if (!needs) return out;
  out.node_->requires_grad = true;
  for (auto& p : parents) out.node_->parents.push_back(p.node_);
  out.node_->backward = std::move(backward);
  return out;
}

void Tensor::backward(double scale) const {
  if (rows() != 1 || cols() != 1) throw ShapeMismatch("backward() needs a scalar");
  if (!node_->requires_grad) return;

  // iterative post-order DFS
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      Node* p = n->parents[idx++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  node_->accumulate(Matrix::Constant(1, 1, scale));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->grad.size() > 0) n->backward(*n);
  }
  // release intermediate gradients; leaves keep theirs
  for (Node* n : order)
    if (!n->parents.empty()) n->grad.resize(0, 0);
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

Tensor constant(Matrix value) { return Tensor(std::move(value), false); }

Tensor add(const Tensor& a, const Tensor& b) {
  check_same(a, b, "add");
  return Tensor::make(a.value() + b.value(), {a, b}, [](Node& n) {
    parent(n, 0).accumulate(n.grad);
    parent(n, 1).accumulate(n.grad);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same(a, b, "sub");
  return Tensor::make(a.value() - b.value(), {a, b}, [](Node& n) {
    parent(n, 0).accumulate(n.grad);
    parent(n, 1).accumulate(-n.grad);
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same(a, b, "mul");
  return Tensor::make(a.value().cwiseProduct(b.value()), {a, b}, [](Node& n) {
    auto& pa = parent(n, 0);
    auto& pb = parent(n, 1);
    if (pa.requires_grad) pa.accumulate(n.grad.cwiseProduct(pb.value));
    if (pb.requires_grad) pb.accumulate(n.grad.cwiseProduct(pa.value));
  });
}

Tensor scale(const Tensor& a, double s) {
  return Tensor::make(a.value() * s, {a}, [s](Node& n) { parent(n, 0).accumulate(n.grad * s); });
}

Tensor add_row(const Tensor& a, const Tensor& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeMismatch("add_row: row must be 1 x cols");
  Matrix v = a.value();
  v.rowwise() += row.value().row(0);
  return Tensor::make(std::move(v), {a, row}, [](Node& n) {
    parent(n, 0).accumulate(n.grad);
    parent(n, 1).accumulate(n.grad.colwise().sum());
  });
}

Tensor mul_row(const Tensor& a, const Tensor& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeMismatch("mul_row: row must be 1 x cols");
  Matrix v = a.value().array().rowwise() * row.value().row(0).array();
  return Tensor::make(std::move(v), {a, row}, [](Node& n) {
    auto& pa = parent(n, 0);
    auto& pr = parent(n, 1);
    if (pa.requires_grad) pa.accumulate(n.grad.array().rowwise() * pr.value.row(0).array());
    if (pr.requires_grad) pr.accumulate(n.grad.cwiseProduct(pa.value).colwise().sum());
  });
}

Tensor mul_col(const Tensor& a, const Tensor& col) {
  if (col.cols() != 1 || col.rows() != a.rows()) throw ShapeMismatch("mul_col: col must be rows x 1");
  Matrix v = a.value().array().colwise() * col.value().col(0).array();
  return Tensor::make(std::move(v), {a, col}, [](Node& n) {
    auto& pa = parent(n, 0);
    auto& pc = parent(n, 1);
    if (pa.requires_grad) pa.accumulate(n.grad.array().colwise() * pc.value.col(0).array());
    if (pc.requires_grad) pc.accumulate(n.grad.cwiseProduct(pa.value).rowwise().sum());
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) throw ShapeMismatch("matmul: inner dimensions differ");
  return Tensor::make(a.value() * b.value(), {a, b}, [](Node& n) {
    auto& pa = parent(n, 0);
    auto& pb = parent(n, 1);
    if (pa.requires_grad) pa.accumulate(n.grad * pb.value.transpose());
    if (pb.requires_grad) pb.accumulate(pa.value.transpose() * n.grad);
  });
}

Tensor slice_cols(const Tensor& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw ShapeMismatch("slice_cols out of range");
  return Tensor::make(a.value().middleCols(start, count), {a}, [start, count](Node& n) {
    auto& p = parent(n, 0);
    Matrix g = Matrix::Zero(p.value.rows(), p.value.cols());
    g.middleCols(start, count) = n.grad;
    p.accumulate(g);
  });
}

Tensor slice_rows(const Tensor& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw ShapeMismatch("slice_rows out of range");
  return Tensor::make(a.value().middleRows(start, count), {a}, [start, count](Node& n) {
    auto& p = parent(n, 0);
    Matrix g = Matrix::Zero(p.value.rows(), p.value.cols());
    g.middleRows(start, count) = n.grad;
    p.accumulate(g);
  });
}

Tensor concat_rows(const Tensor& top, const Tensor& bottom) {
  if (top.cols() != bottom.cols()) throw ShapeMismatch("concat_rows: column counts differ");
  Matrix v(top.rows() + bottom.rows(), top.cols());
  v << top.value(), bottom.value();
  const auto split = top.rows();
  return Tensor::make(std::move(v), {top, bottom}, [split](Node& n) {
    parent(n, 0).accumulate(n.grad.topRows(split));
    parent(n, 1).accumulate(n.grad.bottomRows(n.grad.rows() - split));
  });
}

Tensor broadcast_rows(const Tensor& row, Eigen::Index rows) {
  if (row.rows() != 1) throw ShapeMismatch("broadcast_rows needs a single row");
  return Tensor::make(row.value().replicate(rows, 1), {row},
                      [](Node& n) { parent(n, 0).accumulate(n.grad.colwise().sum()); });
}

Tensor diff_rows(const Tensor& a) {
  if (a.rows() < 2) throw TooShort("diff_rows needs at least 2 rows");
  const auto m = a.rows() - 1;
  return Tensor::make(a.value().bottomRows(m) - a.value().topRows(m), {a}, [m](Node& n) {
    auto& p = parent(n, 0);
    Matrix g = Matrix::Zero(p.value.rows(), p.value.cols());
    g.bottomRows(m) += n.grad;
    g.topRows(m) -= n.grad;
    p.accumulate(g);
  });
}

Tensor row_sum(const Tensor& a) {
  return Tensor::make(a.value().rowwise().sum(), {a}, [](Node& n) {
    auto& p = parent(n, 0);
    p.accumulate(n.grad.replicate(1, p.value.cols()));
  });
}

Tensor square(const Tensor& a) {
  return Tensor::make(a.value().array().square().matrix(), {a}, [](Node& n) {
    auto& p = parent(n, 0);
    p.accumulate(2.0 * n.grad.cwiseProduct(p.value));
  });
}

Tensor silu(const Tensor& a) {
  const Matrix s = (1.0 + (-a.value().array()).exp()).inverse().matrix();
  return Tensor::make(a.value().cwiseProduct(s), {a}, [s](Node& n) {
    auto& p = parent(n, 0);
    const auto sa = s.array();
    p.accumulate((n.grad.array() * (sa * (1.0 + p.value.array() * (1.0 - sa)))).matrix());
  });
}

Tensor gelu(const Tensor& a) {
  static constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double k = 0.044715;
  const auto x = a.value().array();
  const Matrix th = (c * (x + k * x.cube())).tanh().matrix();
  Matrix v = (0.5 * x * (1.0 + th.array())).matrix();
  return Tensor::make(std::move(v), {a}, [th](Node& n) {
    auto& p = parent(n, 0);
    const auto xx = p.value.array();
    const auto t = th.array();
    const auto d = 0.5 * (1.0 + t) + 0.5 * xx * (1.0 - t.square()) * c * (1.0 + 3.0 * k * xx.square());
    p.accumulate((n.grad.array() * d).matrix());
  });
}

Tensor sigmoid(const Tensor& a) {
  Matrix s = (1.0 + (-a.value().array()).exp()).inverse().matrix();
  return Tensor::make(s, {a}, [s](Node& n) {
    parent(n, 0).accumulate((n.grad.array() * s.array() * (1.0 - s.array())).matrix());
  });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  Matrix v = a.value().cwiseMax(lo).cwiseMin(hi);
  return Tensor::make(std::move(v), {a}, [lo, hi](Node& n) {
    auto& p = parent(n, 0);
    const auto inside = (p.value.array() >= lo && p.value.array() <= hi).cast<double>();
    p.accumulate((n.grad.array() * inside).matrix());
  });
}

Tensor sum(const Tensor& a) {
  return Tensor::make(Matrix::Constant(1, 1, a.value().sum()), {a}, [](Node& n) {
    auto& p = parent(n, 0);
    p.accumulate(Matrix::Constant(p.value.rows(), p.value.cols(), n.grad(0, 0)));
  });
}

Tensor mean(const Tensor& a) {
  const double count = static_cast<double>(a.value().size());
  return scale(sum(a), 1.0 / count);
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const auto C = x.cols();
  if (gamma.rows() != 1 || gamma.cols() != C || beta.rows() != 1 || beta.cols() != C)
    throw ShapeMismatch("layer_norm: gamma/beta must be 1 x cols");
  const Eigen::VectorXd mu = x.value().rowwise().mean();
  Matrix centered = x.value().colwise() - mu;
  const Eigen::VectorXd inv_std =
      ((centered.array().square().rowwise().sum() / static_cast<double>(C)) + eps).rsqrt().matrix();
  Matrix xhat = centered.array().colwise() * inv_std.array();
  Matrix y = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() + beta.value().row(0).array();
  return Tensor::make(std::move(y), {x, gamma, beta}, [xhat, inv_std, C](Node& n) {
    auto& px = parent(n, 0);
    auto& pg = parent(n, 1);
    auto& pb = parent(n, 2);
    if (pg.requires_grad) pg.accumulate(n.grad.cwiseProduct(xhat).colwise().sum());
    if (pb.requires_grad) pb.accumulate(n.grad.colwise().sum());
    if (px.requires_grad) {
      const Matrix dxhat = n.grad.array().rowwise() * pg.value.row(0).array();
      const Eigen::VectorXd m1 = dxhat.rowwise().mean();
      const Eigen::VectorXd m2 = dxhat.cwiseProduct(xhat).rowwise().sum() / static_cast<double>(C);
      Matrix dx = dxhat;
      dx.colwise() -= m1;
      dx -= (xhat.array().colwise() * m2.array()).matrix();
      px.accumulate((dx.array().colwise() * inv_std.array()).matrix());
    }
  });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads) {
  const auto d = q.cols();
  if (k.cols() != d || v.cols() != d || k.rows() != v.rows()) throw ShapeMismatch("attention: q/k/v shapes");
  if (heads < 1 || d % heads != 0) throw ShapeMismatch("attention: width not divisible by heads");
  const auto dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  std::vector<Matrix> probs(static_cast<std::size_t>(heads));
  Matrix out(q.rows(), d);
  for (int h = 0; h < heads; ++h) {
    Matrix s = (q.value().middleCols(h * dh, dh) * k.value().middleCols(h * dh, dh).transpose()) * inv_sqrt;
    s.colwise() -= s.rowwise().maxCoeff();
    s = s.array().exp().matrix();
    s.array().colwise() /= s.rowwise().sum().array();
    out.middleCols(h * dh, dh) = s * v.value().middleCols(h * dh, dh);
    probs[static_cast<std::size_t>(h)] = std::move(s);
  }
  return Tensor::make(std::move(out), {q, k, v}, [probs = std::move(probs), heads, dh, inv_sqrt](Node& n) {
    auto& pq = parent(n, 0);
    auto& pk = parent(n, 1);
    auto& pv = parent(n, 2);
    Matrix gq = Matrix::Zero(pq.value.rows(), pq.value.cols());
    Matrix gk = Matrix::Zero(pk.value.rows(), pk.value.cols());
    Matrix gv = Matrix::Zero(pv.value.rows(), pv.value.cols());
    for (int h = 0; h < heads; ++h) {
      const Matrix& P = probs[static_cast<std::size_t>(h)];
      const auto dO = n.grad.middleCols(h * dh, dh);
      gv.middleCols(h * dh, dh) += P.transpose() * dO;
      const Matrix dP = dO * pv.value.middleCols(h * dh, dh).transpose();
      const Eigen::VectorXd inner = dP.cwiseProduct(P).rowwise().sum();
      Matrix dS = P.cwiseProduct(dP.colwise() - inner) * inv_sqrt;
      gq.middleCols(h * dh, dh) += dS * pk.value.middleCols(h * dh, dh);
      gk.middleCols(h * dh, dh) += dS.transpose() * pq.value.middleCols(h * dh, dh);
    }
    pq.accumulate(gq);
    pk.accumulate(gk);
    pv.accumulate(gv);
  });
}

Tensor mask_mul(const Tensor& a, const Matrix& mask) {
  if (mask.rows() != a.rows() || mask.cols() != a.cols()) throw ShapeMismatch("mask_mul: shape");
  return Tensor::make(a.value().cwiseProduct(mask), {a},
                      [mask](Node& n) { parent(n, 0).accumulate(n.grad.cwiseProduct(mask)); });
}

Tensor custom(const Tensor& input, Matrix value, std::function<Matrix(const Matrix&)> vjp) {
  return Tensor::make(std::move(value), {input},
                      [vjp = std::move(vjp)](Node& n) { parent(n, 0).accumulate(vjp(n.grad)); });
}

}  // namespace edge::ag
