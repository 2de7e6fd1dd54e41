#pragma once

#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace surgline::ag {

using Matrix = Eigen::MatrixXd;

/// Graph node. Operation results keep their inputs alive through `parents`
/// for as long as the result is reachable.
struct Node {
  Matrix value;
  Matrix grad;  // empty until a gradient arrives
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void accumulate(const Matrix& g);
};

/// Handle to a graph node. Copies share the node.
class Var {
 public:
  Var() = default;
  explicit Var(Matrix value, bool requires_grad = false);
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Matrix& value() const { return node_->value; }
  Matrix& mutable_value() { return node_->value; }
  const Matrix& grad() const { return node_->grad; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  void zero_grad() { node_->grad.resize(0, 0); }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Disables graph recording on the current thread while alive.
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

Var constant(Matrix value);

Var add(const Var& a, const Var& b);
/// x (R x C) plus a 1 x C row broadcast over rows.
Var add_row(const Var& x, const Var& row);
Var scale(const Var& x, double s);
Var matmul(const Var& a, const Var& b);
/// a * b^T.
Var matmul_nt(const Var& a, const Var& b);
/// x * w^T + bias, with w stored (out x in) and bias 1 x out (optional).
Var linear(const Var& x, const Var& w, const Var* bias = nullptr);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
/// x * sigmoid(1.702 x).
Var quick_gelu(const Var& x);
/// Row softmax; with `causal`, entries j > i are excluded.
Var softmax_rows(const Var& x, bool causal = false);
Var slice_rows(const Var& x, Eigen::Index start, Eigen::Index count);
Var slice_cols(const Var& x, Eigen::Index start, Eigen::Index count);
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
Var mean_rows(const Var& x);
Var gather_rows(const Var& table, const std::vector<int>& ids);
Var l2_normalize_rows(const Var& x);
Var exp(const Var& x);
/// Sum of all entries of a ⊙ b (1 x 1).
Var dot_all(const Var& a, const Var& b);

/// Reverse pass seeded with dL/d(root) for each (root, gradient) pair.
void backward(const std::vector<std::pair<Var, Matrix>>& seeds);

}  // namespace surgline::ag
