#include "surgline/autograd.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace surgline::ag {

namespace {

thread_local bool g_grad_enabled = true;

using Parents = std::vector<std::shared_ptr<Node>>;

Var make_result(Matrix value, Parents parents, std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (g_grad_enabled) {
    bool any = false;
    for (const auto& p : parents) any = any || p->requires_grad;
    if (any) {
      node->requires_grad = true;
      node->parents = std::move(parents);
      node->backward = std::move(backward);
    }
  }
  return Var(std::move(node));
}

void require(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(std::string("autograd: ") + what);
}

}  // namespace

void Node::accumulate(const Matrix& g) {
  if (!requires_grad) return;
  if (grad.size() == 0) grad = g;
  else grad += g;
}

Var::Var(Matrix value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

Var constant(Matrix value) { return Var(std::move(value), false); }

Var add(const Var& a, const Var& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "add shape mismatch");
  return make_result(a.value() + b.value(), {a.node(), b.node()}, [](Node& self) {
    self.parents[0]->accumulate(self.grad);
    self.parents[1]->accumulate(self.grad);
  });
}

Var add_row(const Var& x, const Var& row) {
  require(row.rows() == 1 && row.cols() == x.cols(), "add_row shape mismatch");
  Matrix out = x.value();
  out.rowwise() += row.value().row(0);
  return make_result(std::move(out), {x.node(), row.node()}, [](Node& self) {
    self.parents[0]->accumulate(self.grad);
    if (self.parents[1]->requires_grad) self.parents[1]->accumulate(self.grad.colwise().sum());
  });
}

Var scale(const Var& x, double s) {
  return make_result(x.value() * s, {x.node()}, [s](Node& self) { self.parents[0]->accumulate(self.grad * s); });
}

Var matmul(const Var& a, const Var& b) {
  require(a.cols() == b.rows(), "matmul shape mismatch");
  return make_result(a.value() * b.value(), {a.node(), b.node()}, [](Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) pa.accumulate(self.grad * pb.value.transpose());
    if (pb.requires_grad) pb.accumulate(pa.value.transpose() * self.grad);
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  require(a.cols() == b.cols(), "matmul_nt shape mismatch");
  return make_result(a.value() * b.value().transpose(), {a.node(), b.node()}, [](Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) pa.accumulate(self.grad * pb.value);
    if (pb.requires_grad) pb.accumulate(self.grad.transpose() * pa.value);
  });
}

Var linear(const Var& x, const Var& w, const Var* bias) {
  Var y = matmul_nt(x, w);
  return bias ? add_row(y, *bias) : y;
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  require(gamma.rows() == 1 && gamma.cols() == x.cols() && beta.rows() == 1 && beta.cols() == x.cols(),
          "layer_norm parameter shape mismatch");
  const auto n = x.cols();
  Matrix xhat(x.rows(), n);
  Eigen::VectorXd inv_std(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double mean = x.value().row(i).mean();
    const auto centered = (x.value().row(i).array() - mean).matrix();
    const double var = centered.squaredNorm() / static_cast<double>(n);
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = centered * inv_std(i);
  }
  Matrix out = (xhat.array().rowwise() * gamma.value().row(0).array()).matrix();
  out.rowwise() += beta.value().row(0);
  return make_result(std::move(out), {x.node(), gamma.node(), beta.node()},
                     [xhat = std::move(xhat), inv_std = std::move(inv_std), n](Node& self) {
                       auto& px = *self.parents[0];
                       auto& pg = *self.parents[1];
                       auto& pb = *self.parents[2];
                       if (pg.requires_grad) pg.accumulate((self.grad.array() * xhat.array()).colwise().sum().matrix());
                       if (pb.requires_grad) pb.accumulate(self.grad.colwise().sum());
                       if (px.requires_grad) {
                         const Matrix gx = (self.grad.array().rowwise() * pg.value.row(0).array()).matrix();
                         Matrix dx(gx.rows(), gx.cols());
                         for (Eigen::Index i = 0; i < gx.rows(); ++i) {
                           const double mean_g = gx.row(i).mean();
                           const double mean_gx = gx.row(i).dot(xhat.row(i)) / static_cast<double>(n);
                           dx.row(i) = inv_std(i) * (gx.row(i).array() - mean_g - xhat.row(i).array() * mean_gx).matrix();
                         }
                         px.accumulate(dx);
                       }
                     });
}

Var quick_gelu(const Var& x) {
  const Matrix sig = (1.0 / (1.0 + (-1.702 * x.value().array()).exp())).matrix();
  Matrix out = (x.value().array() * sig.array()).matrix();
  return make_result(std::move(out), {x.node()}, [sig](Node& self) {
    const auto& xv = self.parents[0]->value;
    const auto d = sig.array() + 1.702 * xv.array() * sig.array() * (1.0 - sig.array());
    self.parents[0]->accumulate((self.grad.array() * d).matrix());
  });
}

Var softmax_rows(const Var& x, bool causal) {
  require(!causal || x.rows() == x.cols(), "causal softmax needs a square input");
  Matrix p = Matrix::Zero(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const Eigen::Index len = causal ? i + 1 : x.cols();
    const auto row = x.value().row(i).head(len);
    const double mx = row.maxCoeff();
    const auto e = (row.array() - mx).exp();
    p.row(i).head(len) = (e / e.sum()).matrix();
  }
  return make_result(p, {x.node()}, [p](Node& self) {
    // dx = p ⊙ (g - rowsum(g ⊙ p)); masked entries have p = 0.
    const Eigen::VectorXd dots = (self.grad.array() * p.array()).rowwise().sum();
    Matrix dx = (p.array() * (self.grad.array().colwise() - dots.array())).matrix();
    self.parents[0]->accumulate(dx);
  });
}

Var slice_rows(const Var& x, Eigen::Index start, Eigen::Index count) {
  require(start >= 0 && count >= 0 && start + count <= x.rows(), "slice_rows out of range");
  return make_result(x.value().middleRows(start, count), {x.node()}, [start, count](Node& self) {
    auto& px = *self.parents[0];
    Matrix g = Matrix::Zero(px.value.rows(), px.value.cols());
    g.middleRows(start, count) = self.grad;
    px.accumulate(g);
  });
}

Var slice_cols(const Var& x, Eigen::Index start, Eigen::Index count) {
  require(start >= 0 && count >= 0 && start + count <= x.cols(), "slice_cols out of range");
  return make_result(x.value().middleCols(start, count), {x.node()}, [start, count](Node& self) {
    auto& px = *self.parents[0];
    Matrix g = Matrix::Zero(px.value.rows(), px.value.cols());
    g.middleCols(start, count) = self.grad;
    px.accumulate(g);
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_rows of nothing");
  Eigen::Index rows = 0;
  for (const auto& p : parts) {
    require(p.cols() == parts[0].cols(), "concat_rows column mismatch");
    rows += p.rows();
  }
  Matrix out(rows, parts[0].cols());
  Parents parents;
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
    parents.push_back(p.node());
  }
  return make_result(std::move(out), std::move(parents), [](Node& self) {
    Eigen::Index r = 0;
    for (auto& p : self.parents) {
      const auto n = p->value.rows();
      if (p->requires_grad) p->accumulate(self.grad.middleRows(r, n));
      r += n;
    }
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_cols of nothing");
  Eigen::Index cols = 0;
  for (const auto& p : parts) {
    require(p.rows() == parts[0].rows(), "concat_cols row mismatch");
    cols += p.cols();
  }
  Matrix out(parts[0].rows(), cols);
  Parents parents;
  Eigen::Index c = 0;
  for (const auto& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
    parents.push_back(p.node());
  }
  return make_result(std::move(out), std::move(parents), [](Node& self) {
    Eigen::Index c = 0;
    for (auto& p : self.parents) {
      const auto n = p->value.cols();
      if (p->requires_grad) p->accumulate(self.grad.middleCols(c, n));
      c += n;
    }
  });
}

Var mean_rows(const Var& x) {
  require(x.rows() > 0, "mean_rows of empty matrix");
  const auto n = static_cast<double>(x.rows());
  return make_result(x.value().colwise().mean(), {x.node()}, [n](Node& self) {
    auto& px = *self.parents[0];
    px.accumulate(self.grad.replicate(px.value.rows(), 1) / n);
  });
}

Var gather_rows(const Var& table, const std::vector<int>& ids) {
  Matrix out(static_cast<Eigen::Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    require(ids[i] >= 0 && ids[i] < table.rows(), "gather_rows id out of range");
    out.row(static_cast<Eigen::Index>(i)) = table.value().row(ids[i]);
  }
  return make_result(std::move(out), {table.node()}, [ids](Node& self) {
    auto& pt = *self.parents[0];
    Matrix g = Matrix::Zero(pt.value.rows(), pt.value.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) g.row(ids[i]) += self.grad.row(static_cast<Eigen::Index>(i));
    pt.accumulate(g);
  });
}

Var l2_normalize_rows(const Var& x) {
  const Eigen::VectorXd norms = x.value().rowwise().norm();
  for (Eigen::Index i = 0; i < norms.size(); ++i) {
    require(norms(i) > 0.0 && std::isfinite(norms(i)), "cannot normalize a zero or non-finite row");
  }
  const Matrix y = (x.value().array().colwise() / norms.array()).matrix();
  return make_result(y, {x.node()}, [y, norms](Node& self) {
    // d/dx (x/|x|) g = (g - y (y·g)) / |x|
    const Eigen::VectorXd dots = (self.grad.array() * y.array()).rowwise().sum();
    Matrix dx = ((self.grad.array() - y.array().colwise() * dots.array()).colwise() / norms.array()).matrix();
    self.parents[0]->accumulate(dx);
  });
}

Var exp(const Var& x) {
  Matrix y = x.value().array().exp().matrix();
  return make_result(y, {x.node()}, [y](Node& self) {
    self.parents[0]->accumulate((self.grad.array() * y.array()).matrix());
  });
}

Var dot_all(const Var& a, const Var& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "dot_all shape mismatch");
  Matrix out(1, 1);
  out(0, 0) = (a.value().array() * b.value().array()).sum();
  return make_result(std::move(out), {a.node(), b.node()}, [](Node& self) {
    const double g = self.grad(0, 0);
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) pa.accumulate(g * pb.value);
    if (pb.requires_grad) pb.accumulate(g * pa.value);
  });
}

void backward(const std::vector<std::pair<Var, Matrix>>& seeds) {
  // Iterative post-order DFS gives a topological order of the reachable graph.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  for (const auto& [root, _] : seeds) {
    Node* r = root.node().get();
    if (!r || !r->requires_grad || visited.count(r)) continue;
    visited.insert(r);
    stack.emplace_back(r, 0);
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        Node* p = node->parents[next++].get();
        if (p->requires_grad && !visited.count(p)) {
          visited.insert(p);
          stack.emplace_back(p, 0);
        }
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
  }
  for (const auto& [root, g] : seeds) {
    require(g.rows() == root.rows() && g.cols() == root.cols(), "seed gradient shape mismatch");
    root.node()->accumulate(g);
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->grad.size() != 0) n->backward(*n);
  }
  // Intermediate gradients are no longer needed; leaves keep theirs.
  for (Node* n : order) {
    if (n->backward) n->grad.resize(0, 0);
  }
}

}  // namespace surgline::ag
