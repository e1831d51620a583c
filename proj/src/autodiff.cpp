#include "dal/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace dal::ad {

namespace {

using Matrix = RowMatrix<double>;

Var make(Tensor value, const char* op, std::vector<Var> parents, BackwardFn fn) {
  // Interior gradients are allocated by backward().
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = op;
  node->requires_grad =
      std::any_of(parents.begin(), parents.end(), [](const Var& p) { return p->requires_grad; });
  if (node->requires_grad) {
    node->parents = std::move(parents);
    node->backward_fn = std::move(fn);
  }
  return node;
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a->shape() != b->shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a->shape()) + " vs " +
                     shape_string(b->shape()));
}

void require_rank(const Var& a, Index rank, const char* op) {
  if (a->value.rank() != rank)
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                     shape_string(a->shape()));
}

void check_offsets(std::span<const Index> offsets, Index n, const char* op) {
  if (offsets.size() < 2 || offsets.front() != 0 || offsets.back() != n)
    throw ShapeError(std::string(op) + ": offsets must start at 0 and end at " + std::to_string(n));
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s)
    if (offsets[s + 1] <= offsets[s])
      throw ShapeError(std::string(op) + ": empty or decreasing segment");
}

// Elementwise unary op with derivative expressed through input x and output y.
template <typename Derivative>
Var unary_from(const Var& a, const char* op, Tensor out, Derivative derivative) {
  return make(std::move(out), op, {a}, [derivative](Node& self) {
    auto& x = self.parents[0];
    if (!x->requires_grad) return;
    const auto& xv = x->value.flat();
    const auto& yv = self.value.flat();
    const auto& g = self.grad.flat();
    auto& dx = x->grad.flat();
    for (Index i = 0; i < dx.size(); ++i) dx[i] += g[i] * derivative(xv[i], yv[i]);
  });
}

template <typename Forward, typename Derivative>
Var unary(const Var& a, const char* op, Forward forward, Derivative derivative) {
  Tensor out = Tensor::uninitialized(a->shape());
  out.flat() = a->value.flat().unaryExpr(forward);
  return unary_from(a, op, std::move(out), derivative);
}

}  // namespace

Var constant(Tensor value) {
  auto node = std::make_shared<Node>();
  node->grad = Tensor::zeros_like(value);
  node->value = std::move(value);
  node->op = "constant";
  return node;
}

Var parameter(Tensor value, bool requires_grad) {
  auto node = constant(std::move(value));
  node->op = "parameter";
  node->requires_grad = requires_grad;
  return node;
}

void set_requires_grad(const Var& leaf, bool requires_grad) {
  if (!leaf->is_leaf()) throw ValidationError("set_requires_grad on non-leaf node " + std::string(leaf->op));
  leaf->requires_grad = requires_grad;
}

void zero_grad(const Var& v) { v->grad.set_zero(); }

Var matmul(const Var& a, const Var& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  if (a->value.cols() != b->value.rows())
    throw ShapeError("matmul: inner dims disagree " + shape_string(a->shape()) + " x " +
                     shape_string(b->shape()));
  Tensor out = Tensor::uninitialized(Shape{a->value.rows(), b->value.cols()});
  out.matrix().noalias() = a->value.matrix() * b->value.matrix();
  return make(std::move(out), "matmul", {a, b}, [](Node& self) {
    auto& a = self.parents[0];
    auto& b = self.parents[1];
    const auto g = self.grad.matrix();
    if (a->requires_grad) a->grad.matrix().noalias() += g * b->value.matrix().transpose();
    if (b->requires_grad) b->grad.matrix().noalias() += a->value.matrix().transpose() * g;
  });
}

Var add_row(const Var& matrix, const Var& row) {
  require_rank(matrix, 2, "add_row");
  require_rank(row, 1, "add_row");
  if (row->value.numel() != matrix->value.cols())
    throw ShapeError("add_row: row length " + std::to_string(row->value.numel()) +
                     " != matrix cols " + std::to_string(matrix->value.cols()));
  Tensor out = matrix->value;
  out.matrix().rowwise() += row->value.matrix().row(0);
  return make(std::move(out), "add_row", {matrix, row}, [](Node& self) {
    auto& m = self.parents[0];
    auto& r = self.parents[1];
    if (m->requires_grad) m->grad.flat() += self.grad.flat();
    if (r->requires_grad) r->grad.matrix().row(0) += self.grad.matrix().colwise().sum();
  });
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor out = Tensor::uninitialized(a->shape());
  out.flat() = a->value.flat() + b->value.flat();
  return make(std::move(out), "add", {a, b}, [](Node& self) {
    for (auto& p : self.parents)
      if (p->requires_grad) p->grad.flat() += self.grad.flat();
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor out = Tensor::uninitialized(a->shape());
  out.flat() = a->value.flat() - b->value.flat();
  return make(std::move(out), "sub", {a, b}, [](Node& self) {
    if (self.parents[0]->requires_grad) self.parents[0]->grad.flat() += self.grad.flat();
    if (self.parents[1]->requires_grad) self.parents[1]->grad.flat() -= self.grad.flat();
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor out = Tensor::uninitialized(a->shape());
  out.flat() = a->value.flat().cwiseProduct(b->value.flat());
  return make(std::move(out), "mul", {a, b}, [](Node& self) {
    auto& a = self.parents[0];
    auto& b = self.parents[1];
    if (a->requires_grad) a->grad.flat() += self.grad.flat().cwiseProduct(b->value.flat());
    if (b->requires_grad) b->grad.flat() += self.grad.flat().cwiseProduct(a->value.flat());
  });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var scale(const Var& a, double c) {
  Tensor out = Tensor::uninitialized(a->shape());
  out.flat() = c * a->value.flat();
  return make(std::move(out), "scale", {a}, [c](Node& self) {
    if (self.parents[0]->requires_grad) self.parents[0]->grad.flat() += c * self.grad.flat();
  });
}

Var sigmoid(const Var& a) {
  return unary(
      a, "sigmoid",
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Var tanh(const Var& a) {
  // 1 - 2 / (exp(2x) + 1) runs on Eigen's vectorised exp; libm tanh does not.
  Tensor out = Tensor::uninitialized(a->shape());
  out.flat().array() = 1.0 - 2.0 / ((2.0 * a->value.flat().array()).exp() + 1.0);
  return unary_from(a, "tanh", std::move(out), [](double, double y) { return 1.0 - y * y; });
}

Var relu(const Var& a) {
  return unary(
      a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var exp(const Var& a) {
  return unary(
      a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(const Var& a) {
  if ((a->value.flat().array() <= 0.0).any() || !a->value.all_finite())
    throw DomainError("log: input must be strictly positive and finite");
  return unary(
      a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var sum(const Var& a) {
  return make(Tensor::scalar(a->value.flat().sum()), "sum", {a}, [](Node& self) {
    auto& a = self.parents[0];
    if (a->requires_grad) a->grad.flat().array() += self.grad[0];
  });
}

Var sum_n(std::span<const Var> parts) {
  if (parts.empty()) throw ValidationError("sum_n: empty sequence");
  Tensor out(parts[0]->shape());
  for (const auto& p : parts) {
    require_same_shape(parts[0], p, "sum_n");
    out.flat() += p->value.flat();
  }
  return make(std::move(out), "sum_n", {parts.begin(), parts.end()}, [](Node& self) {
    for (auto& p : self.parents)
      if (p->requires_grad) p->grad.flat() += self.grad.flat();
  });
}

Var mean_axis(const Var& a) {
  require_rank(a, 2, "mean_axis");
  const Index m = a->value.rows();
  Tensor out = Tensor::uninitialized(Shape{a->value.cols()});
  out.matrix() = a->value.matrix().colwise().mean();
  return make(std::move(out), "mean_axis", {a}, [m](Node& self) {
    auto& a = self.parents[0];
    if (!a->requires_grad) return;
    a->grad.matrix().rowwise() += self.grad.matrix().row(0) / static_cast<double>(m);
  });
}

Var reshape(const Var& a, Shape shape) {
  Tensor out = a->value;
  out.reshape(std::move(shape));
  return make(std::move(out), "reshape", {a}, [](Node& self) {
    auto& a = self.parents[0];
    if (a->requires_grad) a->grad.flat() += self.grad.flat();
  });
}

Var concat(std::span<const Var> parts) {
  if (parts.empty()) throw ValidationError("concat: empty sequence");
  Index total = 0;
  for (const auto& p : parts) {
    require_rank(p, 1, "concat");
    total += p->value.numel();
  }
  Tensor out = Tensor::uninitialized(Shape{total});
  Index offset = 0;
  for (const auto& p : parts) {
    out.flat().segment(offset, p->value.numel()) = p->value.flat();
    offset += p->value.numel();
  }
  return make(std::move(out), "concat", {parts.begin(), parts.end()}, [](Node& self) {
    Index offset = 0;
    for (auto& p : self.parents) {
      const Index n = p->value.numel();
      if (p->requires_grad) p->grad.flat() += self.grad.flat().segment(offset, n);
      offset += n;
    }
  });
}

Var stack_rows(std::span<const Var> rows) {
  if (rows.empty()) throw ValidationError("stack_rows: empty sequence");
  const Index d = rows[0]->value.numel();
  for (const auto& r : rows) {
    require_rank(r, 1, "stack_rows");
    require_same_shape(rows[0], r, "stack_rows");
  }
  Tensor out = Tensor::uninitialized(Shape{static_cast<Index>(rows.size()), d});
  for (std::size_t i = 0; i < rows.size(); ++i)
    out.matrix().row(static_cast<Index>(i)) = rows[i]->value.matrix().row(0);
  return make(std::move(out), "stack_rows", {rows.begin(), rows.end()}, [](Node& self) {
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      auto& p = self.parents[i];
      if (p->requires_grad) p->grad.matrix().row(0) += self.grad.matrix().row(static_cast<Index>(i));
    }
  });
}

Var gather_rows(const Var& table, std::span<const Index> rows) {
  require_rank(table, 2, "gather_rows");
  if (rows.empty()) throw ShapeError("gather_rows: no rows requested");
  const Index n_rows = table->value.rows();
  Tensor out = Tensor::uninitialized(Shape{static_cast<Index>(rows.size()), table->value.cols()});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= n_rows)
      throw ValidationError("gather_rows: row " + std::to_string(rows[i]) + " outside table of " +
                            std::to_string(n_rows) + " rows");
    out.matrix().row(static_cast<Index>(i)) = table->value.matrix().row(rows[i]);
  }
  std::vector<Index> ids(rows.begin(), rows.end());
  return make(std::move(out), "gather_rows", {table}, [ids = std::move(ids)](Node& self) {
    auto& t = self.parents[0];
    if (!t->requires_grad) return;
    auto dt = t->grad.matrix();
    const auto g = self.grad.matrix();
    for (std::size_t i = 0; i < ids.size(); ++i) dt.row(ids[i]) += g.row(static_cast<Index>(i));
  });
}

Var softmax(const Var& a) {
  require_rank(a, 1, "softmax");
  const auto& x = a->value.flat();
  Tensor out = Tensor::uninitialized(a->shape());
  out.flat() = (x.array() - x.maxCoeff()).exp();
  out.flat() /= out.flat().sum();
  return make(std::move(out), "softmax", {a}, [](Node& self) {
    auto& a = self.parents[0];
    if (!a->requires_grad) return;
    const auto& y = self.value.flat();
    const auto& g = self.grad.flat();
    const double dot = g.dot(y);
    a->grad.flat().array() += y.array() * (g.array() - dot);
  });
}

Var row_softmax(const Var& a) {
  require_rank(a, 2, "row_softmax");
  Tensor out = Tensor::uninitialized(a->shape());
  auto y = out.matrix();
  const auto x = a->value.matrix();
  for (Index r = 0; r < x.rows(); ++r) {
    y.row(r) = (x.row(r).array() - x.row(r).maxCoeff()).exp();
    y.row(r) /= y.row(r).sum();
  }
  return make(std::move(out), "row_softmax", {a}, [](Node& self) {
    auto& a = self.parents[0];
    if (!a->requires_grad) return;
    const auto y = self.value.matrix();
    const auto g = self.grad.matrix();
    auto dx = a->grad.matrix();
    for (Index r = 0; r < y.rows(); ++r) {
      const double dot = g.row(r).dot(y.row(r));
      dx.row(r).array() += y.row(r).array() * (g.row(r).array() - dot);
    }
  });
}

Var mixture_nll(const Var& logits, int label) {
  if (logits->value.rank() != 1 && logits->value.rank() != 2)
    throw ShapeError("mixture_nll: expected rank 1 or 2 logits");
  const auto z = logits->value.matrix();
  if (label < 0 || label >= z.cols()) throw ValidationError("mixture_nll: invalid label " + std::to_string(label));
  const Index m = z.rows();
  // a_j = log softmax(z_j)[label]
  Eigen::MatrixXd p(m, z.cols());
  Eigen::VectorXd a(m);
  for (Index j = 0; j < m; ++j) {
    const double mx = z.row(j).maxCoeff();
    const double lse = mx + std::log((z.row(j).array() - mx).exp().sum());
    p.row(j) = (z.row(j).array() - lse).exp();
    a[j] = z(j, label) - lse;
  }
  const double amax = a.maxCoeff();
  const double lse_a = amax + std::log((a.array() - amax).exp().sum());
  Eigen::VectorXd w = (a.array() - lse_a).exp();
  const double value = -(lse_a - std::log(static_cast<double>(m)));
  return make(Tensor::scalar(value), "mixture_nll", {logits},
              [label, p = std::move(p), w = std::move(w)](Node& self) {
                auto& x = self.parents[0];
                if (!x->requires_grad) return;
                const double g = self.grad.item();
                auto dz = x->grad.matrix();
                for (Index j = 0; j < p.rows(); ++j) {
                  dz.row(j) += g * w[j] * p.row(j);
                  dz(j, label) -= g * w[j];
                }
              });
}

Var cross_entropy(const Var& probs, int label) {
  require_rank(probs, 1, "cross_entropy");
  if (label < 0 || label >= probs->value.numel())
    throw ValidationError("cross_entropy: invalid label " + std::to_string(label));
  const double p = probs->value[label];
  const double clamped = std::clamp(p, kProbabilityClamp, 1.0 - kProbabilityClamp);
  return make(Tensor::scalar(-std::log(clamped)), "cross_entropy", {probs},
              [label, p, clamped](Node& self) {
                auto& probs = self.parents[0];
                if (!probs->requires_grad) return;
                // The clamp is flat outside [eps, 1 - eps].
                if (p == clamped) probs->grad[label] += -self.grad[0] / p;
              });
}

Var segment_softmax(const Var& scores, std::span<const Index> offsets) {
  require_rank(scores, 1, "segment_softmax");
  check_offsets(offsets, scores->value.numel(), "segment_softmax");
  Tensor out = Tensor::uninitialized(scores->shape());
  const auto& x = scores->value.flat();
  auto& y = out.flat();
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
    const Index b = offsets[s];
    const Index n = offsets[s + 1] - b;
    const double mx = x.segment(b, n).maxCoeff();
    y.segment(b, n) = (x.segment(b, n).array() - mx).exp();
    y.segment(b, n) /= y.segment(b, n).sum();
  }
  std::vector<Index> offs(offsets.begin(), offsets.end());
  return make(std::move(out), "segment_softmax", {scores}, [offs = std::move(offs)](Node& self) {
    auto& a = self.parents[0];
    if (!a->requires_grad) return;
    const auto& y = self.value.flat();
    const auto& g = self.grad.flat();
    auto& dx = a->grad.flat();
    for (std::size_t s = 0; s + 1 < offs.size(); ++s) {
      const Index b = offs[s];
      const Index n = offs[s + 1] - b;
      const double dot = g.segment(b, n).dot(y.segment(b, n));
      dx.segment(b, n).array() += y.segment(b, n).array() * (g.segment(b, n).array() - dot);
    }
  });
}

Var segment_weighted_sum(const Var& weights, const Var& rows, std::span<const Index> offsets) {
  require_rank(weights, 1, "segment_weighted_sum");
  require_rank(rows, 2, "segment_weighted_sum");
  if (weights->value.numel() != rows->value.rows())
    throw ShapeError("segment_weighted_sum: weights and rows disagree");
  check_offsets(offsets, rows->value.rows(), "segment_weighted_sum");
  const Index segments = static_cast<Index>(offsets.size()) - 1;
  Tensor out = Tensor::uninitialized(Shape{segments, rows->value.cols()});
  const auto w = weights->value.flat();
  const auto r = rows->value.matrix();
  auto o = out.matrix();
  for (Index s = 0; s < segments; ++s) {
    const Index b = offsets[s];
    const Index n = offsets[s + 1] - b;
    o.row(s).noalias() = w.segment(b, n).transpose() * r.middleRows(b, n);
  }
  std::vector<Index> offs(offsets.begin(), offsets.end());
  return make(std::move(out), "segment_weighted_sum", {weights, rows},
              [offs = std::move(offs)](Node& self) {
                auto& w = self.parents[0];
                auto& r = self.parents[1];
                const auto g = self.grad.matrix();
                for (std::size_t s = 0; s + 1 < offs.size(); ++s) {
                  const Index b = offs[s];
                  const Index n = offs[s + 1] - b;
                  const auto gs = g.row(static_cast<Index>(s));
                  if (w->requires_grad)
                    w->grad.flat().segment(b, n).noalias() +=
                        r->value.matrix().middleRows(b, n) * gs.transpose();
                  if (r->requires_grad)
                    r->grad.matrix().middleRows(b, n).noalias() +=
                        w->value.flat().segment(b, n) * gs;
                }
              });
}

Var segment_mean(const Var& rows, std::span<const Index> offsets) {
  require_rank(rows, 2, "segment_mean");
  check_offsets(offsets, rows->value.rows(), "segment_mean");
  const Index segments = static_cast<Index>(offsets.size()) - 1;
  Tensor out = Tensor::uninitialized(Shape{segments, rows->value.cols()});
  const auto r = rows->value.matrix();
  for (Index s = 0; s < segments; ++s) {
    const Index b = offsets[s];
    const Index n = offsets[s + 1] - b;
    out.matrix().row(s) = r.middleRows(b, n).colwise().mean();
  }
  std::vector<Index> offs(offsets.begin(), offsets.end());
  return make(std::move(out), "segment_mean", {rows}, [offs = std::move(offs)](Node& self) {
    auto& r = self.parents[0];
    if (!r->requires_grad) return;
    const auto g = self.grad.matrix();
    auto dr = r->grad.matrix();
    for (std::size_t s = 0; s + 1 < offs.size(); ++s) {
      const Index b = offs[s];
      const Index n = offs[s + 1] - b;
      dr.middleRows(b, n).rowwise() += g.row(static_cast<Index>(s)) / static_cast<double>(n);
    }
  });
}

void backward(const Var& loss) {
  if (loss->value.numel() != 1)
    throw ValidationError("backward: loss must be scalar, got shape " + shape_string(loss->shape()));
  if (!loss->requires_grad) return;

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.get(), 0}};
  visited.insert(loss.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Interior gradients are per-pass scratch; leaves accumulate across passes.
  for (Node* n : order)
    if (!n->is_leaf()) n->grad = Tensor::zeros_like(n->value);
  loss->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if (!(*it)->is_leaf()) (*it)->backward_fn(**it);
}

double grad_check(const std::function<Var()>& f, std::span<const Var> params, double eps) {
  if (!(eps > 0.0 && eps <= 1e-2)) throw ValidationError("grad_check: eps must lie in (0, 1e-2]");
  for (const auto& p : params) zero_grad(p);
  const Var loss = f();
  if (!loss->value.all_finite()) throw EvaluationError("grad_check: non-finite loss");
  backward(loss);

  auto evaluate = [&f]() {
    const double v = f()->value.item();
    if (!std::isfinite(v)) throw EvaluationError("grad_check: non-finite loss under perturbation");
    return v;
  };

  double worst = 0.0;
  for (const auto& p : params) {
    if (!p->requires_grad) continue;
    for (Index i = 0; i < p->value.numel(); ++i) {
      const double original = p->value[i];
      auto at = [&](double h) {
        p->value[i] = original + h;
        return evaluate();
      };
      // Five-point central stencil, O(eps^4) truncation.
      const double numeric = (8.0 * (at(eps) - at(-eps)) - (at(2 * eps) - at(-2 * eps))) / (12.0 * eps);
      p->value[i] = original;
      const double analytic = p->grad[i];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(analytic - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace dal::ad
