#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dal/tensor.hpp"

// Reverse-mode automatic differentiation over dense Tensors.
//
// A graph is built implicitly by calling the free functions below on Vars.
// Leaves are created with `constant` or `parameter`; every op returns a new
// Var that owns references to its parents. Calling `backward(loss)` walks the
// graph in reverse topological order and accumulates d(loss)/d(leaf) into the
// `grad` tensor of every leaf that requires gradients. Leaf gradients are
// never cleared implicitly; call `zero_grad` between optimisation steps.
//
// There is no implicit broadcasting. The only shape-changing "broadcast" is
// the explicit `add_row`, which adds a bias vector to each row of a matrix.
namespace dal::ad {

struct Node;
using Var = std::shared_ptr<Node>;
using BackwardFn = std::function<void(Node&)>;

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  const char* op = "";
  std::vector<Var> parents;
  BackwardFn backward_fn;

  bool is_leaf() const { return !backward_fn; }
  const Shape& shape() const { return value.shape(); }
};

Var constant(Tensor value);
Var parameter(Tensor value, bool requires_grad = true);

// Toggle gradient tracking on a leaf. Only affects graphs built afterwards.
void set_requires_grad(const Var& leaf, bool requires_grad);
void zero_grad(const Var& v);

// Linear algebra.
Var matmul(const Var& a, const Var& b);
Var add_row(const Var& matrix, const Var& row);

// Elementwise.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, double c);
Var sigmoid(const Var& a);
Var tanh(const Var& a);
Var relu(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);

// Reductions and reshaping.
Var sum(const Var& a);
Var sum_n(std::span<const Var> parts);
Var mean_axis(const Var& a);  // [m, d] -> [d], axis 0
Var reshape(const Var& a, Shape shape);
Var concat(std::span<const Var> parts);  // rank-1 parts
Var stack_rows(std::span<const Var> rows);  // rank-1 [d] parts -> [m, d]
Var gather_rows(const Var& table, std::span<const Index> rows);

// Probability ops.
Var softmax(const Var& a);      // rank-1
Var row_softmax(const Var& a);  // rank-2, softmax of each row

inline constexpr double kProbabilityClamp = 1e-12;
Var cross_entropy(const Var& probs, int label);

// -log of the mean over rows of softmax(row)[label], computed in log space
// from logits ([k] or [m, k]). With one row this is the usual softmax cross
// entropy; the gradient never vanishes through a clamp.
Var mixture_nll(const Var& logits, int label);

// Segmented ops. `offsets` has S+1 entries, offsets[0] = 0 and
// offsets[S] = N; segment s spans [offsets[s], offsets[s+1]). Every segment
// must be nonempty.
Var segment_softmax(const Var& scores, std::span<const Index> offsets);  // [N] -> [N]
Var segment_weighted_sum(const Var& weights, const Var& rows,
                         std::span<const Index> offsets);  // [N], [N, d] -> [S, d]
Var segment_mean(const Var& rows, std::span<const Index> offsets);  // [N, d] -> [S, d]

// Accumulate d(loss)/d(leaf) for every reachable leaf with requires_grad.
void backward(const Var& loss);

// Central finite-difference check of backward() (five-point stencil). `f` must rebuild the graph
// from the current values of `params` on every call. Returns the maximum over
// all coordinates of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
double grad_check(const std::function<Var()>& f, std::span<const Var> params, double eps = 1e-5);

}  // namespace dal::ad
