#pragma once

#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "cfm/matrix.hpp"

namespace cfm {

// Reverse-mode autodiff over a recorded DAG of matrix nodes. Each op
// stores a backward closure that pulls the node's gradient into its
// parents. Graphs are per-example and freed once their leaf gradients
// have been harvested.

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
  Matrix value;
  Matrix grad;  // allocated lazily during backward
  std::vector<NodePtr> parents;
  std::function<void(Node&)> backward;
  bool requires_grad = false;

  Matrix& ensure_grad() {
    if (grad.rows != value.rows || grad.cols != value.cols) grad = Matrix::zeros(value.rows, value.cols);
    return grad;
  }
};

struct Var {
  NodePtr node;

  bool defined() const { return node != nullptr; }
  const Matrix& val() const { return node->value; }
  int rows() const { return node->value.rows; }
  int cols() const { return node->value.cols; }
};

// Thread-local switch: with grads disabled, ops compute values only and
// record no parents, so inference builds throwaway nodes.
bool grad_enabled();
void set_grad_enabled(bool on);

struct NoGradGuard {
  NoGradGuard() : prev_(grad_enabled()) { set_grad_enabled(false); }
  ~NoGradGuard() { set_grad_enabled(prev_); }

 private:
  bool prev_;
};

Var constant(Matrix m);
Var leaf(Matrix m);  // trainable input; grad harvested after backward()

// Runs reverse-mode accumulation from a 1x1 root with seed gradient 1.
void backward(const Var& root);

// ---- differentiable ops -------------------------------------------------

Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var scale(const Var& a, Real s);
Var add_row_bias(const Var& a, const Var& bias);  // bias is 1 x cols
Var gelu(const Var& a);
Var layer_norm(const Var& x, const Var& gain, const Var& bias, Real eps);
Var softmax_rows_node(const Var& a);

// Fused multi-head scaled-dot-product attention over already-projected
// q/k/v (all g x d, d divisible by heads). mask_bias, when present, is a
// g x g additive matrix (0 for visible, -inf for masked). Per-head
// attention probabilities are saved for the backward pass and optionally
// exported through probs_out (heads matrices of g x g).
Var attention_core(const Var& q, const Var& k, const Var& v, int heads, const Matrix* mask_bias,
                   std::vector<Matrix>* probs_out = nullptr);

Var concat_rows(const std::vector<Var>& parts);
Var slice_rows(const Var& a, int r0, int r1);
Var gather_rows(const Var& a, std::vector<int> idx);

// Per-position mean of several row blocks laid over a common row range.
// spans[k] = first destination row of parts[k]; destination row i receives
// the mean of every part row that lands on it (contributions accumulate in
// part order).
Var overlap_mean(const std::vector<Var>& parts, const std::vector<int>& spans, int total_rows);

// Elementwise product with a constant mask (dropout keep-mask / (1-p)).
Var mul_mask(const Var& a, Matrix mask);

// Mean negative log-likelihood of targets[i] at logits row positions[i].
// Returns a 1x1 node.
Var cross_entropy_rows(const Var& logits, const std::vector<int>& positions, const std::vector<int>& targets);

}  // namespace cfm
