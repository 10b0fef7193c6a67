#pragma once

#include "amoe/tensor.hpp"

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

// Minimal reverse-mode automatic differentiation over row-major matrices.
// Ops record closures on the nodes they create; backward() walks the graph
// in reverse topological order. Leaf parameters accumulate into `grad`.
namespace amoe::ad {

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  Tensor grad;  // allocated lazily, same shape as value
  bool requires_grad = false;
  std::vector<Var> parents;
  std::function<void(Node&)> backward_fn;

  Tensor& grad_buffer();  // zero-initialized on first touch
};

Var constant(Tensor t);
Var parameter(Tensor t);

// Runs reverse-mode accumulation from a 1x1 root.
void backward(const Var& root);

// Shapes: linear(x [n,in], w [in,out], bias [1,out] or null) -> [n,out]
Var matmul(const Var& a, const Var& b);
Var matmul_nt(const Var& a, const Var& b);
Var linear(const Var& x, const Var& w, const Var& bias);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
// a [n,m] + row [1,m] broadcast over rows
Var add_row(const Var& a, const Var& row);

Var gelu(const Var& x);
Var elu_plus_one(const Var& x);
Var clamp(const Var& x, double lo, double hi);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);

// q, k non-negative; consecutive blocks of seg_len rows form independent sequences.
Var linear_attention(const Var& q, const Var& k, const Var& v, std::size_t seg_len, double eps = 1e-6);

// out row r, block b = x row table[r*blocks+b] (or zeros when the index is -1).
Var gather_rows(const Var& x, std::vector<int> table, std::size_t blocks);

// offsets has S+1 entries; output row s = mean of rows [offsets[s], offsets[s+1]).
Var segment_mean(const Var& x, std::vector<std::size_t> offsets);
Var segment_mean(const Var& x, std::size_t seg_len);

// Per-row 1 - cos(a_i, b_i) with norms guarded by eps. [n,1]
Var row_cosine_distance(const Var& a, const Var& b, double eps = 1e-8);
// Per-row squared Euclidean distance. [n,1]
Var row_sq_dist(const Var& a, const Var& b);

Var sum(const Var& x);
Var mean(const Var& x);
Var sum_squares(const Var& x);
Var col_mean(const Var& x);

// Restricted softmax per row over `selected[r]`; zeros elsewhere.
Var topk_softmax(const Var& logits, const std::vector<std::vector<int>>& selected);

// Places column vectors [n,1] into an [n, cols.size()] matrix; entries with
// keep[c][r] == false are constant zero and receive no gradient.
Var assemble_columns(const std::vector<Var>& cols, const std::vector<std::vector<bool>>& keep);

// Value: sum_j max(counts_j - capacity, 0)^2. Backward substitutes the soft
// count sum_b softmax(logits_b)_j for counts_j (straight-through).
Var load_loss_st(const Var& logits, const std::vector<int>& counts, double capacity);

// Per-row Gaussian log density of z under N(mu, exp(logvar)). [n,1]
Var gaussian_loglik(const Var& z, const Var& mu, const Var& logvar);

inline Var detach(const Var& v) { return constant(v->value); }
inline double scalar(const Var& v) { return v->value.data.at(0); }

}  // namespace amoe::ad
