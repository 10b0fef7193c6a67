#pragma once

#include "amoe/tensor.hpp"

#include <cstddef>

// Dense kernels used by the autodiff ops. Two implementations are kept:
// `ref` is a plain serial version used as the test oracle, the default
// namespace holds the OpenMP versions used in production. Parallel
// reductions use a fixed block partition (independent of thread count), so
// results are bitwise reproducible for any OMP_NUM_THREADS.
namespace amoe::kernels {

// Row block used by reductions over the long (samples * patches) axis.
inline constexpr std::size_t kReduceBlock = 256;

// C (+)= A * B
void gemm_nn(const Tensor& a, const Tensor& b, Tensor& c, bool accumulate = false);
// C (+)= A * B^T
void gemm_nt(const Tensor& a, const Tensor& b, Tensor& c, bool accumulate = false);
// C (+)= A^T * B
void gemm_tn(const Tensor& a, const Tensor& b, Tensor& c, bool accumulate = false);

// Factorized linear attention over consecutive row segments of length
// `seg_len`. q and k must already be non-negative (feature-mapped).
// out_i = q_i^T (sum_j k_j v_j^T) / (q_i . sum_j k_j + eps)
// kv (segments*d x dv) and ksum (segments x d) are outputs kept for backward.
void linear_attention_fwd(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t seg_len,
                          double eps, Tensor& out, Tensor& kv, Tensor& ksum);

namespace ref {

void gemm_nn(const Tensor& a, const Tensor& b, Tensor& c, bool accumulate = false);
void gemm_nt(const Tensor& a, const Tensor& b, Tensor& c, bool accumulate = false);
void gemm_tn(const Tensor& a, const Tensor& b, Tensor& c, bool accumulate = false);
void linear_attention_fwd(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t seg_len,
                          double eps, Tensor& out, Tensor& kv, Tensor& ksum);

}  // namespace ref

}  // namespace amoe::kernels
