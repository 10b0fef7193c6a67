#include "amoe/kernels.hpp"

#include <algorithm>
#include <cstring>
#include <stdexcept>

namespace amoe::kernels {

namespace {

void check_nn(const Tensor& a, const Tensor& b, const Tensor& c, bool accumulate) {
  if (a.cols != b.rows) throw std::invalid_argument("gemm: inner dims " + a.shape_str() + " * " + b.shape_str());
  if (accumulate && (c.rows != a.rows || c.cols != b.cols))
    throw std::invalid_argument("gemm: accumulate target has shape " + c.shape_str());
}

void prepare(Tensor& c, std::size_t rows, std::size_t cols, bool accumulate) {
  if (!accumulate) {
    c.rows = rows;
    c.cols = cols;
    c.data.assign(rows * cols, 0.0);
  }
}

Tensor transpose(const Tensor& b) {
  Tensor t(b.cols, b.rows);
  for (std::size_t i = 0; i < b.rows; ++i)
    for (std::size_t j = 0; j < b.cols; ++j) t.data[j * b.rows + i] = b.data[i * b.cols + j];
  return t;
}

// c_row += sum_k a_row[k] * b[k, :]
inline void axpy_rows(const double* __restrict a_row, const double* __restrict b, double* __restrict c_row,
                      std::size_t inner, std::size_t n) {
  for (std::size_t k = 0; k < inner; ++k) {
    const double s = a_row[k];
    if (s == 0.0) continue;
    const double* __restrict b_row = b + k * n;
    for (std::size_t j = 0; j < n; ++j) c_row[j] += s * b_row[j];
  }
}

// c_row[j0:] += sum_k a_row[k] * b[k, j0:]
inline void axpy_cols(const double* __restrict a_row, const double* __restrict b, double* __restrict c_row,
                      std::size_t inner, std::size_t n, std::size_t j0) {
  for (std::size_t k = 0; k < inner; ++k) {
    const double s = a_row[k];
    const double* __restrict b_row = b + k * n;
    for (std::size_t j = j0; j < n; ++j) c_row[j] += s * b_row[j];
  }
}

constexpr std::size_t kTileRows = 4;
constexpr std::size_t kTileCols = 8;

// Four doubles; GCC/Clang lower this to one AVX register or two SSE registers.
typedef double v4d __attribute__((vector_size(32)));

inline v4d load4(const double* p) {
  v4d v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

inline void add_store4(double* p, v4d v) {
  v += load4(p);
  std::memcpy(p, &v, sizeof v);
}

// C tile (4 x 8) += A (4 x inner, row stride lda) * B (inner x 8, row stride ldb).
inline void tile_nn(const double* __restrict a, std::size_t lda, const double* __restrict b, std::size_t ldb,
                    double* __restrict c, std::size_t ldc, std::size_t inner) {
  v4d c00{}, c01{}, c10{}, c11{}, c20{}, c21{}, c30{}, c31{};
  for (std::size_t k = 0; k < inner; ++k) {
    const v4d b0 = load4(b + k * ldb), b1 = load4(b + k * ldb + 4);
    const double s0 = a[k], s1 = a[lda + k], s2 = a[2 * lda + k], s3 = a[3 * lda + k];
    c00 += s0 * b0; c01 += s0 * b1;
    c10 += s1 * b0; c11 += s1 * b1;
    c20 += s2 * b0; c21 += s2 * b1;
    c30 += s3 * b0; c31 += s3 * b1;
  }
  add_store4(c, c00); add_store4(c + 4, c01);
  add_store4(c + ldc, c10); add_store4(c + ldc + 4, c11);
  add_store4(c + 2 * ldc, c20); add_store4(c + 2 * ldc + 4, c21);
  add_store4(c + 3 * ldc, c30); add_store4(c + 3 * ldc + 4, c31);
}

// P tile (4 x 8) += A^T (4 x rows) * B (rows x 8); a points at A[0, k0], b at B[0, j0].
inline void tile_tn(const double* __restrict a, std::size_t lda, const double* __restrict b, std::size_t ldb,
                    double* __restrict p, std::size_t ldp, std::size_t rows) {
  v4d c00{}, c01{}, c10{}, c11{}, c20{}, c21{}, c30{}, c31{};
  for (std::size_t i = 0; i < rows; ++i) {
    const v4d b0 = load4(b + i * ldb), b1 = load4(b + i * ldb + 4);
    const double* ai = a + i * lda;
    c00 += ai[0] * b0; c01 += ai[0] * b1;
    c10 += ai[1] * b0; c11 += ai[1] * b1;
    c20 += ai[2] * b0; c21 += ai[2] * b1;
    c30 += ai[3] * b0; c31 += ai[3] * b1;
  }
  add_store4(p, c00); add_store4(p + 4, c01);
  add_store4(p + ldp, c10); add_store4(p + ldp + 4, c11);
  add_store4(p + 2 * ldp, c20); add_store4(p + 2 * ldp + 4, c21);
  add_store4(p + 3 * ldp, c30); add_store4(p + 3 * ldp + 4, c31);
}

}  // namespace

void gemm_nn(const Tensor& a, const Tensor& b, Tensor& c, bool accumulate) {
  check_nn(a, b, c, accumulate);
  prepare(c, a.rows, b.cols, accumulate);
  const std::size_t m = a.rows, inner = a.cols, n = b.cols;
  const double* ad = a.data.data();
  const double* bd = b.data.data();
  double* cd = c.data.data();
  const std::size_t row_blocks = (m + kTileRows - 1) / kTileRows;
#pragma omp parallel for schedule(static) if (m * inner * n > 32768)
  for (std::ptrdiff_t rb = 0; rb < static_cast<std::ptrdiff_t>(row_blocks); ++rb) {
    const std::size_t i0 = static_cast<std::size_t>(rb) * kTileRows;
    if (i0 + kTileRows <= m) {
      std::size_t j0 = 0;
      for (; j0 + kTileCols <= n; j0 += kTileCols) tile_nn(ad + i0 * inner, inner, bd + j0, n, cd + i0 * n + j0, n, inner);
      for (std::size_t i = i0; i < i0 + kTileRows; ++i) axpy_cols(ad + i * inner, bd, cd + i * n, inner, n, j0);
    } else {
      for (std::size_t i = i0; i < m; ++i) axpy_cols(ad + i * inner, bd, cd + i * n, inner, n, 0);
    }
  }
}

void gemm_nt(const Tensor& a, const Tensor& b, Tensor& c, bool accumulate) {
  if (a.cols != b.cols) throw std::invalid_argument("gemm_nt: inner dims " + a.shape_str() + " * " + b.shape_str() + "^T");
  gemm_nn(a, transpose(b), c, accumulate);
}

void gemm_tn(const Tensor& a, const Tensor& b, Tensor& c, bool accumulate) {
  if (a.rows != b.rows) throw std::invalid_argument("gemm_tn: inner dims " + a.shape_str() + "^T * " + b.shape_str());
  if (accumulate && (c.rows != a.cols || c.cols != b.cols))
    throw std::invalid_argument("gemm_tn: accumulate target has shape " + c.shape_str());
  const std::size_t m = a.rows, kdim = a.cols, n = b.cols;
  const std::size_t nblocks = std::max<std::size_t>(1, (m + kReduceBlock - 1) / kReduceBlock);
  const std::size_t out_size = kdim * n;
  std::vector<double> partial(nblocks * out_size, 0.0);
  const double* ad = a.data.data();
  const double* bd = b.data.data();
#pragma omp parallel for schedule(static) if (nblocks > 1 && m * kdim * n > 32768)
  for (std::ptrdiff_t blk = 0; blk < static_cast<std::ptrdiff_t>(nblocks); ++blk) {
    double* __restrict p = partial.data() + blk * out_size;
    const std::size_t lo = blk * kReduceBlock, hi = std::min(m, lo + kReduceBlock);
    std::size_t k0 = 0;
    for (; k0 + kTileRows <= kdim; k0 += kTileRows) {
      std::size_t j0 = 0;
      for (; j0 + kTileCols <= n; j0 += kTileCols) tile_tn(ad + lo * kdim + k0, kdim, bd + lo * n + j0, n, p + k0 * n + j0, n, hi - lo);
      for (std::size_t i = lo; i < hi; ++i)
        for (std::size_t k = k0; k < k0 + kTileRows; ++k)
          for (std::size_t j = j0; j < n; ++j) p[k * n + j] += ad[i * kdim + k] * bd[i * n + j];
    }
    for (std::size_t i = lo; i < hi; ++i) {
      const double* __restrict a_row = ad + i * kdim;
      const double* __restrict b_row = bd + i * n;
      for (std::size_t k = k0; k < kdim; ++k) {
        const double s = a_row[k];
        double* __restrict p_row = p + k * n;
        for (std::size_t j = 0; j < n; ++j) p_row[j] += s * b_row[j];
      }
    }
  }
  prepare(c, kdim, n, accumulate);
  for (std::size_t blk = 0; blk < nblocks; ++blk) {
    const double* p = partial.data() + blk * out_size;
    for (std::size_t idx = 0; idx < out_size; ++idx) c.data[idx] += p[idx];
  }
}

void linear_attention_fwd(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t seg_len, double eps,
                          Tensor& out, Tensor& kv, Tensor& ksum) {
  if (!q.same_shape(k) || q.rows != v.rows || seg_len == 0 || q.rows % seg_len != 0)
    throw std::invalid_argument("linear_attention: shape mismatch");
  const std::size_t d = q.cols, dv = v.cols, segs = q.rows / seg_len;
  out = Tensor(q.rows, dv);
  kv = Tensor(segs * d, dv);
  ksum = Tensor(segs, d);
#pragma omp parallel for schedule(static) if (segs > 1)
  for (std::ptrdiff_t s = 0; s < static_cast<std::ptrdiff_t>(segs); ++s) {
    double* __restrict kvs = kv.data.data() + s * d * dv;
    double* __restrict ks = ksum.data.data() + s * d;
    const std::size_t base = s * seg_len;
    for (std::size_t j = base; j < base + seg_len; ++j) {
      const double* __restrict kj = k.data.data() + j * d;
      const double* __restrict vj = v.data.data() + j * dv;
      for (std::size_t a = 0; a < d; ++a) {
        ks[a] += kj[a];
        const double ka = kj[a];
        double* __restrict kv_row = kvs + a * dv;
        for (std::size_t e = 0; e < dv; ++e) kv_row[e] += ka * vj[e];
      }
    }
    for (std::size_t i = base; i < base + seg_len; ++i) {
      const double* __restrict qi = q.data.data() + i * d;
      double* __restrict oi = out.data.data() + i * dv;
      double den = 0.0;
      for (std::size_t a = 0; a < d; ++a) den += qi[a] * ks[a];
      axpy_rows(qi, kvs, oi, d, dv);
      const double inv = 1.0 / (den + eps);
      for (std::size_t e = 0; e < dv; ++e) oi[e] *= inv;
    }
  }
}

namespace ref {

void gemm_nn(const Tensor& a, const Tensor& b, Tensor& c, bool accumulate) {
  check_nn(a, b, c, accumulate);
  prepare(c, a.rows, b.cols, accumulate);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < b.cols; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols; ++k) s += a(i, k) * b(k, j);
      c(i, j) += s;
    }
}

void gemm_nt(const Tensor& a, const Tensor& b, Tensor& c, bool accumulate) {
  if (a.cols != b.cols) throw std::invalid_argument("gemm_nt: inner dims");
  prepare(c, a.rows, b.rows, accumulate);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < b.rows; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols; ++k) s += a(i, k) * b(j, k);
      c(i, j) += s;
    }
}

void gemm_tn(const Tensor& a, const Tensor& b, Tensor& c, bool accumulate) {
  if (a.rows != b.rows) throw std::invalid_argument("gemm_tn: inner dims");
  prepare(c, a.cols, b.cols, accumulate);
  for (std::size_t i = 0; i < a.cols; ++i)
    for (std::size_t j = 0; j < b.cols; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.rows; ++k) s += a(k, i) * b(k, j);
      c(i, j) += s;
    }
}

void linear_attention_fwd(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t seg_len, double eps,
                          Tensor& out, Tensor& kv, Tensor& ksum) {
  if (!q.same_shape(k) || q.rows != v.rows || seg_len == 0 || q.rows % seg_len != 0)
    throw std::invalid_argument("linear_attention: shape mismatch");
  const std::size_t d = q.cols, dv = v.cols, segs = q.rows / seg_len;
  out = Tensor(q.rows, dv);
  kv = Tensor(segs * d, dv);
  ksum = Tensor(segs, d);
  for (std::size_t s = 0; s < segs; ++s) {
    for (std::size_t j = s * seg_len; j < (s + 1) * seg_len; ++j)
      for (std::size_t a = 0; a < d; ++a) {
        ksum(s, a) += k(j, a);
        for (std::size_t e = 0; e < dv; ++e) kv(s * d + a, e) += k(j, a) * v(j, e);
      }
    for (std::size_t i = s * seg_len; i < (s + 1) * seg_len; ++i) {
      double den = eps;
      for (std::size_t a = 0; a < d; ++a) den += q(i, a) * ksum(s, a);
      for (std::size_t e = 0; e < dv; ++e) {
        double num = 0.0;
        for (std::size_t a = 0; a < d; ++a) num += q(i, a) * kv(s * d + a, e);
        out(i, e) = num / den;
      }
    }
  }
}

}  // namespace ref

}  // namespace amoe::kernels
