#include "amoe/autodiff.hpp"

#include "amoe/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <unordered_set>

namespace amoe::ad {

Tensor& Node::grad_buffer() {
  if (grad.rows != value.rows || grad.cols != value.cols || grad.data.size() != value.data.size())
    grad = Tensor(value.rows, value.cols);
  return grad;
}

namespace {

Var make(Tensor value, std::vector<Var> parents, std::function<void(Node&)> fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  for (const auto& p : parents)
    if (p && p->requires_grad) n->requires_grad = true;
  if (n->requires_grad) {
    n->parents = std::move(parents);
    n->backward_fn = std::move(fn);
  }
  return n;
}

bool wants(const Var& v) { return v && v->requires_grad; }

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) throw std::invalid_argument(std::string(op) + ": shape " + a.shape_str() + " vs " + b.shape_str());
}

void add_into(Tensor& dst, const Tensor& src, double s = 1.0) {
  for (std::size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += s * src.data[i];
}

}  // namespace

Var constant(Tensor t) {
  auto n = std::make_shared<Node>();
  n->value = std::move(t);
  return n;
}

Var parameter(Tensor t) {
  auto n = std::make_shared<Node>();
  n->value = std::move(t);
  n->requires_grad = true;
  return n;
}

void backward(const Var& root) {
  if (root->value.size() != 1) throw std::invalid_argument("backward: root must be a scalar");
  if (!root->requires_grad) return;
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node* p = node->parents[idx++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root->grad_buffer().data[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

Var matmul(const Var& a, const Var& b) {
  Tensor out;
  kernels::gemm_nn(a->value, b->value, out);
  return make(std::move(out), {a, b}, [a, b](Node& n) {
    if (wants(a)) kernels::gemm_nt(n.grad, b->value, a->grad_buffer(), true);
    if (wants(b)) kernels::gemm_tn(a->value, n.grad, b->grad_buffer(), true);
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  Tensor out;
  kernels::gemm_nt(a->value, b->value, out);
  return make(std::move(out), {a, b}, [a, b](Node& n) {
    if (wants(a)) kernels::gemm_nn(n.grad, b->value, a->grad_buffer(), true);
    if (wants(b)) kernels::gemm_tn(n.grad, a->value, b->grad_buffer(), true);
  });
}

Var linear(const Var& x, const Var& w, const Var& bias) {
  Tensor out;
  kernels::gemm_nn(x->value, w->value, out);
  if (bias) {
    if (bias->value.rows != 1 || bias->value.cols != out.cols) throw std::invalid_argument("linear: bias shape");
    for (std::size_t r = 0; r < out.rows; ++r)
      for (std::size_t c = 0; c < out.cols; ++c) out.data[r * out.cols + c] += bias->value.data[c];
  }
  return make(std::move(out), {x, w, bias}, [x, w, bias](Node& n) {
    if (wants(x)) kernels::gemm_nt(n.grad, w->value, x->grad_buffer(), true);
    if (wants(w)) kernels::gemm_tn(x->value, n.grad, w->grad_buffer(), true);
    if (wants(bias)) {
      Tensor& gb = bias->grad_buffer();
      for (std::size_t r = 0; r < n.grad.rows; ++r)
        for (std::size_t c = 0; c < n.grad.cols; ++c) gb.data[c] += n.grad.data[r * n.grad.cols + c];
    }
  });
}

Var add(const Var& a, const Var& b) {
  require_same(a->value, b->value, "add");
  Tensor out = a->value;
  add_into(out, b->value);
  return make(std::move(out), {a, b}, [a, b](Node& n) {
    if (wants(a)) add_into(a->grad_buffer(), n.grad);
    if (wants(b)) add_into(b->grad_buffer(), n.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same(a->value, b->value, "sub");
  Tensor out = a->value;
  add_into(out, b->value, -1.0);
  return make(std::move(out), {a, b}, [a, b](Node& n) {
    if (wants(a)) add_into(a->grad_buffer(), n.grad);
    if (wants(b)) add_into(b->grad_buffer(), n.grad, -1.0);
  });
}

Var mul(const Var& a, const Var& b) {
  require_same(a->value, b->value, "mul");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= b->value.data[i];
  return make(std::move(out), {a, b}, [a, b](Node& n) {
    if (wants(a)) {
      Tensor& g = a->grad_buffer();
      for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] += n.grad.data[i] * b->value.data[i];
    }
    if (wants(b)) {
      Tensor& g = b->grad_buffer();
      for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] += n.grad.data[i] * a->value.data[i];
    }
  });
}

Var scale(const Var& a, double s) {
  Tensor out = a->value;
  for (double& x : out.data) x *= s;
  return make(std::move(out), {a}, [a, s](Node& n) { add_into(a->grad_buffer(), n.grad, s); });
}

Var add_row(const Var& a, const Var& row) {
  if (row->value.rows != 1 || row->value.cols != a->value.cols) throw std::invalid_argument("add_row: shape");
  Tensor out = a->value;
  for (std::size_t r = 0; r < out.rows; ++r)
    for (std::size_t c = 0; c < out.cols; ++c) out.data[r * out.cols + c] += row->value.data[c];
  return make(std::move(out), {a, row}, [a, row](Node& n) {
    if (wants(a)) add_into(a->grad_buffer(), n.grad);
    if (wants(row)) {
      Tensor& g = row->grad_buffer();
      for (std::size_t r = 0; r < n.grad.rows; ++r)
        for (std::size_t c = 0; c < n.grad.cols; ++c) g.data[c] += n.grad.data[r * n.grad.cols + c];
    }
  });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Var gelu(const Var& x) {
  const auto& xv = x->value;
  Tensor out(xv.rows, xv.cols);
  auto th = std::make_shared<std::vector<double>>(xv.data.size());
  for (std::size_t i = 0; i < xv.data.size(); ++i) {
    const double v = xv.data[i];
    // tanh(u) = 1 - 2 / (exp(2u) + 1); cheaper than std::tanh and exact enough in double
    const double u = kGeluC * (v + kGeluA * v * v * v);
    const double t = u > 20.0 ? 1.0 : (u < -20.0 ? -1.0 : 1.0 - 2.0 / (std::exp(2.0 * u) + 1.0));
    (*th)[i] = t;
    out.data[i] = 0.5 * v * (1.0 + t);
  }
  return make(std::move(out), {x}, [x, th](Node& n) {
    Tensor& g = x->grad_buffer();
    const auto& xv = x->value;
    for (std::size_t i = 0; i < xv.data.size(); ++i) {
      const double v = xv.data[i], t = (*th)[i];
      const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
      g.data[i] += n.grad.data[i] * d;
    }
  });
}

Var elu_plus_one(const Var& x) {
  const auto& xv = x->value;
  Tensor out(xv.rows, xv.cols);
  for (std::size_t i = 0; i < xv.data.size(); ++i) {
    const double v = xv.data[i];
    out.data[i] = v > 0.0 ? v + 1.0 : std::exp(v);
  }
  return make(std::move(out), {x}, [x](Node& n) {
    Tensor& g = x->grad_buffer();
    for (std::size_t i = 0; i < g.data.size(); ++i) {
      const double v = x->value.data[i];
      // for v <= 0 the output itself is exp(v)
      g.data[i] += n.grad.data[i] * (v > 0.0 ? 1.0 : n.value.data[i]);
    }
  });
}

Var clamp(const Var& x, double lo, double hi) {
  Tensor out = x->value;
  for (double& v : out.data) v = std::clamp(v, lo, hi);
  return make(std::move(out), {x}, [x, lo, hi](Node& n) {
    Tensor& g = x->grad_buffer();
    for (std::size_t i = 0; i < g.data.size(); ++i) {
      const double v = x->value.data[i];
      if (v >= lo && v <= hi) g.data[i] += n.grad.data[i];
    }
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const auto& xv = x->value;
  const std::size_t rows = xv.rows, cols = xv.cols;
  if (gamma->value.cols != cols || beta->value.cols != cols) throw std::invalid_argument("layer_norm: affine shape");
  Tensor out(rows, cols);
  auto xhat = std::make_shared<Tensor>(rows, cols);
  auto rstd = std::make_shared<std::vector<double>>(rows);
#pragma omp parallel for schedule(static) if (rows * cols > 16384)
  for (std::ptrdiff_t r = 0; r < static_cast<std::ptrdiff_t>(rows); ++r) {
    const double* xr = xv.data.data() + r * cols;
    double mu = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mu += xr[c];
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= static_cast<double>(cols);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t c = 0; c < cols; ++c) {
      const double h = (xr[c] - mu) * rs;
      xhat->data[r * cols + c] = h;
      out.data[r * cols + c] = h * gamma->value.data[c] + beta->value.data[c];
    }
  }
  return make(std::move(out), {x, gamma, beta}, [x, gamma, beta, xhat, rstd, rows, cols](Node& n) {
    const double* g = n.grad.data.data();
    if (wants(gamma) || wants(beta)) {
      std::vector<double> gg(cols, 0.0), gb(cols, 0.0);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) {
          gg[c] += g[r * cols + c] * xhat->data[r * cols + c];
          gb[c] += g[r * cols + c];
        }
      if (wants(gamma)) {
        Tensor& gt = gamma->grad_buffer();
        for (std::size_t c = 0; c < cols; ++c) gt.data[c] += gg[c];
      }
      if (wants(beta)) {
        Tensor& b = beta->grad_buffer();
        for (std::size_t c = 0; c < cols; ++c) b.data[c] += gb[c];
      }
    }
    if (wants(x)) {
      Tensor& gx = x->grad_buffer();
#pragma omp parallel for schedule(static) if (rows * cols > 16384)
      for (std::ptrdiff_t r = 0; r < static_cast<std::ptrdiff_t>(rows); ++r) {
        double m1 = 0.0, m2 = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
          const double gh = g[r * cols + c] * gamma->value.data[c];
          m1 += gh;
          m2 += gh * xhat->data[r * cols + c];
        }
        m1 /= static_cast<double>(cols);
        m2 /= static_cast<double>(cols);
        for (std::size_t c = 0; c < cols; ++c) {
          const double gh = g[r * cols + c] * gamma->value.data[c];
          gx.data[r * cols + c] += (*rstd)[r] * (gh - m1 - xhat->data[r * cols + c] * m2);
        }
      }
    }
  });
}

Var linear_attention(const Var& q, const Var& k, const Var& v, std::size_t seg_len, double eps) {
  Tensor out;
  auto kv = std::make_shared<Tensor>();
  auto ksum = std::make_shared<Tensor>();
  kernels::linear_attention_fwd(q->value, k->value, v->value, seg_len, eps, out, *kv, *ksum);
  return make(std::move(out), {q, k, v}, [q, k, v, kv, ksum, seg_len, eps](Node& n) {
    const std::size_t d = q->value.cols, dv = v->value.cols, segs = q->value.rows / seg_len;
    Tensor* gq = wants(q) ? &q->grad_buffer() : nullptr;
    Tensor* gk = wants(k) ? &k->grad_buffer() : nullptr;
    Tensor* gv = wants(v) ? &v->grad_buffer() : nullptr;
#pragma omp parallel for schedule(static) if (segs > 1)
    for (std::ptrdiff_t s = 0; s < static_cast<std::ptrdiff_t>(segs); ++s) {
      const double* kvs = kv->data.data() + s * d * dv;
      const double* ks = ksum->data.data() + s * d;
      // Transposed copies turn the per-row dot products into axpy updates.
      std::vector<double> kvt(dv * d), dkv(d * dv, 0.0), dkvt(dv * d), dks(d, 0.0), gnum(dv);
      for (std::size_t a = 0; a < d; ++a)
        for (std::size_t e = 0; e < dv; ++e) kvt[e * d + a] = kvs[a * dv + e];
      for (std::size_t i = s * seg_len; i < (s + 1) * seg_len; ++i) {
        const double* qi = q->value.data.data() + i * d;
        const double* gi = n.grad.data.data() + i * dv;
        const double* oi = n.value.data.data() + i * dv;
        double den = eps;
        for (std::size_t a = 0; a < d; ++a) den += qi[a] * ks[a];
        double go = 0.0;
        for (std::size_t e = 0; e < dv; ++e) {
          gnum[e] = gi[e] / den;
          go += gi[e] * oi[e];
        }
        const double gden = -go / den;
        for (std::size_t a = 0; a < d; ++a) {
          const double qa = qi[a];
          double* dkv_row = dkv.data() + a * dv;
          for (std::size_t e = 0; e < dv; ++e) dkv_row[e] += qa * gnum[e];
          dks[a] += gden * qa;
        }
        if (gq) {
          double* gqi = gq->data.data() + i * d;
          for (std::size_t a = 0; a < d; ++a) gqi[a] += ks[a] * gden;
          for (std::size_t e = 0; e < dv; ++e) {
            const double ge = gnum[e];
            const double* row = kvt.data() + e * d;
            for (std::size_t a = 0; a < d; ++a) gqi[a] += ge * row[a];
          }
        }
      }
      for (std::size_t a = 0; a < d; ++a)
        for (std::size_t e = 0; e < dv; ++e) dkvt[e * d + a] = dkv[a * dv + e];
      for (std::size_t j = s * seg_len; j < (s + 1) * seg_len; ++j) {
        const double* kj = k->value.data.data() + j * d;
        const double* vj = v->value.data.data() + j * dv;
        if (gk) {
          double* gkj = gk->data.data() + j * d;
          for (std::size_t a = 0; a < d; ++a) gkj[a] += dks[a];
          for (std::size_t e = 0; e < dv; ++e) {
            const double ve = vj[e];
            const double* row = dkvt.data() + e * d;
            for (std::size_t a = 0; a < d; ++a) gkj[a] += ve * row[a];
          }
        }
        if (gv) {
          double* gvj = gv->data.data() + j * dv;
          for (std::size_t a = 0; a < d; ++a) {
            const double ka = kj[a];
            const double* dkv_row = dkv.data() + a * dv;
            for (std::size_t e = 0; e < dv; ++e) gvj[e] += ka * dkv_row[e];
          }
        }
      }
    }
  });
}

Var gather_rows(const Var& x, std::vector<int> table, std::size_t blocks) {
  const auto& xv = x->value;
  if (blocks == 0 || table.size() % blocks != 0) throw std::invalid_argument("gather_rows: table size");
  const std::size_t out_rows = table.size() / blocks, c = xv.cols;
  Tensor out(out_rows, blocks * c);
  for (std::size_t t = 0; t < table.size(); ++t) {
    const int src = table[t];
    if (src < 0) continue;
    if (static_cast<std::size_t>(src) >= xv.rows) throw std::out_of_range("gather_rows: index");
    std::copy_n(xv.data.data() + src * c, c, out.data.data() + t * c);
  }
  auto tab = std::make_shared<std::vector<int>>(std::move(table));
  return make(std::move(out), {x}, [x, tab, c](Node& n) {
    Tensor& g = x->grad_buffer();
    for (std::size_t t = 0; t < tab->size(); ++t) {
      const int src = (*tab)[t];
      if (src < 0) continue;
      const double* gs = n.grad.data.data() + t * c;
      double* gd = g.data.data() + static_cast<std::size_t>(src) * c;
      for (std::size_t j = 0; j < c; ++j) gd[j] += gs[j];
    }
  });
}

Var segment_mean(const Var& x, std::vector<std::size_t> offsets) {
  const auto& xv = x->value;
  if (offsets.size() < 2 || offsets.back() != xv.rows) throw std::invalid_argument("segment_mean: offsets");
  const std::size_t segs = offsets.size() - 1, c = xv.cols;
  Tensor out(segs, c);
  for (std::size_t s = 0; s < segs; ++s) {
    const std::size_t len = offsets[s + 1] - offsets[s];
    if (len == 0) throw std::invalid_argument("segment_mean: empty segment");
    double* o = out.data.data() + s * c;
    for (std::size_t r = offsets[s]; r < offsets[s + 1]; ++r)
      for (std::size_t j = 0; j < c; ++j) o[j] += xv.data[r * c + j];
    for (std::size_t j = 0; j < c; ++j) o[j] /= static_cast<double>(len);
  }
  auto offs = std::make_shared<std::vector<std::size_t>>(std::move(offsets));
  return make(std::move(out), {x}, [x, offs, c](Node& n) {
    Tensor& g = x->grad_buffer();
    for (std::size_t s = 0; s + 1 < offs->size(); ++s) {
      const double inv = 1.0 / static_cast<double>((*offs)[s + 1] - (*offs)[s]);
      const double* gs = n.grad.data.data() + s * c;
      for (std::size_t r = (*offs)[s]; r < (*offs)[s + 1]; ++r)
        for (std::size_t j = 0; j < c; ++j) g.data[r * c + j] += gs[j] * inv;
    }
  });
}

Var segment_mean(const Var& x, std::size_t seg_len) {
  if (seg_len == 0 || x->value.rows % seg_len != 0) throw std::invalid_argument("segment_mean: seg_len");
  std::vector<std::size_t> offs(x->value.rows / seg_len + 1);
  for (std::size_t s = 0; s < offs.size(); ++s) offs[s] = s * seg_len;
  return segment_mean(x, std::move(offs));
}

Var row_cosine_distance(const Var& a, const Var& b, double eps) {
  require_same(a->value, b->value, "row_cosine_distance");
  const std::size_t rows = a->value.rows, c = a->value.cols;
  Tensor out(rows, 1);
  auto stats = std::make_shared<std::vector<double>>(rows * 4);  // dot, na, nb, clamped flags packed
  for (std::size_t r = 0; r < rows; ++r) {
    const double* ar = a->value.data.data() + r * c;
    const double* br = b->value.data.data() + r * c;
    double dot = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      dot += ar[j] * br[j];
      aa += ar[j] * ar[j];
      bb += br[j] * br[j];
    }
    const double na = std::max(std::sqrt(aa), eps), nb = std::max(std::sqrt(bb), eps);
    (*stats)[4 * r] = dot;
    (*stats)[4 * r + 1] = na;
    (*stats)[4 * r + 2] = nb;
    (*stats)[4 * r + 3] = (std::sqrt(aa) > eps ? 1.0 : 0.0) + (std::sqrt(bb) > eps ? 2.0 : 0.0);
    out.data[r] = 1.0 - dot / (na * nb);
  }
  return make(std::move(out), {a, b}, [a, b, stats, c](Node& n) {
    for (std::size_t r = 0; r < n.value.rows; ++r) {
      const double g = -n.grad.data[r];
      const double dot = (*stats)[4 * r], na = (*stats)[4 * r + 1], nb = (*stats)[4 * r + 2];
      const int flags = static_cast<int>((*stats)[4 * r + 3]);
      const double cosv = dot / (na * nb);
      const double* ar = a->value.data.data() + r * c;
      const double* br = b->value.data.data() + r * c;
      if (wants(a)) {
        double* ga = a->grad_buffer().data.data() + r * c;
        const double ka = (flags & 1) ? cosv / (na * na) : 0.0;
        for (std::size_t j = 0; j < c; ++j) ga[j] += g * (br[j] / (na * nb) - ka * ar[j]);
      }
      if (wants(b)) {
        double* gb = b->grad_buffer().data.data() + r * c;
        const double kb = (flags & 2) ? cosv / (nb * nb) : 0.0;
        for (std::size_t j = 0; j < c; ++j) gb[j] += g * (ar[j] / (na * nb) - kb * br[j]);
      }
    }
  });
}

Var row_sq_dist(const Var& a, const Var& b) {
  require_same(a->value, b->value, "row_sq_dist");
  const std::size_t rows = a->value.rows, c = a->value.cols;
  Tensor out(rows, 1);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double d = a->value.data[r * c + j] - b->value.data[r * c + j];
      s += d * d;
    }
    out.data[r] = s;
  }
  return make(std::move(out), {a, b}, [a, b, c](Node& n) {
    for (std::size_t r = 0; r < n.value.rows; ++r) {
      const double g = 2.0 * n.grad.data[r];
      for (std::size_t j = 0; j < c; ++j) {
        const double d = a->value.data[r * c + j] - b->value.data[r * c + j];
        if (wants(a)) a->grad_buffer().data[r * c + j] += g * d;
        if (wants(b)) b->grad_buffer().data[r * c + j] -= g * d;
      }
    }
  });
}

Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x->value.data) s += v;
  return make(Tensor(1, 1, s), {x}, [x](Node& n) {
    Tensor& g = x->grad_buffer();
    for (double& v : g.data) v += n.grad.data[0];
  });
}

Var mean(const Var& x) {
  if (x->value.empty()) throw std::invalid_argument("mean: empty");
  return scale(sum(x), 1.0 / static_cast<double>(x->value.size()));
}

Var sum_squares(const Var& x) {
  double s = 0.0;
  for (double v : x->value.data) s += v * v;
  return make(Tensor(1, 1, s), {x}, [x](Node& n) {
    Tensor& g = x->grad_buffer();
    for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] += 2.0 * x->value.data[i] * n.grad.data[0];
  });
}

Var col_mean(const Var& x) {
  const auto& xv = x->value;
  if (xv.rows == 0) throw std::invalid_argument("col_mean: empty");
  Tensor out(1, xv.cols);
  for (std::size_t r = 0; r < xv.rows; ++r)
    for (std::size_t c = 0; c < xv.cols; ++c) out.data[c] += xv.data[r * xv.cols + c];
  for (double& v : out.data) v /= static_cast<double>(xv.rows);
  return make(std::move(out), {x}, [x](Node& n) {
    Tensor& g = x->grad_buffer();
    const double inv = 1.0 / static_cast<double>(g.rows);
    for (std::size_t r = 0; r < g.rows; ++r)
      for (std::size_t c = 0; c < g.cols; ++c) g.data[r * g.cols + c] += n.grad.data[c] * inv;
  });
}

Var topk_softmax(const Var& logits, const std::vector<std::vector<int>>& selected) {
  const auto& lv = logits->value;
  if (selected.size() != lv.rows) throw std::invalid_argument("topk_softmax: selection rows");
  Tensor out(lv.rows, lv.cols);
  for (std::size_t r = 0; r < lv.rows; ++r) {
    const auto& sel = selected[r];
    if (sel.empty()) throw std::invalid_argument("topk_softmax: empty selection");
    double mx = -INFINITY;
    for (int j : sel) mx = std::max(mx, lv(r, j));
    double z = 0.0;
    for (int j : sel) z += std::exp(lv(r, j) - mx);
    for (int j : sel) out(r, j) = std::exp(lv(r, j) - mx) / z;
  }
  auto sel = std::make_shared<std::vector<std::vector<int>>>(selected);
  return make(std::move(out), {logits}, [logits, sel](Node& n) {
    Tensor& g = logits->grad_buffer();
    for (std::size_t r = 0; r < n.value.rows; ++r) {
      double dotp = 0.0;
      for (int j : (*sel)[r]) dotp += n.value(r, j) * n.grad(r, j);
      for (int j : (*sel)[r]) g(r, j) += n.value(r, j) * (n.grad(r, j) - dotp);
    }
  });
}

Var assemble_columns(const std::vector<Var>& cols, const std::vector<std::vector<bool>>& keep) {
  if (cols.empty() || keep.size() != cols.size()) throw std::invalid_argument("assemble_columns: sizes");
  const std::size_t rows = cols.front()->value.rows;
  Tensor out(rows, cols.size());
  for (std::size_t c = 0; c < cols.size(); ++c) {
    if (cols[c]->value.rows != rows || cols[c]->value.cols != 1 || keep[c].size() != rows)
      throw std::invalid_argument("assemble_columns: column shape");
    for (std::size_t r = 0; r < rows; ++r)
      if (keep[c][r]) out(r, c) = cols[c]->value.data[r];
  }
  return make(std::move(out), cols, [cols, keep](Node& n) {
    for (std::size_t c = 0; c < cols.size(); ++c) {
      if (!wants(cols[c])) continue;
      Tensor* g = nullptr;
      for (std::size_t r = 0; r < n.value.rows; ++r)
        if (keep[c][r]) {
          if (!g) g = &cols[c]->grad_buffer();
          g->data[r] += n.grad(r, c);
        }
    }
  });
}

Var load_loss_st(const Var& logits, const std::vector<int>& counts, double capacity) {
  const auto& lv = logits->value;
  if (counts.size() != lv.cols) throw std::invalid_argument("load_loss_st: counts size");
  double value = 0.0;
  std::vector<double> coeff(lv.cols);
  for (std::size_t j = 0; j < lv.cols; ++j) {
    const double over = std::max(static_cast<double>(counts[j]) - capacity, 0.0);
    value += over * over;
    coeff[j] = 2.0 * over;
  }
  return make(Tensor(1, 1, value), {logits}, [logits, coeff](Node& n) {
    const auto& lv = logits->value;
    Tensor& g = logits->grad_buffer();
    std::vector<double> p(lv.cols);
    for (std::size_t r = 0; r < lv.rows; ++r) {
      double mx = -INFINITY;
      for (std::size_t j = 0; j < lv.cols; ++j) mx = std::max(mx, lv(r, j));
      double z = 0.0;
      for (std::size_t j = 0; j < lv.cols; ++j) z += (p[j] = std::exp(lv(r, j) - mx));
      double cbar = 0.0;
      for (std::size_t j = 0; j < lv.cols; ++j) {
        p[j] /= z;
        cbar += coeff[j] * p[j];
      }
      for (std::size_t j = 0; j < lv.cols; ++j) g(r, j) += n.grad.data[0] * p[j] * (coeff[j] - cbar);
    }
  });
}

Var gaussian_loglik(const Var& z, const Var& mu, const Var& logvar) {
  require_same(z->value, mu->value, "gaussian_loglik");
  require_same(z->value, logvar->value, "gaussian_loglik");
  const std::size_t rows = z->value.rows, c = z->value.cols;
  const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
  Tensor out(rows, 1);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const std::size_t i = r * c + j;
      const double d = z->value.data[i] - mu->value.data[i];
      const double lv = logvar->value.data[i];
      s += -0.5 * lv - d * d / (2.0 * std::exp(lv)) - half_log_2pi;
    }
    out.data[r] = s;
  }
  return make(std::move(out), {z, mu, logvar}, [z, mu, logvar, c](Node& n) {
    for (std::size_t r = 0; r < n.value.rows; ++r) {
      const double g = n.grad.data[r];
      for (std::size_t j = 0; j < c; ++j) {
        const std::size_t i = r * c + j;
        const double d = z->value.data[i] - mu->value.data[i];
        const double inv_var = std::exp(-logvar->value.data[i]);
        if (wants(z)) z->grad_buffer().data[i] -= g * d * inv_var;
        if (wants(mu)) mu->grad_buffer().data[i] += g * d * inv_var;
        if (wants(logvar)) logvar->grad_buffer().data[i] += g * (-0.5 + 0.5 * d * d * inv_var);
      }
    }
  });
}

}  // namespace amoe::ad
