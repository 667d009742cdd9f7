#pragma once

// Reverse-mode differentiation on a tape. Nodes are appended in evaluation
// order, so walking the tape backwards is a reverse topological order.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "attention.hpp"
#include "tensor.hpp"

namespace ihalab {

class non_finite_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Tape;

struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Tensor& grad() const;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t)>;

  struct Node {
    Tensor value;
    Tensor grad;
    bool grad_ready = false;
    bool requires_grad = false;
    std::optional<std::size_t> param_id;
    std::vector<std::size_t> parents;
    Backward backward;
  };

  Var param(Tensor v, std::size_t param_id) {
    Node n;
    n.value = std::move(v);
    n.requires_grad = true;
    n.param_id = param_id;
    return append(std::move(n));
  }

  Var constant(Tensor v) {
    Node n;
    n.value = std::move(v);
    return append(std::move(n));
  }

  Var push(Tensor value, std::vector<std::size_t> parents, Backward back) {
    Node n;
    n.value = std::move(value);
    for (auto p : parents) n.requires_grad = n.requires_grad || nodes_.at(p).requires_grad;
    n.parents = std::move(parents);
    if (n.requires_grad) n.backward = std::move(back);
    return append(std::move(n));
  }

  const Node& node(std::size_t id) const { return nodes_.at(id); }
  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Adjoint accumulator, zero-initialised on first touch.
  Tensor& grad(std::size_t id) {
    Node& n = nodes_.at(id);
    if (!n.grad_ready) {
      n.grad = Tensor(n.value.shape());
      n.grad_ready = true;
    }
    return n.grad;
  }

  const Tensor& grad_view(std::size_t id) {
    return grad(id);
  }

  // Gradients of a scalar loss, keyed by parameter id. Parameters that the
  // loss does not reach get a zero gradient.
  std::map<std::size_t, Tensor> backward(Var loss) {
    if (loss.tape != this) throw std::invalid_argument("backward: loss belongs to another tape");
    if (value(loss.id).size() != 1)
      throw dimension_error("backward: loss must be a scalar, got shape " + shape_str(value(loss.id).shape()));
    for (auto& n : nodes_) n.grad_ready = false;
    grad(loss.id)[0] = 1.0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || !n.grad_ready || !n.backward) continue;
      n.backward(*this, i);
    }
    std::map<std::size_t, Tensor> out;
    for (std::size_t i = 0; i < nodes_.size(); ++i)
      if (nodes_[i].param_id) out[*nodes_[i].param_id] = grad(i);
    return out;
  }

 private:
  Var append(Node n) {
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape->value(id); }
inline const Tensor& Var::grad() const { return tape->grad_view(id); }

namespace ad {

namespace detail {
inline void same_tape(const Var& a, const Var& b) {
  if (a.tape != b.tape || a.tape == nullptr) throw std::invalid_argument("autodiff: operands on different tapes");
}

// c += a^T b, a [m,k], b [m,n], c [k,n]
inline void add_at_b(const Tensor& a, const Tensor& b, Tensor& c) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  const double* A = a.data().data();
  const double* B = b.data().data();
  double* C = c.data().data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double v = A[i * k + p];
      if (v == 0.0) continue;
      const double* brow = B + i * n;
      double* crow = C + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += v * brow[j];
    }
}

// c += a b^T, a [m,n], b [k,n], c [m,k]
inline void add_a_bt(const Tensor& a, const Tensor& b, Tensor& c) {
  const std::size_t m = a.dim(0), n = a.dim(1), k = b.dim(0);
  const double* A = a.data().data();
  const double* B = b.data().data();
  double* C = c.data().data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      double s = 0.0;
      const double* arow = A + i * n;
      const double* brow = B + p * n;
      for (std::size_t j = 0; j < n; ++j) s += arow[j] * brow[j];
      C[i * k + p] += s;
    }
}
}  // namespace detail

inline Var matmul(Var a, Var b) {
  detail::same_tape(a, b);
  Tensor out = ihalab::matmul(a.value(), b.value());
  return a.tape->push(std::move(out), {a.id, b.id}, [a = a.id, b = b.id](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(a)) detail::add_a_bt(g, t.value(b), t.grad(a));
    if (t.requires_grad(b)) detail::add_at_b(t.value(a), g, t.grad(b));
  });
}

inline Var add(Var a, Var b) {
  detail::same_tape(a, b);
  if (a.value().shape() != b.value().shape())
    throw dimension_error("add: " + shape_str(a.value().shape()) + " vs " + shape_str(b.value().shape()));
  Tensor out = a.value() + b.value();
  return a.tape->push(std::move(out), {a.id, b.id}, [a = a.id, b = b.id](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    for (std::size_t id : {a, b}) {
      if (!t.requires_grad(id)) continue;
      Tensor& ga = t.grad(id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
  });
}

// x [L, C] + b broadcast over rows; b has C entries (any shape).
inline Var add_row_bias(Var x, Var b) {
  detail::same_tape(x, b);
  require_rank(x.value(), 2, "add_row_bias");
  const std::size_t L = x.value().dim(0), C = x.value().dim(1);
  if (b.value().size() != C) throw dimension_error("add_row_bias: bias length mismatch");
  Tensor out = x.value();
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t j = 0; j < C; ++j) out(i, j) += b.value()[j];
  return x.tape->push(std::move(out), {x.id, b.id}, [x = x.id, b = b.id, L, C](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(x)) {
      Tensor& gx = t.grad(x);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (t.requires_grad(b)) {
      Tensor& gb = t.grad(b);
      for (std::size_t i = 0; i < L; ++i)
        for (std::size_t j = 0; j < C; ++j) gb[j] += g[i * C + j];
    }
  });
}

inline Var scale(Var a, double s) {
  Tensor out = s * a.value();
  return a.tape->push(std::move(out), {a.id}, [a = a.id, s](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.tape->push(Tensor::scalar(s), {a.id}, [a = a.id](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    Tensor& ga = t.grad(a);
    for (auto& v : ga.data()) v += g;
  });
}

inline Var relu(Var a) {
  Tensor out = a.value();
  for (auto& v : out.data()) v = v > 0.0 ? v : 0.0;
  return a.tape->push(std::move(out), {a.id}, [a = a.id](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& x = t.value(a);
    Tensor& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (x[i] > 0.0) ga[i] += g[i];
  });
}

inline Var tanh(Var a) {
  Tensor out = a.value();
  for (auto& v : out.data()) v = std::tanh(v);
  return a.tape->push(std::move(out), {a.id}, [a = a.id](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    Tensor& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (1.0 - y[i] * y[i]);
  });
}

// Row softmax; backward in the y * (g - <g, y>) form.
inline Var softmax_rows(Var a) {
  Tensor out = ihalab::softmax_rows(a.value());
  return a.tape->push(std::move(out), {a.id}, [a = a.id](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    Tensor& ga = t.grad(a);
    const std::size_t R = y.dim(0), C = y.dim(1);
    for (std::size_t i = 0; i < R; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < C; ++j) dot += g(i, j) * y(i, j);
      for (std::size_t j = 0; j < C; ++j) ga(i, j) += y(i, j) * (g(i, j) - dot);
    }
  });
}

// Rows of `table` picked by index; repeated indices accumulate.
inline Var gather_rows(Var table, std::vector<std::size_t> idx) {
  require_rank(table.value(), 2, "gather_rows");
  const std::size_t V = table.value().dim(0), C = table.value().dim(1);
  Tensor out({idx.size(), C});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= V) throw std::out_of_range("gather_rows: index " + std::to_string(idx[i]) + " >= " + std::to_string(V));
    for (std::size_t j = 0; j < C; ++j) out(i, j) = table.value()(idx[i], j);
  }
  return table.tape->push(std::move(out), {table.id},
                          [tb = table.id, idx = std::move(idx), C](Tape& t, std::size_t self) {
                            const Tensor& g = t.grad(self);
                            Tensor& gt = t.grad(tb);
                            for (std::size_t i = 0; i < idx.size(); ++i)
                              for (std::size_t j = 0; j < C; ++j) gt(idx[i], j) += g(i, j);
                          });
}

// x [L, H*d] (column block m is head m), alpha [H, H, P] ->
// [L, H*P*d] with column block h*P + j = sum_m alpha[m, h, j] x_m.
inline Var mix_heads(Var x, Var alpha) {
  detail::same_tape(x, alpha);
  require_rank(x.value(), 2, "mix_heads input");
  require_rank(alpha.value(), 3, "mix_heads alpha");
  const Tensor& a = alpha.value();
  const std::size_t H = a.dim(0), P = a.dim(2), L = x.value().dim(0);
  if (a.dim(1) != H || x.value().dim(1) % H != 0) throw dimension_error("mix_heads: shape mismatch");
  const std::size_t d = x.value().dim(1) / H;
  Tensor out({L, H * P * d});
  const Tensor& xv = x.value();
  for (std::size_t m = 0; m < H; ++m)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t j = 0; j < P; ++j) {
        const double w = a(m, h, j);
        if (w == 0.0) continue;
        const std::size_t ob = (h * P + j) * d;
        for (std::size_t n = 0; n < L; ++n)
          for (std::size_t c = 0; c < d; ++c) out(n, ob + c) += w * xv(n, m * d + c);
      }
  return x.tape->push(std::move(out), {x.id, alpha.id},
                      [x = x.id, al = alpha.id, H, P, d, L](Tape& t, std::size_t self) {
                        const Tensor& g = t.grad(self);
                        const Tensor& xv = t.value(x);
                        const Tensor& a = t.value(al);
                        const bool gx_on = t.requires_grad(x), ga_on = t.requires_grad(al);
                        for (std::size_t m = 0; m < H; ++m)
                          for (std::size_t h = 0; h < H; ++h)
                            for (std::size_t j = 0; j < P; ++j) {
                              const std::size_t ob = (h * P + j) * d;
                              if (ga_on) {
                                double s = 0.0;
                                for (std::size_t n = 0; n < L; ++n)
                                  for (std::size_t c = 0; c < d; ++c) s += g(n, ob + c) * xv(n, m * d + c);
                                t.grad(al)(m, h, j) += s;
                              }
                              if (gx_on) {
                                const double w = a(m, h, j);
                                if (w == 0.0) continue;
                                Tensor& gx = t.grad(x);
                                for (std::size_t n = 0; n < L; ++n)
                                  for (std::size_t c = 0; c < d; ++c) gx(n, m * d + c) += w * g(n, ob + c);
                              }
                            }
                      });
}

namespace detail {
// Four partial sums in a fixed order: vectorisable and still deterministic.
inline double dot(const double* a, const double* b, std::size_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

inline double sum(const double* a, std::size_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i];
    s1 += a[i + 1];
    s2 += a[i + 2];
    s3 += a[i + 3];
  }
  for (; i < n; ++i) s0 += a[i];
  return (s0 + s1) + (s2 + s3);
}

// In-place exp for non-positive arguments (clamped at -700): Cody-Waite
// reduction by ln 2, degree-12 Taylor polynomial, exponent assembled from
// bits. Branch-free; relative error below 4e-16.
inline void exp_nonpositive(double* x, std::size_t n) {
  constexpr double log2e = 1.4426950408889634, ln2_hi = 0x1.62e42fee00000p-1, ln2_lo = 0x1.a39ef35793c76p-33;
  constexpr double shifter = 0x1.8p52;
  constexpr std::int64_t shifter_bits = 0x4338000000000000LL;
  for (std::size_t i = 0; i < n; ++i) {
    double v = x[i];
    v = v > -700.0 ? v : -700.0;
    const double t = v * log2e + shifter;
    const double k = t - shifter;
    const double r = (v - k * ln2_hi) - k * ln2_lo;
    double p = 1.0 / 479001600.0;
    p = p * r + 1.0 / 39916800.0;
    p = p * r + 1.0 / 3628800.0;
    p = p * r + 1.0 / 362880.0;
    p = p * r + 1.0 / 40320.0;
    p = p * r + 1.0 / 5040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    const std::int64_t scale_bits = (std::bit_cast<std::int64_t>(t) - shifter_bits + 1023) << 52;
    x[i] = p * std::bit_cast<double>(scale_bits);
  }
}

// Group g of a [L, G*P*w] operand as a [w, L*P] matrix (virtual token n*P + p).
inline void pack_transposed(const Tensor& src, std::size_t g, std::size_t P, std::size_t w,
                            std::vector<double>& dst) {
  const std::size_t L = src.dim(0), stride = src.dim(1), off = g * P * w, Lv = L * P;
  dst.resize(w * Lv);
  const double* base = src.data().data();
  for (std::size_t n = 0; n < L; ++n)
    for (std::size_t p = 0; p < P; ++p)
      for (std::size_t c = 0; c < w; ++c) dst[c * Lv + n * P + p] = base[n * stride + off + p * w + c];
}

inline void unpack_add_transposed(const std::vector<double>& src, std::size_t g, std::size_t P, std::size_t w,
                                  Tensor& dst) {
  const std::size_t L = dst.dim(0), stride = dst.dim(1), off = g * P * w, Lv = L * P;
  double* base = dst.data().data();
  for (std::size_t n = 0; n < L; ++n)
    for (std::size_t p = 0; p < P; ++p)
      for (std::size_t c = 0; c < w; ++c) base[n * stride + off + p * w + c] += src[c * Lv + n * P + p];
}
}  // namespace detail

// Softmax attention run independently per group. q, k, v are [L, G*P*w];
// group g owns column blocks g*P .. g*P+P-1 and its virtual sequence holds
// L*P tokens (position n, pseudo p). Without masks the virtual order is
// immaterial. Output has v's layout.
inline Var grouped_attention(Var q, Var k, Var v, std::size_t groups, std::size_t P, double scale) {
  detail::same_tape(q, k);
  detail::same_tape(q, v);
  const Tensor &Q = q.value(), &K = k.value(), &V = v.value();
  const std::size_t L = Q.dim(0);
  if (Q.shape() != K.shape() || V.dim(0) != L || Q.dim(1) % (groups * P) != 0 || V.dim(1) % (groups * P) != 0)
    throw dimension_error("grouped_attention: shape mismatch");
  const std::size_t dk = Q.dim(1) / (groups * P), dv = V.dim(1) / (groups * P), Lv = L * P;
  const bool keep = q.tape->requires_grad(q.id) || q.tape->requires_grad(k.id) || q.tape->requires_grad(v.id);
  std::vector<Tensor> probs;
  Tensor out({L, V.dim(1)});
  std::vector<double> qT, kT, vT, oT(dv * Lv), row(Lv);
  for (std::size_t g = 0; g < groups; ++g) {
    detail::pack_transposed(Q, g, P, dk, qT);
    detail::pack_transposed(K, g, P, dk, kT);
    detail::pack_transposed(V, g, P, dv, vT);
    Tensor A = keep ? Tensor({Lv, Lv}) : Tensor();
    for (std::size_t u = 0; u < Lv; ++u) {
      double* r = keep ? &A(u, 0) : row.data();
      std::fill(r, r + Lv, 0.0);
      for (std::size_t c = 0; c < dk; ++c) {
        const double qc = qT[c * Lv + u] * scale;
        const double* kc = kT.data() + c * Lv;
        for (std::size_t w = 0; w < Lv; ++w) r[w] += qc * kc[w];
      }
      double mx = r[0];
      for (std::size_t w = 1; w < Lv; ++w) mx = std::max(mx, r[w]);
      for (std::size_t w = 0; w < Lv; ++w) r[w] -= mx;
      detail::exp_nonpositive(r, Lv);
      const double inv = 1.0 / detail::sum(r, Lv);
      for (std::size_t w = 0; w < Lv; ++w) r[w] *= inv;
      for (std::size_t c = 0; c < dv; ++c) oT[c * Lv + u] = detail::dot(r, vT.data() + c * Lv, Lv);
    }
    detail::unpack_add_transposed(oT, g, P, dv, out);
    if (keep) probs.push_back(std::move(A));
  }
  return q.tape->push(
      std::move(out), {q.id, k.id, v.id},
      [qi = q.id, ki = k.id, vi = v.id, probs = std::move(probs), groups, P, dk, dv, Lv, scale](Tape& t,
                                                                                            std::size_t self) {
        const Tensor& G = t.grad(self);
        const bool gq_on = t.requires_grad(qi), gk_on = t.requires_grad(ki), gv_on = t.requires_grad(vi);
        std::vector<double> qT, kT, vT, gT, gqT(dk * Lv), gkT(dk * Lv), gvT(dv * Lv), ds(Lv), gu(dv);
        for (std::size_t g = 0; g < groups; ++g) {
          const Tensor& A = probs[g];
          detail::pack_transposed(t.value(qi), g, P, dk, qT);
          detail::pack_transposed(t.value(ki), g, P, dk, kT);
          detail::pack_transposed(t.value(vi), g, P, dv, vT);
          detail::pack_transposed(G, g, P, dv, gT);
          std::fill(gqT.begin(), gqT.end(), 0.0);
          std::fill(gkT.begin(), gkT.end(), 0.0);
          std::fill(gvT.begin(), gvT.end(), 0.0);
          for (std::size_t u = 0; u < Lv; ++u) {
            const double* Au = &A(u, 0);
            for (std::size_t c = 0; c < dv; ++c) gu[c] = gT[c * Lv + u];
            // dA(u, w) = <g_u, v_w>; dS = A * (dA - <dA, A>)
            std::fill(ds.begin(), ds.end(), 0.0);
            for (std::size_t c = 0; c < dv; ++c) {
              const double gc = gu[c];
              const double* vc = vT.data() + c * Lv;
              for (std::size_t w = 0; w < Lv; ++w) ds[w] += gc * vc[w];
              if (gv_on) {
                double* gvc = gvT.data() + c * Lv;
                for (std::size_t w = 0; w < Lv; ++w) gvc[w] += Au[w] * gc;
              }
            }
            if (!gq_on && !gk_on) continue;
            const double dotv = detail::dot(ds.data(), Au, Lv);
            for (std::size_t w = 0; w < Lv; ++w) ds[w] = Au[w] * (ds[w] - dotv) * scale;
            for (std::size_t c = 0; c < dk; ++c) {
              if (gq_on) gqT[c * Lv + u] += detail::dot(ds.data(), kT.data() + c * Lv, Lv);
              if (gk_on) {
                const double qc = qT[c * Lv + u];
                double* gkc = gkT.data() + c * Lv;
                for (std::size_t w = 0; w < Lv; ++w) gkc[w] += ds[w] * qc;
              }
            }
          }
          if (gq_on) detail::unpack_add_transposed(gqT, g, P, dk, t.grad(qi));
          if (gk_on) detail::unpack_add_transposed(gkT, g, P, dk, t.grad(ki));
          if (gv_on) detail::unpack_add_transposed(gvT, g, P, dv, t.grad(vi));
        }
      });
}

// o [L, H*P*d] (block h'*P + j), r [H, H*P] -> [L, H*d],
// out_h = sum_q r[h, q] o_q.
inline Var collapse(Var o, Var r) {
  detail::same_tape(o, r);
  require_rank(r.value(), 2, "collapse R");
  const std::size_t H = r.value().dim(0), Q = r.value().dim(1), L = o.value().dim(0);
  if (o.value().dim(1) % Q != 0) throw dimension_error("collapse: operand width not divisible by H*P");
  const std::size_t d = o.value().dim(1) / Q;
  Tensor out({L, H * d});
  const Tensor& R = r.value();
  const Tensor& O = o.value();
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t q = 0; q < Q; ++q) {
      const double w = R(h, q);
      if (w == 0.0) continue;
      for (std::size_t n = 0; n < L; ++n)
        for (std::size_t c = 0; c < d; ++c) out(n, h * d + c) += w * O(n, q * d + c);
    }
  return o.tape->push(std::move(out), {o.id, r.id}, [oi = o.id, ri = r.id, H, Q, L, d](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& R = t.value(ri);
    const Tensor& O = t.value(oi);
    const bool go_on = t.requires_grad(oi), gr_on = t.requires_grad(ri);
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t q = 0; q < Q; ++q) {
        if (gr_on) {
          double s = 0.0;
          for (std::size_t n = 0; n < L; ++n)
            for (std::size_t c = 0; c < d; ++c) s += g(n, h * d + c) * O(n, q * d + c);
          t.grad(ri)(h, q) += s;
        }
        if (go_on) {
          const double w = R(h, q);
          if (w == 0.0) continue;
          Tensor& go = t.grad(oi);
          for (std::size_t n = 0; n < L; ++n)
            for (std::size_t c = 0; c < d; ++c) go(n, q * d + c) += w * g(n, h * d + c);
        }
      }
  });
}

// Sum over positions with mask[i] of BCE(sigmoid(z_i), y_i); z has one
// entry per position.
inline Var bce_with_logits_sum(Var z, const std::vector<double>& y, const std::vector<bool>& mask) {
  const Tensor& zv = z.value();
  if (zv.size() != y.size() || y.size() != mask.size()) throw dimension_error("bce_with_logits: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < zv.size(); ++i) {
    if (!mask[i]) continue;
    const double x = zv[i];
    s += std::max(x, 0.0) - x * y[i] + std::log1p(std::exp(-std::abs(x)));
  }
  return z.tape->push(Tensor::scalar(s), {z.id}, [zi = z.id, y, mask](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    const Tensor& zv = t.value(zi);
    Tensor& gz = t.grad(zi);
    for (std::size_t i = 0; i < zv.size(); ++i) {
      if (!mask[i]) continue;
      const double sig = 1.0 / (1.0 + std::exp(-zv[i]));
      gz[i] += g * (sig - y[i]);
    }
  });
}

inline Var mse_sum(Var z, const std::vector<double>& y, const std::vector<bool>& mask) {
  const Tensor& zv = z.value();
  if (zv.size() != y.size() || y.size() != mask.size()) throw dimension_error("mse: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < zv.size(); ++i)
    if (mask[i]) s += (zv[i] - y[i]) * (zv[i] - y[i]);
  return z.tape->push(Tensor::scalar(s), {z.id}, [zi = z.id, y, mask](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    const Tensor& zv = t.value(zi);
    Tensor& gz = t.grad(zi);
    for (std::size_t i = 0; i < zv.size(); ++i)
      if (mask[i]) gz[i] += 2.0 * g * (zv[i] - y[i]);
  });
}

}  // namespace ad

// ---------------------------------------------------------------------------
// Finite-difference checking

using NamedParams = std::vector<std::pair<std::string, Tensor>>;
// Builds the scalar loss from parameter leaves (in NamedParams order).
using LossBuilder = std::function<Var(Tape&, const std::vector<Var>&)>;

struct GradcheckReport {
  enum class Status { passed, failed, skipped };
  Status status = Status::skipped;
  std::string reason;
  double max_rel_error = 0.0;
  std::vector<std::pair<std::string, double>> per_param;

  bool passed() const { return status == Status::passed; }
  std::string status_str() const {
    switch (status) {
      case Status::passed: return "passed";
      case Status::failed: return "failed";
      case Status::skipped: return "skipped";
    }
    return "?";
  }
};

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

inline double evaluate_loss(const LossBuilder& f, const NamedParams& params) {
  Tape tape;
  std::vector<Var> leaves;
  for (std::size_t i = 0; i < params.size(); ++i) leaves.push_back(tape.param(params[i].second, i));
  const double v = f(tape, leaves).value()[0];
  if (!std::isfinite(v)) throw non_finite_error("gradcheck: non-finite loss");
  return v;
}

inline std::map<std::size_t, Tensor> tape_gradients(const LossBuilder& f, const NamedParams& params) {
  Tape tape;
  std::vector<Var> leaves;
  for (std::size_t i = 0; i < params.size(); ++i) leaves.push_back(tape.param(params[i].second, i));
  return tape.backward(f(tape, leaves));
}

// Central differences on every parameter entry.
inline GradcheckReport gradcheck(const LossBuilder& f, NamedParams params, double eps = 1e-5, double tol = 1e-4) {
  if (!(eps > 1e-8 && eps < 1e-2)) throw std::invalid_argument("gradcheck: eps must lie in (1e-8, 1e-2)");
  GradcheckReport rep;
  const auto grads = tape_gradients(f, params);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor& g = grads.at(i);
    double worst = 0.0;
    for (std::size_t e = 0; e < params[i].second.size(); ++e) {
      const double orig = params[i].second[e];
      params[i].second[e] = orig + eps;
      const double up = evaluate_loss(f, params);
      params[i].second[e] = orig - eps;
      const double down = evaluate_loss(f, params);
      params[i].second[e] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      if (!std::isfinite(g[e])) throw non_finite_error("gradcheck: non-finite gradient in " + params[i].first);
      worst = std::max(worst, relative_error(g[e], numeric));
    }
    rep.per_param.emplace_back(params[i].first, worst);
    rep.max_rel_error = std::max(rep.max_rel_error, worst);
  }
  rep.status = rep.max_rel_error <= tol ? GradcheckReport::Status::passed : GradcheckReport::Status::failed;
  return rep;
}

inline GradcheckReport gradcheck(const LossBuilder& f, NamedParams params, ScoreMode mode, double eps = 1e-5,
                                 double tol = 1e-4) {
  if (mode == ScoreMode::hard) {
    GradcheckReport rep;
    rep.status = GradcheckReport::Status::skipped;
    rep.reason = "non-differentiable mode";
    return rep;
  }
  return gradcheck(f, std::move(params), eps, tol);
}

}  // namespace ihalab
