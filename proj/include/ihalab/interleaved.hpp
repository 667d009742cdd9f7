#pragma once

// Interleaved Head Attention. Each head builds P pseudo queries/keys/values
// as mixtures of all H base projections, attends over the length N*P virtual
// sequence, and a collapse map folds the H*P pseudo outputs back to H heads.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "attention.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace ihalab {

enum class Ordering { interleaved, pseudo_major };
enum class Projection { query, key, value };

struct IhaParams {
  MhaParams base;
  Tensor alpha_q, alpha_k, alpha_v;  // [H, H, P], index (source m, target h, pseudo j)
  Tensor collapse;                   // [H, H*P]; column (h', j) -> h'*P + j

  std::size_t heads() const { return base.heads(); }
  std::size_t pseudo() const { return alpha_q.dim(2); }

  void validate() const {
    base.validate();
    const std::size_t H = heads();
    require_rank(alpha_q, 3, "alpha_q");
    const std::size_t P = alpha_q.dim(2);
    const Shape mix{H, H, P};
    if (alpha_q.shape() != mix || alpha_k.shape() != mix || alpha_v.shape() != mix)
      throw dimension_error("IhaParams: mixing tensors must be " + shape_str(mix));
    if (collapse.shape() != Shape{H, H * P})
      throw dimension_error("IhaParams: collapse " + shape_str(collapse.shape()) + " must be " +
                           shape_str({H, H * P}));
  }

  // alpha^{Q,K,V} plus R: 3 H^2 P + H * HP.
  std::size_t mixing_param_count() const {
    return alpha_q.size() + alpha_k.size() + alpha_v.size() + collapse.size();
  }

  std::size_t param_count() const { return base.param_count() + mixing_param_count(); }

  const Tensor& alpha(Projection which) const {
    switch (which) {
      case Projection::query: return alpha_q;
      case Projection::key: return alpha_k;
      case Projection::value: return alpha_v;
    }
    return alpha_q;
  }
};

// Per-head collapse R[H, P] (head h reads only its own pseudo block) lifted
// to the general [H, H*P] map.
inline Tensor block_diagonal_collapse(const Tensor& r) {
  require_rank(r, 2, "block_diagonal_collapse");
  const std::size_t H = r.dim(0), P = r.dim(1);
  Tensor out({H, H * P});
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t p = 0; p < P; ++p) out(h, h * P + p) = r(h, p);
  return out;
}

// alpha[m, h, j] = 1[m == h] for every j.
inline Tensor identity_router(std::size_t H, std::size_t P) {
  Tensor a({H, H, P});
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t p = 0; p < P; ++p) a(h, h, p) = 1.0;
  return a;
}

// Stack per-head projections x W^(m) into [N, H, w].
inline Tensor project_heads(const Tensor& x, const std::vector<Tensor>& w) {
  const std::size_t N = x.dim(0), H = w.size(), d = w.at(0).dim(1);
  Tensor out({N, H, d});
  for (std::size_t m = 0; m < H; ++m) {
    const Tensor pm = matmul(x, w[m]);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t k = 0; k < d; ++k) out(n, m, k) = pm(n, k);
  }
  return out;
}

// Entry (h, j) = sum_m alpha[m, h, j] * x W^(m); result [H, P, N, w].
inline Tensor mix_pseudo(const Tensor& x, const IhaParams& params, Projection which) {
  params.validate();
  require_rank(x, 2, "mix_pseudo input");
  if (x.dim(1) != params.base.input_dim())
    throw dimension_error("mix_pseudo: input " + shape_str(x.shape()) + " vs projection rows " +
                         std::to_string(params.base.input_dim()));
  const auto& w = which == Projection::query ? params.base.wq
                  : which == Projection::key ? params.base.wk
                                             : params.base.wv;
  return contract(Contraction::mix_heads, params.alpha(which), project_heads(x, w));
}

// [H, P, N, d] -> [H, N*P, d]; virtual token n*P + p is pseudo p of position n.
inline Tensor merge_interleaved(const Tensor& t) {
  require_rank(t, 4, "merge_interleaved");
  const std::size_t H = t.dim(0), P = t.dim(1), N = t.dim(2), d = t.dim(3);
  Tensor out({H, N * P, d});
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t p = 0; p < P; ++p)
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t k = 0; k < d; ++k) out(h, n * P + p, k) = t(h, p, n, k);
  return out;
}

inline Tensor unmerge_interleaved(const Tensor& t, std::size_t P) {
  require_rank(t, 3, "unmerge_interleaved");
  const std::size_t H = t.dim(0), L = t.dim(1), d = t.dim(2);
  if (P == 0 || L % P != 0) throw dimension_error("unmerge_interleaved: length not divisible by P");
  const std::size_t N = L / P;
  Tensor out({H, P, N, d});
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t p = 0; p < P; ++p)
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t k = 0; k < d; ++k) out(h, p, n, k) = t(h, n * P + p, k);
  return out;
}

// [H, P, N, d] -> [H, P*N, d]; virtual token p*N + n is pseudo p of position n.
inline Tensor stack_pseudo_major(const Tensor& t) {
  require_rank(t, 4, "stack_pseudo_major");
  return t.reshape({t.dim(0), t.dim(1) * t.dim(2), t.dim(3)});
}

inline Tensor unstack_pseudo_major(const Tensor& t, std::size_t P) {
  require_rank(t, 3, "unstack_pseudo_major");
  if (P == 0 || t.dim(1) % P != 0) throw dimension_error("unstack_pseudo_major: length not divisible by P");
  return t.reshape({t.dim(0), P, t.dim(1) / P, t.dim(2)});
}

// Map from a layout index to the interleaved virtual index n*P + p.
inline std::size_t to_interleaved_index(Ordering o, std::size_t idx, std::size_t N, std::size_t P) {
  if (o == Ordering::interleaved) return idx;
  const std::size_t p = idx / N, n = idx % N;
  return n * P + p;
}

// Mask defined on interleaved virtual indices, re-expressed in `o`'s layout.
inline BoolMatrix reorder_mask(const BoolMatrix& interleaved_mask, Ordering o, std::size_t N,
                               std::size_t P) {
  if (o == Ordering::interleaved) return interleaved_mask;
  const std::size_t L = N * P;
  BoolMatrix m(L, L);
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t j = 0; j < L; ++j)
      m.set(i, j, interleaved_mask(to_interleaved_index(o, i, N, P), to_interleaved_index(o, j, N, P)));
  return m;
}

struct IhaOptions {
  ScoreMode mode = ScoreMode::softmax;
  std::optional<double> scale;  // default: score_scale(mode, qk width)
  Ordering ordering = Ordering::interleaved;
  const BoolMatrix* interleaved_mask = nullptr;  // over n*P + p indices
  std::optional<double> rotary_theta;            // applied at layout positions
};

// Collapsed head outputs [H, N, w_v] before concatenation.
inline Tensor iha_head_outputs(const Tensor& x, const IhaParams& params, const IhaOptions& opt) {
  params.validate();
  const std::size_t H = params.heads(), P = params.pseudo(), N = x.dim(0);
  const Tensor qt = mix_pseudo(x, params, Projection::query);
  const Tensor kt = mix_pseudo(x, params, Projection::key);
  const Tensor vt = mix_pseudo(x, params, Projection::value);
  auto order = [&](const Tensor& t) {
    return opt.ordering == Ordering::interleaved ? merge_interleaved(t) : stack_pseudo_major(t);
  };
  const Tensor qb = order(qt), kb = order(kt), vb = order(vt);
  const std::size_t L = N * P, dk = qb.dim(2), dv = vb.dim(2);

  std::optional<BoolMatrix> mask;
  if (opt.interleaved_mask) {
    if (opt.interleaved_mask->rows() != L || opt.interleaved_mask->cols() != L)
      throw dimension_error("iha mask must be (N*P) x (N*P)");
    mask = reorder_mask(*opt.interleaved_mask, opt.ordering, N, P);
  }
  AttendOptions ao;
  ao.mode = opt.mode;
  ao.scale = opt.scale.value_or(score_scale(opt.mode, dk));
  ao.mask = mask ? &*mask : nullptr;
  const auto pos = iota_positions(L);

  Tensor ob({H, L, dv});
  for (std::size_t h = 0; h < H; ++h) {
    Tensor q({L, dk}), k({L, dk}), v({L, dv});
    for (std::size_t i = 0; i < L; ++i) {
      for (std::size_t c = 0; c < dk; ++c) {
        q(i, c) = qb(h, i, c);
        k(i, c) = kb(h, i, c);
      }
      for (std::size_t c = 0; c < dv; ++c) v(i, c) = vb(h, i, c);
    }
    if (opt.rotary_theta) {
      q = rotary_positions(q, *opt.rotary_theta, pos);
      k = rotary_positions(k, *opt.rotary_theta, pos);
    }
    const Tensor o = attend(q, k, v, ao);
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t c = 0; c < dv; ++c) ob(h, i, c) = o(i, c);
  }
  const Tensor hpnd =
      opt.ordering == Ordering::interleaved ? unmerge_interleaved(ob, P) : unstack_pseudo_major(ob, P);
  // (H, P, N, d) -> (H, N, P, d) for the collapse contraction.
  Tensor hnpd({H, N, P, dv});
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t p = 0; p < P; ++p)
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < dv; ++c) hnpd(h, n, p, c) = hpnd(h, p, n, c);
  return contract(Contraction::general_collapse, params.collapse, hnpd);
}

// [O_1, ..., O_H] (N x H*w_v), then W_O when present.
inline Tensor concat_heads(const Tensor& hnd) {
  const std::size_t H = hnd.dim(0), N = hnd.dim(1), d = hnd.dim(2);
  Tensor out({N, H * d});
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < d; ++c) out(n, h * d + c) = hnd(h, n, c);
  return out;
}

inline Tensor iha_attention(const Tensor& x, const IhaParams& params, const IhaOptions& opt) {
  const Tensor cat = concat_heads(iha_head_outputs(x, params, opt));
  return params.base.wo ? matmul(cat, *params.base.wo) : cat;
}

inline Tensor iha_forward(const Tensor& x, const IhaParams& params, const AttentionConfig& cfg,
                          Ordering ordering = Ordering::interleaved) {
  cfg.validate();
  if (x.rank() != 2 || x.dim(0) != cfg.N || x.dim(1) != cfg.D)
    throw dimension_error("iha_forward: input " + shape_str(x.shape()) + " vs config N=" +
                         std::to_string(cfg.N) + ", D=" + std::to_string(cfg.D));
  params.validate();
  params.base.validate(cfg);
  if (params.heads() != cfg.H || params.pseudo() != cfg.P)
    throw dimension_error("iha_forward: params H/P do not match config");
  const auto mask = virtual_token_mask(cfg);
  IhaOptions opt;
  opt.mode = cfg.score_mode;
  opt.ordering = ordering;
  opt.interleaved_mask = mask ? &*mask : nullptr;
  opt.rotary_theta = cfg.rotary_theta;
  return iha_attention(x, params, opt);
}

// Identity routers everywhere and a collapse that keeps pseudo 1 of each
// head: computes exactly the wrapped MHA.
inline IhaParams embed_mha_as_iha(const MhaParams& m, std::size_t P) {
  if (P < 1) throw std::invalid_argument("embed_mha_as_iha: P must be >= 1");
  const std::size_t H = m.heads();
  IhaParams p;
  p.base = m;
  p.alpha_q = identity_router(H, P);
  p.alpha_k = identity_router(H, P);
  p.alpha_v = identity_router(H, P);
  p.collapse = Tensor({H, H * P});
  for (std::size_t h = 0; h < H; ++h) p.collapse(h, h * P) = 1.0;
  return p;
}

// P = 2 configuration with sign-flipped second pseudo channels. On a
// repeated-token input 1 x^T each head returns tanh(<q,k>/sqrt(d)) v, which
// is not linear in x.
inline IhaParams strictness_witness(const MhaParams& base) {
  const std::size_t H = base.heads(), P = 2;
  IhaParams p;
  p.base = base;
  p.alpha_q = Tensor({H, H, P});
  p.alpha_k = Tensor({H, H, P});
  p.alpha_v = Tensor({H, H, P});
  for (std::size_t h = 0; h < H; ++h) {
    p.alpha_q(h, h, 0) = p.alpha_k(h, h, 0) = p.alpha_v(h, h, 0) = 1.0;
    p.alpha_q(h, h, 1) = p.alpha_k(h, h, 1) = p.alpha_v(h, h, 1) = -1.0;
  }
  p.collapse = Tensor({H, H * P});
  for (std::size_t h = 0; h < H; ++h) p.collapse(h, h * P) = 1.0;
  return p;
}

inline IhaParams strictness_witness(std::size_t H, std::size_t d, std::uint64_t seed = 0) {
  if (H < 1 || d < 1) throw std::invalid_argument("strictness_witness: H and d must be >= 1");
  CounterRng rng = CounterRng(seed).substream("strictness-witness");
  return strictness_witness(MhaParams::random(H, d, rng));
}

inline IhaParams random_iha_params(std::size_t H, std::size_t d, std::size_t P, CounterRng& rng) {
  IhaParams p;
  p.base = MhaParams::random(H, d, rng);
  p.alpha_q = random_normal({H, H, P}, rng, 0.7);
  p.alpha_k = random_normal({H, H, P}, rng, 0.7);
  p.alpha_v = random_normal({H, H, P}, rng, 0.7);
  p.collapse = random_normal({H, H * P}, rng, 0.7);
  return p;
}

}  // namespace ihalab
