#pragma once

// Standard multi-head attention and its score variants (softmax, linear,
// hard/argmax), masks, and rotary position rotation.

#include <cmath>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "rng.hpp"
#include "tensor.hpp"

namespace ihalab {

enum class ScoreMode { softmax, linear, hard };
enum class MaskMode { none, causal };

inline std::string to_string(ScoreMode m) {
  switch (m) {
    case ScoreMode::softmax: return "softmax";
    case ScoreMode::linear: return "linear";
    case ScoreMode::hard: return "hard";
  }
  return "?";
}

struct AttentionConfig {
  std::size_t N = 1;  // sequence length
  std::size_t D = 1;  // model width
  std::size_t H = 1;  // heads
  std::size_t d = 1;  // per-head width, D / H
  std::size_t P = 1;  // pseudo-heads per head; 1 for plain MHA
  ScoreMode score_mode = ScoreMode::softmax;
  MaskMode mask_mode = MaskMode::none;
  std::optional<std::size_t> window;   // in original tokens
  std::optional<double> rotary_theta;  // rotary positions when set

  static AttentionConfig make(std::size_t N, std::size_t H, std::size_t d, std::size_t P = 1) {
    AttentionConfig c;
    c.N = N;
    c.H = H;
    c.d = d;
    c.D = H * d;
    c.P = P;
    return c;
  }

  void validate() const {
    if (N == 0 || H == 0 || d == 0) throw std::invalid_argument("attention config: N, H, d must be >= 1");
    if (D != H * d)
      throw std::invalid_argument("attention config: D (" + std::to_string(D) + ") != H*d (" +
                                  std::to_string(H * d) + ")");
    if (P < 1) throw std::invalid_argument("attention config: P must be >= 1");
    if (window && (*window < 1 || *window > N))
      throw std::invalid_argument("attention config: window must lie in [1, N]");
    if (rotary_theta && !(*rotary_theta > 0.0))
      throw std::invalid_argument("attention config: rotary theta must be > 0");
  }
};

// Per-head projections. Query/key width and value width are read from the
// matrices, so the theorem constructions (which use wider heads) share this
// type with the trainable D x d layout.
struct MhaParams {
  std::vector<Tensor> wq, wk, wv;
  std::optional<Tensor> wo;  // absent: output is the plain head concatenation

  std::size_t heads() const noexcept { return wq.size(); }
  std::size_t input_dim() const { return wq.at(0).dim(0); }
  std::size_t qk_dim() const { return wq.at(0).dim(1); }
  std::size_t v_dim() const { return wv.at(0).dim(1); }

  void validate() const {
    if (wq.empty() || wq.size() != wk.size() || wq.size() != wv.size())
      throw dimension_error("MhaParams: need the same non-zero number of Q/K/V matrices");
    for (std::size_t h = 0; h < wq.size(); ++h) {
      require_rank(wq[h], 2, "W_Q");
      require_rank(wk[h], 2, "W_K");
      require_rank(wv[h], 2, "W_V");
      if (wq[h].shape() != wq[0].shape() || wk[h].shape() != wq[0].shape())
        throw dimension_error("MhaParams: head " + std::to_string(h) + " W_Q/W_K shape " +
                             shape_str(wq[h].shape()) + "/" + shape_str(wk[h].shape()) +
                             " differs from " + shape_str(wq[0].shape()));
      if (wv[h].shape() != wv[0].shape() || wv[h].dim(0) != input_dim())
        throw dimension_error("MhaParams: head " + std::to_string(h) + " W_V shape " +
                             shape_str(wv[h].shape()));
    }
    if (wo) {
      require_rank(*wo, 2, "W_O");
      if (wo->dim(0) != heads() * v_dim())
        throw dimension_error("MhaParams: W_O " + shape_str(wo->shape()) + " vs concat width " +
                             std::to_string(heads() * v_dim()));
    }
  }

  void validate(const AttentionConfig& cfg) const {
    validate();
    if (heads() != cfg.H || input_dim() != cfg.D || qk_dim() != cfg.d || v_dim() != cfg.d)
      throw dimension_error("MhaParams do not match config (H=" + std::to_string(cfg.H) +
                           ", D=" + std::to_string(cfg.D) + ", d=" + std::to_string(cfg.d) + ")");
    if (wo && wo->shape() != Shape{cfg.D, cfg.D}) throw dimension_error("W_O must be D x D");
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (std::size_t h = 0; h < heads(); ++h) n += wq[h].size() + wk[h].size() + wv[h].size();
    if (wo) n += wo->size();
    return n;
  }

  static MhaParams random(std::size_t H, std::size_t d, CounterRng& rng, bool with_output = true) {
    const std::size_t D = H * d;
    const double s = 1.0 / std::sqrt(static_cast<double>(D));
    MhaParams p;
    for (std::size_t h = 0; h < H; ++h) {
      p.wq.push_back(random_normal({D, d}, rng, s));
      p.wk.push_back(random_normal({D, d}, rng, s));
      p.wv.push_back(random_normal({D, d}, rng, s));
    }
    if (with_output) p.wo = random_normal({D, D}, rng, s);
    return p;
  }
};

// Row-wise uniform distribution over the argmax set of visible entries.
inline Tensor hard_attention_rows(const Tensor& s, const BoolMatrix* mask = nullptr) {
  require_rank(s, 2, "hard_attention_rows");
  const std::size_t m = s.dim(0), n = s.dim(1);
  if (mask && (mask->rows() != m || mask->cols() != n))
    throw dimension_error("hard_attention_rows mask shape mismatch");
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    bool any = false;
    double mx = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (mask && !(*mask)(i, j)) continue;
      if (!any || s(i, j) > mx) mx = s(i, j);
      any = true;
    }
    if (!any) throw degenerate_row_error("hard attention row " + std::to_string(i) + " is fully masked");
    std::size_t ties = 0;
    for (std::size_t j = 0; j < n; ++j)
      if ((!mask || (*mask)(i, j)) && s(i, j) == mx) ++ties;
    const double w = 1.0 / static_cast<double>(ties);
    for (std::size_t j = 0; j < n; ++j)
      if ((!mask || (*mask)(i, j)) && s(i, j) == mx) out(i, j) = w;
  }
  return out;
}

inline Tensor hard_attention_rows(const Tensor& s, const BoolMatrix& mask) {
  return hard_attention_rows(s, &mask);
}

// (i, j) visible iff j <= i (when causal) and i - j < window.
inline BoolMatrix sliding_window_mask(std::size_t Lq, std::size_t Lk, std::size_t window_virtual,
                                      bool causal) {
  if (window_virtual < 1) throw std::invalid_argument("sliding_window_mask: window must be >= 1");
  BoolMatrix m(Lq, Lk);
  for (std::size_t i = 0; i < Lq; ++i)
    for (std::size_t j = 0; j < Lk; ++j) {
      const long long diff = static_cast<long long>(i) - static_cast<long long>(j);
      const bool ok = (!causal || j <= i) && diff < static_cast<long long>(window_virtual);
      m.set(i, j, ok);
    }
  return m;
}

// Mask over virtual tokens v = n*P + p (interleaved numbering). Returns
// nullopt when every entry is visible.
inline std::optional<BoolMatrix> virtual_token_mask(const AttentionConfig& cfg) {
  const std::size_t L = cfg.N * cfg.P;
  const bool causal = cfg.mask_mode == MaskMode::causal;
  if (!causal && !cfg.window) return std::nullopt;
  const std::size_t w = cfg.window ? *cfg.window * cfg.P : L;
  return sliding_window_mask(L, L, w, causal);
}

// Rotary rotation of consecutive pairs (2j, 2j+1) by position * theta^(-2j/d).
inline Tensor rotary_positions(const Tensor& x, double theta, const std::vector<double>& positions) {
  require_rank(x, 2, "rotary_positions");
  const std::size_t L = x.dim(0), d = x.dim(1);
  if (d % 2 != 0) throw dimension_error("rotary_positions: odd width " + std::to_string(d));
  if (positions.size() != L) throw dimension_error("rotary_positions: positions length mismatch");
  Tensor out({L, d});
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t j = 0; j < d / 2; ++j) {
      const double freq = std::pow(theta, -2.0 * static_cast<double>(j) / static_cast<double>(d));
      const double a = positions[i] * freq;
      const double c = std::cos(a), s = std::sin(a);
      const double x0 = x(i, 2 * j), x1 = x(i, 2 * j + 1);
      out(i, 2 * j) = x0 * c - x1 * s;
      out(i, 2 * j + 1) = x0 * s + x1 * c;
    }
  return out;
}

inline std::vector<double> iota_positions(std::size_t L) {
  std::vector<double> p(L);
  for (std::size_t i = 0; i < L; ++i) p[i] = static_cast<double>(i);
  return p;
}

struct AttendOptions {
  ScoreMode mode = ScoreMode::softmax;
  double scale = 1.0;
  const BoolMatrix* mask = nullptr;
};

// Weight matrix for one head: softmax/hard/linear of scale * q k^T.
inline Tensor attention_weights(const Tensor& q, const Tensor& k, const AttendOptions& opt) {
  Tensor s = matmul(q, transpose(k));
  if (opt.mask && (opt.mask->rows() != s.dim(0) || opt.mask->cols() != s.dim(1)))
    throw dimension_error("attention mask " + std::to_string(opt.mask->rows()) + "x" +
                         std::to_string(opt.mask->cols()) + " vs scores " + shape_str(s.shape()));
  if (opt.scale != 1.0)
    for (auto& v : s.data()) v *= opt.scale;
  switch (opt.mode) {
    case ScoreMode::softmax: return softmax_rows(s, opt.mask);
    case ScoreMode::hard: return hard_attention_rows(s, opt.mask);
    case ScoreMode::linear:
      if (opt.mask)
        for (std::size_t i = 0; i < s.dim(0); ++i)
          for (std::size_t j = 0; j < s.dim(1); ++j)
            if (!(*opt.mask)(i, j)) s(i, j) = 0.0;
      return s;
  }
  return s;
}

inline Tensor attend(const Tensor& q, const Tensor& k, const Tensor& v, const AttendOptions& opt) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.dim(1) != k.dim(1) || k.dim(0) != v.dim(0))
    throw dimension_error("attend: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) +
                         ", v " + shape_str(v.shape()));
  if (opt.mode != ScoreMode::hard) return matmul(attention_weights(q, k, opt), v);
  // Hard: sum the tied value rows, then divide, so integer payloads stay exact.
  const Tensor w = attention_weights(q, k, opt);
  Tensor out({w.dim(0), v.dim(1)});
  for (std::size_t i = 0; i < w.dim(0); ++i) {
    std::size_t ties = 0;
    for (std::size_t j = 0; j < w.dim(1); ++j) {
      if (w(i, j) == 0.0) continue;
      ++ties;
      for (std::size_t c = 0; c < v.dim(1); ++c) out(i, c) += v(j, c);
    }
    for (std::size_t c = 0; c < v.dim(1); ++c) out(i, c) /= static_cast<double>(ties);
  }
  return out;
}

// Scale used by a score mode: 1/sqrt(d) for softmax and hard, none for linear.
inline double score_scale(ScoreMode mode, std::size_t d) {
  return mode == ScoreMode::linear ? 1.0 : 1.0 / std::sqrt(static_cast<double>(d));
}

// X_hat W_Q W_K^T X_hat^T, the linear score operator with no scaling.
inline Tensor linear_attention_matrix(const Tensor& x_hat, const Tensor& wq, const Tensor& wk) {
  return matmul(matmul(x_hat, wq), transpose(matmul(x_hat, wk)));
}

struct MultiheadOptions {
  ScoreMode mode = ScoreMode::softmax;
  std::optional<double> scale;  // default: score_scale(mode, qk width)
  const BoolMatrix* mask = nullptr;
  std::optional<double> rotary_theta;
};

// Head concatenation [O_1, ..., O_H] followed by W_O when present.
inline Tensor multihead_attention(const Tensor& x, const MhaParams& p, const MultiheadOptions& opt) {
  p.validate();
  require_rank(x, 2, "multihead input");
  if (x.dim(1) != p.input_dim())
    throw dimension_error("multihead input " + shape_str(x.shape()) + " vs W_Q rows " +
                         std::to_string(p.input_dim()));
  AttendOptions ao;
  ao.mode = opt.mode;
  ao.scale = opt.scale.value_or(score_scale(opt.mode, p.qk_dim()));
  ao.mask = opt.mask;
  const auto pos = iota_positions(x.dim(0));
  std::vector<Tensor> outs;
  outs.reserve(p.heads());
  for (std::size_t h = 0; h < p.heads(); ++h) {
    Tensor q = matmul(x, p.wq[h]);
    Tensor k = matmul(x, p.wk[h]);
    if (opt.rotary_theta) {
      q = rotary_positions(q, *opt.rotary_theta, pos);
      k = rotary_positions(k, *opt.rotary_theta, pos);
    }
    outs.push_back(attend(q, k, matmul(x, p.wv[h]), ao));
  }
  Tensor cat = hconcat(outs);
  return p.wo ? matmul(cat, *p.wo) : cat;
}

inline Tensor mha_forward(const Tensor& x, const MhaParams& params, const AttentionConfig& cfg) {
  cfg.validate();
  if (cfg.P != 1) throw std::invalid_argument("mha_forward: config has P != 1");
  if (x.rank() != 2 || x.dim(0) != cfg.N || x.dim(1) != cfg.D)
    throw dimension_error("mha_forward: input " + shape_str(x.shape()) + " vs config N=" +
                         std::to_string(cfg.N) + ", D=" + std::to_string(cfg.D));
  params.validate(cfg);
  const auto mask = virtual_token_mask(cfg);
  MultiheadOptions opt;
  opt.mode = cfg.score_mode;
  opt.mask = mask ? &*mask : nullptr;
  opt.rotary_theta = cfg.rotary_theta;
  return multihead_attention(x, params, opt);
}

}  // namespace ihalab
