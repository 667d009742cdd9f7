#pragma once

// Explicit weight constructions for the expressivity results (polynomial
// filter banks, the CPM-3 cyclic-shift workspace) together with brute-force
// oracles they are checked against.

#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "attention.hpp"
#include "interleaved.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace ihalab {

// How the constructed parameter tally is judged against the closed form.
enum class ParamCheck { exact, at_most, reported };

inline std::string to_string(ParamCheck c) {
  switch (c) {
    case ParamCheck::exact: return "exact";
    case ParamCheck::at_most: return "at_most";
    case ParamCheck::reported: return "reported";
  }
  return "?";
}

inline ParamCheck param_check_from_string(const std::string& s) {
  if (s == "exact") return ParamCheck::exact;
  if (s == "at_most") return ParamCheck::at_most;
  if (s == "reported") return ParamCheck::reported;
  throw std::invalid_argument("unknown param check '" + s + "'");
}

struct ConstructionReport {
  std::string name;
  double max_abs_error = 0.0;
  double tolerance = 1e-9;
  std::int64_t param_count_constructed = 0;
  std::int64_t param_count_formula = 0;
  ParamCheck param_check = ParamCheck::exact;
  bool passed = false;
  std::string details;

  bool params_ok() const {
    switch (param_check) {
      case ParamCheck::exact: return param_count_constructed == param_count_formula;
      case ParamCheck::at_most: return param_count_constructed <= param_count_formula;
      case ParamCheck::reported: return true;
    }
    return false;
  }

  // passed = error within tolerance and the parameter relation holds.
  void finalize(bool extra_condition = true) {
    passed = std::isfinite(max_abs_error) && max_abs_error <= tolerance && params_ok() && extra_condition;
  }
};

inline void to_json(nlohmann::json& j, const ConstructionReport& r) {
  j = nlohmann::json{{"name", r.name},
                     {"max_abs_error", r.max_abs_error},
                     {"tolerance", r.tolerance},
                     {"param_count_constructed", r.param_count_constructed},
                     {"param_count_formula", r.param_count_formula},
                     {"param_check", to_string(r.param_check)},
                     {"passed", r.passed},
                     {"details", r.details}};
}

inline void from_json(const nlohmann::json& j, ConstructionReport& r) {
  j.at("name").get_to(r.name);
  j.at("max_abs_error").get_to(r.max_abs_error);
  j.at("tolerance").get_to(r.tolerance);
  j.at("param_count_constructed").get_to(r.param_count_constructed);
  j.at("param_count_formula").get_to(r.param_count_formula);
  r.param_check = param_check_from_string(j.at("param_check").get<std::string>());
  j.at("passed").get_to(r.passed);
  j.at("details").get_to(r.details);
}

// Mismatches between a run and stored golden reports; floats within float_tol.
inline std::vector<std::string> compare_to_golden(const std::vector<ConstructionReport>& got,
                                                  const std::vector<ConstructionReport>& golden,
                                                  double float_tol = 1e-12) {
  std::vector<std::string> diffs;
  if (got.size() != golden.size()) {
    diffs.push_back("report count " + std::to_string(got.size()) + " vs golden " +
                    std::to_string(golden.size()));
    return diffs;
  }
  for (std::size_t i = 0; i < got.size(); ++i) {
    const auto& a = got[i];
    const auto& b = golden[i];
    auto note = [&](const std::string& what) { diffs.push_back(b.name + ": " + what); };
    if (a.name != b.name) note("name " + a.name);
    if (std::abs(a.max_abs_error - b.max_abs_error) > float_tol) note("max_abs_error differs");
    if (std::abs(a.tolerance - b.tolerance) > float_tol) note("tolerance differs");
    if (a.param_count_constructed != b.param_count_constructed) note("constructed count differs");
    if (a.param_count_formula != b.param_count_formula) note("formula count differs");
    if (a.param_check != b.param_check) note("param check differs");
    if (a.passed != b.passed) note("pass/fail differs");
  }
  return diffs;
}

inline std::size_t ceil_sqrt(std::size_t k) {
  std::size_t h = static_cast<std::size_t>(std::sqrt(static_cast<double>(k)));
  while (h * h < k) ++h;
  while (h > 0 && (h - 1) * (h - 1) >= k) --h;
  return h;
}

// ---------------------------------------------------------------------------
// Polynomial filter banks

// [X, AX, ..., A^{k-1} X] by repeated multiplication.
inline Tensor polyfilter_oracle(const Tensor& a, const Tensor& x, std::size_t k) {
  require_rank(a, 2, "polyfilter A");
  require_rank(x, 2, "polyfilter X");
  if (k < 1) throw std::invalid_argument("polyfilter_oracle: k must be >= 1");
  if (a.dim(0) != a.dim(1) || a.dim(1) != x.dim(0))
    throw dimension_error("polyfilter_oracle: A " + shape_str(a.shape()) + " vs X " + shape_str(x.shape()));
  std::vector<Tensor> blocks{x};
  for (std::size_t i = 1; i < k; ++i) blocks.push_back(matmul(a, blocks.back()));
  return hconcat(blocks);
}

// X_hat = [X, I_N].
inline Tensor augment_with_identity(const Tensor& x) {
  return hconcat({x, Tensor::identity(x.dim(0))});
}

// [0_{rows x cols}; block] stacked above.
inline Tensor zero_pad_top(std::size_t rows, const Tensor& block) {
  return vconcat({Tensor({rows, block.dim(1)}), block});
}

inline std::int64_t mha_polyfilter_formula(std::int64_t N, std::int64_t d, std::int64_t k) {
  return 2 * N * (N + d) * k + d * (N + d) * k;
}

inline std::int64_t iha_polyfilter_formula(std::int64_t N, std::int64_t d, std::int64_t k) {
  const auto h = static_cast<std::int64_t>(ceil_sqrt(static_cast<std::size_t>(k)));
  return 2 * N * (N + d) * h + d * (N + d) * h * h + 4 * h * h * h;
}

struct PolyfilterConstruction {
  Tensor x_hat;
  Tensor output;  // concatenated head outputs
  ConstructionReport report;
};

struct MhaPolyfilter : PolyfilterConstruction {
  MhaParams params;
};

struct IhaPolyfilter : PolyfilterConstruction {
  IhaParams params;
};

namespace detail {
inline void check_polyfilter_pre(const Tensor& a, const Tensor& x, std::size_t k) {
  require_rank(a, 2, "polyfilter A");
  require_rank(x, 2, "polyfilter X");
  const std::size_t N = x.dim(0), d = x.dim(1);
  if (a.dim(0) != N || a.dim(1) != N) throw dimension_error("polyfilter: A must be N x N");
  if (k < 1) throw std::invalid_argument("polyfilter: k must be >= 1");
  if (!(d < N)) throw std::invalid_argument("polyfilter: requires d < N");
  if (k * d > N) throw std::invalid_argument("polyfilter: requires k*d <= N");
}
}  // namespace detail

// k linear-attention heads on [X, I]; head i realises A^i X.
inline MhaPolyfilter build_mha_polyfilter(const Tensor& a, const Tensor& x, std::size_t k) {
  detail::check_polyfilter_pre(a, x, k);
  const std::size_t N = x.dim(0), d = x.dim(1);
  MhaPolyfilter c;
  const Tensor wv = vconcat({Tensor::identity(d), Tensor({N, d})});
  const Tensor wk = zero_pad_top(d, Tensor::identity(N));
  Tensor power = Tensor::identity(N);
  for (std::size_t i = 0; i < k; ++i) {
    c.params.wq.push_back(zero_pad_top(d, power));
    c.params.wk.push_back(wk);
    c.params.wv.push_back(wv);
    power = matmul(power, a);
  }
  c.x_hat = augment_with_identity(x);
  MultiheadOptions opt;
  opt.mode = ScoreMode::linear;
  c.output = multihead_attention(c.x_hat, c.params, opt);

  auto& r = c.report;
  r.name = "polyfilter/mha N=" + std::to_string(N) + " d=" + std::to_string(d) + " k=" + std::to_string(k);
  r.max_abs_error = max_abs_diff(c.output, polyfilter_oracle(a, x, k));
  r.param_count_constructed = static_cast<std::int64_t>(c.params.param_count());
  r.param_count_formula = mha_polyfilter_formula(N, d, k);
  r.param_check = ParamCheck::exact;
  r.details = "heads=" + std::to_string(k) + " linear attention, tolerance 1e-9";
  r.finalize();
  return c;
}

// ceil(sqrt(k)) heads with P = H pseudo-heads; head h yields the block
// [A^{(h-1)H} X, ..., A^{(h-1)H+H-1} X].
inline IhaPolyfilter build_iha_polyfilter(const Tensor& a, const Tensor& x, std::size_t k) {
  detail::check_polyfilter_pre(a, x, k);
  const std::size_t N = x.dim(0), d = x.dim(1);
  const std::size_t H = ceil_sqrt(k), P = H;
  IhaPolyfilter c;
  const Tensor a_pow_h = matrix_power(a, H);
  Tensor q_power = Tensor::identity(N);  // A^{(m-1)H}
  Tensor k_power = Tensor::identity(N);  // A^{m-1}
  for (std::size_t m = 0; m < H; ++m) {
    c.params.base.wq.push_back(zero_pad_top(d, q_power));
    c.params.base.wk.push_back(zero_pad_top(d, transpose(k_power)));
    Tensor route({d, d * H});
    for (std::size_t i = 0; i < d; ++i) route(i, m * d + i) = 1.0;
    c.params.base.wv.push_back(vconcat({route, Tensor({N, d * H})}));
    q_power = matmul(q_power, a_pow_h);
    k_power = matmul(k_power, a);
  }
  c.params.alpha_q = Tensor({H, H, P});
  c.params.alpha_k = Tensor({H, H, P});
  c.params.alpha_v = Tensor({H, H, P});
  for (std::size_t m = 0; m < H; ++m)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t j = 0; j < P; ++j) {
        c.params.alpha_q(m, h, j) = (m == h && j == 0) ? 1.0 : 0.0;
        c.params.alpha_k(m, h, j) = (m == j) ? 1.0 : 0.0;
        c.params.alpha_v(m, h, j) = (m == j) ? 1.0 : 0.0;
      }
  c.params.collapse = Tensor({H, H * P});
  for (std::size_t h = 0; h < H; ++h) c.params.collapse(h, h * P) = 1.0;

  c.x_hat = augment_with_identity(x);
  IhaOptions opt;
  opt.mode = ScoreMode::linear;
  opt.ordering = Ordering::pseudo_major;
  c.output = iha_attention(c.x_hat, c.params, opt);

  bool padding_finite = true;
  for (double v : c.output.data()) padding_finite = padding_finite && std::isfinite(v);

  auto& r = c.report;
  r.name = "polyfilter/iha N=" + std::to_string(N) + " d=" + std::to_string(d) + " k=" + std::to_string(k);
  r.max_abs_error = max_abs_diff(slice_cols(c.output, 0, k * d), polyfilter_oracle(a, x, k));
  r.param_count_constructed = static_cast<std::int64_t>(c.params.param_count());
  r.param_count_formula = iha_polyfilter_formula(N, d, k);
  r.param_check = ParamCheck::exact;
  r.details = "heads=" + std::to_string(H) + " pseudo=" + std::to_string(P) + " padding_blocks=" +
              std::to_string(H * H - k) + " linear attention, tolerance 1e-9";
  r.finalize(padding_finite);
  return c;
}

// Numerical rank of the filter bank against the k*d bound, over random
// instances with a row-normalised random adjacency.
inline ConstructionReport rank_bound_check(std::size_t N, std::size_t d, std::size_t k, std::size_t trials,
                                           std::uint64_t seed, double tol = 1e-9) {
  if (k * d > N) throw std::invalid_argument("rank_bound_check: requires k*d <= N");
  CounterRng base = CounterRng(seed).substream("rank-bound");
  std::size_t worst = 0;
  for (std::size_t t = 0; t < trials; ++t) {
    CounterRng rng = base.substream(t);
    const Tensor a = random_uniform({N, N}, rng);
    const Tensor x = random_uniform({N, d}, rng);
    worst = std::max(worst, numerical_rank(polyfilter_oracle(a, x, k), tol));
  }
  ConstructionReport r;
  r.name = "rank N=" + std::to_string(N) + " d=" + std::to_string(d) + " k=" + std::to_string(k);
  r.max_abs_error = 0.0;
  r.param_check = ParamCheck::reported;
  r.details = "max rank " + std::to_string(worst) + " over " + std::to_string(trials) +
              " trials, bound k*d=" + std::to_string(k * d);
  r.param_count_constructed = static_cast<std::int64_t>(worst);
  r.param_count_formula = static_cast<std::int64_t>(k * d);
  r.finalize(worst <= k * d);
  return r;
}

// ---------------------------------------------------------------------------
// CPM-3

using TokenSeq = std::vector<std::int64_t>;

// P^t with (P^t X)_i = x_{(i+t) mod n}.
inline Tensor cyclic_shift(std::size_t n, std::size_t t) {
  if (n == 0) throw std::invalid_argument("cyclic_shift: n must be >= 1");
  Tensor p({n, n});
  for (std::size_t i = 0; i < n; ++i) p(i, (i + t) % n) = 1.0;
  return p;
}

// Row i lists x_i, x_{i+1}, ... cyclically.
inline Tensor cyclic_shift_workspace_oracle(const TokenSeq& x) {
  const std::size_t n = x.size();
  if (n == 0) throw std::invalid_argument("cyclic_shift_workspace_oracle: empty sequence");
  Tensor w({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t t = 0; t < n; ++t) w(i, t) = static_cast<double>(x[(i + t) % n]);
  return w;
}

// Ordered pairs (j1, j2), j1 == j2 included, with x_i + G x_j1 + x_j2 = 0 mod M.
inline TokenSeq cpm3_count_oracle(const TokenSeq& x, std::int64_t G, std::int64_t M) {
  if (M < 1) throw std::invalid_argument("cpm3: M must be >= 1");
  if (G <= 2 * M) throw std::invalid_argument("cpm3: requires G > 2M");
  TokenSeq out(x.size(), 0);
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j1 = 0; j1 < x.size(); ++j1)
      for (std::size_t j2 = 0; j2 < x.size(); ++j2) {
        const std::int64_t v = x[i] + G * x[j1] + x[j2];
        if (((v % M) + M) % M == 0) ++out[i];
      }
  return out;
}

inline Tensor cpm3_input(const TokenSeq& x) {
  Tensor col({x.size(), 1});
  for (std::size_t i = 0; i < x.size(); ++i) col(i, 0) = static_cast<double>(x[i]);
  return augment_with_identity(col);
}

inline std::int64_t cpm3_mha_lower_bound(std::int64_t n) { return 3 * n * n * n + n * n * (n - 1) + n * n; }

inline std::int64_t cpm3_iha_upper_bound(std::int64_t n) {
  const double nn = static_cast<double>(n);
  return static_cast<std::int64_t>(std::floor(37.0 * nn * nn * std::sqrt(nn) + nn * nn * (nn - 1) + nn * nn));
}

// Position-wise two-layer MLP over a workspace row: hidden unit (t1, t2)
// forms w[0] + G w[t1] + w[t2], the activation fires iff that is 0 mod M,
// and the output layer sums the indicators.
struct Cpm3Mlp {
  std::size_t n = 0;
  std::int64_t G = 0, M = 1;
  Tensor w1;  // [workspace width, n*n]
  Tensor w2;  // [n*n, 1]

  std::size_t param_count() const { return w1.size() + w2.size(); }
};

inline Cpm3Mlp make_cpm3_mlp(std::size_t n, std::size_t workspace_width, std::int64_t G, std::int64_t M) {
  if (M < 1) throw std::invalid_argument("cpm3: M must be >= 1");
  if (G <= 2 * M) throw std::invalid_argument("cpm3: requires G > 2M");
  if (workspace_width < n) throw dimension_error("cpm3 mlp: workspace narrower than n");
  Cpm3Mlp m;
  m.n = n;
  m.G = G;
  m.M = M;
  m.w1 = Tensor({workspace_width, n * n});
  m.w2 = Tensor({n * n, 1}, 1.0);
  for (std::size_t t1 = 0; t1 < n; ++t1)
    for (std::size_t t2 = 0; t2 < n; ++t2) {
      const std::size_t u = t1 * n + t2;
      m.w1(0, u) += 1.0;
      m.w1(t1, u) += static_cast<double>(G);
      m.w1(t2, u) += 1.0;
    }
  return m;
}

class non_integer_workspace_error : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

inline TokenSeq cpm3_mlp_eval(const Cpm3Mlp& mlp, const Tensor& workspace) {
  require_rank(workspace, 2, "cpm3 workspace");
  if (workspace.dim(1) != mlp.w1.dim(0)) throw dimension_error("cpm3 mlp: workspace width mismatch");
  const Tensor z = matmul(workspace, mlp.w1);
  Tensor act(z.shape());
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double r = std::round(z[i]);
    if (std::abs(z[i] - r) > 1e-9)
      throw non_integer_workspace_error("cpm3 mlp: pre-activation " + std::to_string(z[i]) + " is not an integer");
    const auto v = static_cast<std::int64_t>(r);
    const std::int64_t phi = ((v % mlp.M) + mlp.M) % mlp.M;
    act[i] = std::max(0.0, 1.0 - static_cast<double>(phi));
  }
  const Tensor y = matmul(act, mlp.w2);
  TokenSeq out(y.dim(0));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<std::int64_t>(std::llround(y(i, 0)));
  return out;
}

inline TokenSeq cpm3_mlp_eval(const Tensor& workspace, std::size_t n, std::int64_t G, std::int64_t M) {
  return cpm3_mlp_eval(make_cpm3_mlp(n, workspace.dim(1), G, M), workspace);
}

struct Cpm3WorkspaceMha {
  std::size_t n_max = 0;
  MhaParams params;

  Tensor workspace(const TokenSeq& x) const {
    if (x.size() != n_max) throw dimension_error("cpm3 workspace: sequence length must equal n_max");
    MultiheadOptions opt;
    opt.mode = ScoreMode::hard;
    return multihead_attention(cpm3_input(x), params, opt);
  }
};

struct Cpm3WorkspaceIha {
  std::size_t n_max = 0;
  IhaParams params;

  std::size_t heads() const { return params.heads(); }

  // n_max x H^2; columns at or past n_max are padding.
  Tensor workspace_full(const TokenSeq& x) const {
    if (x.size() != n_max) throw dimension_error("cpm3 workspace: sequence length must equal n_max");
    IhaOptions opt;
    opt.mode = ScoreMode::hard;
    opt.ordering = Ordering::pseudo_major;
    return iha_attention(cpm3_input(x), params, opt);
  }

  Tensor workspace(const TokenSeq& x) const { return slice_cols(workspace_full(x), 0, n_max); }
};

namespace detail {
inline TokenSeq iota_tokens(std::size_t n) {
  TokenSeq x(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = static_cast<std::int64_t>(i + 1);
  return x;
}
}  // namespace detail

// n_max hard-attention heads; head h realises the shift P^h.
inline std::pair<Cpm3WorkspaceMha, ConstructionReport> build_cpm3_workspace_mha(
    std::size_t n_max, const std::vector<TokenSeq>& probes = {}) {
  if (n_max < 1) throw std::invalid_argument("cpm3: n_max must be >= 1");
  const std::size_t n = n_max;
  Cpm3WorkspaceMha c;
  c.n_max = n;
  Tensor e1({n + 1, 1});
  e1(0, 0) = 1.0;
  for (std::size_t h = 0; h < n; ++h) {
    c.params.wq.push_back(zero_pad_top(1, cyclic_shift(n, h)));
    c.params.wk.push_back(zero_pad_top(1, Tensor::identity(n)));
    c.params.wv.push_back(e1);
  }
  std::vector<TokenSeq> xs = probes;
  if (xs.empty()) xs.push_back(detail::iota_tokens(n));
  double err = 0.0;
  for (const auto& x : xs) err = std::max(err, max_abs_diff(c.workspace(x), cyclic_shift_workspace_oracle(x)));

  const Cpm3Mlp mlp = make_cpm3_mlp(n, n, 10, 3);
  ConstructionReport r;
  r.name = "cpm3/mha n_max=" + std::to_string(n);
  r.max_abs_error = err;
  r.tolerance = 0.0;
  r.param_count_constructed = static_cast<std::int64_t>(c.params.param_count() + mlp.param_count());
  r.param_count_formula = cpm3_mha_lower_bound(static_cast<std::int64_t>(n));
  r.param_check = ParamCheck::reported;
  r.details = "heads=" + std::to_string(n) + " hard attention; formula is the stated lower bound 3n^3+n^2(n-1)+n^2; " +
              std::to_string(xs.size()) + " probe sequences";
  r.finalize();
  return {std::move(c), std::move(r)};
}

// ceil(sqrt(n_max)) heads, P = H; head h yields the shifts (h-1)H .. (h-1)H+H-1.
inline std::pair<Cpm3WorkspaceIha, ConstructionReport> build_cpm3_workspace_iha(
    std::size_t n_max, const std::vector<TokenSeq>& probes = {}) {
  if (n_max < 1) throw std::invalid_argument("cpm3: n_max must be >= 1");
  const std::size_t n = n_max, H = ceil_sqrt(n), P = H;
  Cpm3WorkspaceIha c;
  c.n_max = n;
  for (std::size_t m = 0; m < H; ++m) {
    c.params.base.wq.push_back(zero_pad_top(1, cyclic_shift(n, m * H)));
    c.params.base.wk.push_back(zero_pad_top(1, transpose(cyclic_shift(n, m))));
    Tensor wv({n + 1, H});
    wv(0, m) = static_cast<double>(H);  // cancels the 1/H tie split
    c.params.base.wv.push_back(wv);
  }
  c.params.alpha_q = Tensor({H, H, P});
  c.params.alpha_k = Tensor({H, H, P});
  c.params.alpha_v = Tensor({H, H, P});
  for (std::size_t m = 0; m < H; ++m)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t j = 0; j < P; ++j) {
        c.params.alpha_q(m, h, j) = (m == h && j == 0) ? 1.0 : 0.0;
        c.params.alpha_k(m, h, j) = (m == j) ? 1.0 : 0.0;
        c.params.alpha_v(m, h, j) = (m == j) ? 1.0 : 0.0;
      }
  c.params.collapse = Tensor({H, H * P});
  for (std::size_t h = 0; h < H; ++h) c.params.collapse(h, h * P) = 1.0;

  std::vector<TokenSeq> xs = probes;
  if (xs.empty()) xs.push_back(detail::iota_tokens(n));
  double err = 0.0;
  bool padding_finite = true;
  for (const auto& x : xs) {
    const Tensor full = c.workspace_full(x);
    for (double v : full.data()) padding_finite = padding_finite && std::isfinite(v);
    err = std::max(err, max_abs_diff(slice_cols(full, 0, n), cyclic_shift_workspace_oracle(x)));
  }

  const Cpm3Mlp mlp = make_cpm3_mlp(n, H * H, 10, 3);
  ConstructionReport r;
  r.name = "cpm3/iha n_max=" + std::to_string(n);
  r.max_abs_error = err;
  r.tolerance = 0.0;
  r.param_count_constructed = static_cast<std::int64_t>(c.params.param_count() + mlp.param_count());
  r.param_count_formula = cpm3_iha_upper_bound(static_cast<std::int64_t>(n));
  r.param_check = ParamCheck::at_most;
  r.details = "heads=" + std::to_string(H) + " pseudo=" + std::to_string(P) + " padding_cols=" +
              std::to_string(H * H - n) + " hard attention; formula is the stated upper bound; " +
              std::to_string(xs.size()) + " probe sequences";
  r.finalize(padding_finite);
  return {std::move(c), std::move(r)};
}

}  // namespace ihalab
