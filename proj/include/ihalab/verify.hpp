#pragma once

// Verification suites shared by the CLI and the acceptance runner. Each
// returns one ConstructionReport per checked configuration.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "attention.hpp"
#include "constructions.hpp"
#include "interleaved.hpp"
#include "rng.hpp"

namespace ihalab {

// Random N x N adjacency with self loops, rows scaled to sum 1. Powers stay
// bounded, so high-order filter banks remain well scaled.
inline Tensor random_normalized_adjacency(std::size_t N, CounterRng& rng, double density = 0.3) {
  Tensor a({N, N});
  for (std::size_t i = 0; i < N; ++i) {
    a(i, i) = 1.0;
    for (std::size_t j = 0; j < N; ++j)
      if (j != i && rng.uniform() < density) a(i, j) = 1.0;
    double s = 0.0;
    for (std::size_t j = 0; j < N; ++j) s += a(i, j);
    for (std::size_t j = 0; j < N; ++j) a(i, j) /= s;
  }
  return a;
}

inline Tensor repeated_token(std::size_t N, const Tensor& x) {
  Tensor out({N, x.size()});
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t c = 0; c < x.size(); ++c) out(i, c) = x[c];
  return out;
}

inline Tensor random_unit(std::size_t D, CounterRng& rng) {
  Tensor x = random_normal({D}, rng);
  double n = 0.0;
  for (double v : x.data()) n += v * v;
  return (1.0 / std::sqrt(n)) * x;
}

// ‖iha(embed(mha)) − mha‖ over `trials` random (params, input) pairs.
inline ConstructionReport superset_check(std::size_t H, std::size_t d, std::size_t P, std::size_t N,
                                         std::size_t trials, std::uint64_t seed) {
  CounterRng base = CounterRng(seed).substream("superset");
  double err = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    CounterRng rng = base.substream(t);
    const MhaParams m = MhaParams::random(H, d, rng);
    const Tensor x = random_normal({N, H * d}, rng);
    const AttentionConfig cfg = AttentionConfig::make(N, H, d, P);
    AttentionConfig mcfg = cfg;
    mcfg.P = 1;
    err = std::max(err, max_abs_diff(iha_forward(x, embed_mha_as_iha(m, P), cfg), mha_forward(x, m, mcfg)));
  }
  ConstructionReport r;
  r.name = "superset H=" + std::to_string(H) + " d=" + std::to_string(d) + " P=" + std::to_string(P) +
           " N=" + std::to_string(N);
  r.max_abs_error = err;
  r.tolerance = 1e-10;
  r.param_check = ParamCheck::reported;
  r.details = std::to_string(trials) + " random instances";
  r.finalize();
  return r;
}

struct StrictnessResult {
  double mha_residual = 0.0;        // max superposition defect of MHA on repeated tokens
  double witness_nonlinearity = 0.0;  // max ‖f(2x) − 2f(x)‖ of the witness
  std::size_t nonlinear_hits = 0;
};

// MHA is linear on the repeated-token subspace; the P = 2 witness is not.
inline StrictnessResult strictness_probe(std::size_t H, std::size_t d, std::size_t N, std::size_t trials,
                                         std::uint64_t seed) {
  CounterRng base = CounterRng(seed).substream("strictness");
  CounterRng prng = base.substream("params");
  const MhaParams m = MhaParams::random(H, d, prng);
  const IhaParams w = strictness_witness(m);
  const AttentionConfig mcfg = AttentionConfig::make(N, H, d, 1);
  const AttentionConfig wcfg = AttentionConfig::make(N, H, d, 2);
  StrictnessResult s;
  for (std::size_t t = 0; t < trials; ++t) {
    CounterRng rng = base.substream(t);
    const Tensor x = random_unit(H * d, rng);
    const Tensor y = random_unit(H * d, rng);
    const double a = rng.uniform() * 4.0 - 2.0, b = rng.uniform() * 4.0 - 2.0;
    auto f = [&](const Tensor& v) { return mha_forward(repeated_token(N, v), m, mcfg); };
    const Tensor lhs = f(a * x + b * y);
    const Tensor rhs = a * f(x) + b * f(y);
    s.mha_residual = std::max({s.mha_residual, max_abs_diff(lhs, rhs), max_abs_diff(f(2.0 * x), 2.0 * f(x))});
    auto g = [&](const Tensor& v) { return iha_forward(repeated_token(N, v), w, wcfg); };
    const double gap = max_abs_diff(g(2.0 * x), 2.0 * g(x));
    s.witness_nonlinearity = std::max(s.witness_nonlinearity, gap);
    if (gap > 1e-3) ++s.nonlinear_hits;
  }
  return s;
}

inline ConstructionReport strictness_check(std::size_t H, std::size_t d, std::size_t N, std::size_t trials,
                                           std::uint64_t seed) {
  const StrictnessResult s = strictness_probe(H, d, N, trials, seed);
  ConstructionReport r;
  r.name = "strictness H=" + std::to_string(H) + " d=" + std::to_string(d);
  r.max_abs_error = s.mha_residual;
  r.tolerance = 1e-9;
  r.param_check = ParamCheck::reported;
  r.details = "witness max |f(2x)-2f(x)| = " + std::to_string(s.witness_nonlinearity) + ", nonlinear on " +
              std::to_string(s.nonlinear_hits) + "/" + std::to_string(trials);
  r.finalize(s.nonlinear_hits >= 1);
  return r;
}

inline std::vector<ConstructionReport> polyfilter_suite(std::size_t N, std::size_t d, std::size_t k,
                                                        std::uint64_t seed) {
  CounterRng rng = CounterRng(seed).substream("polyfilter").substream(N * 1000003 + d * 1009 + k);
  const Tensor a = random_normalized_adjacency(N, rng);
  const Tensor x = random_uniform({N, d}, rng);
  return {build_mha_polyfilter(a, x, k).report, build_iha_polyfilter(a, x, k).report};
}

inline std::vector<TokenSeq> cpm3_probes(std::size_t n, std::size_t count, std::uint64_t seed) {
  CounterRng rng = CounterRng(seed).substream("cpm3-probes").substream(n);
  std::vector<TokenSeq> xs;
  for (std::size_t c = 0; c < count; ++c) {
    TokenSeq x(n);
    for (auto& v : x) v = rng.uniform_int(0, 20);
    xs.push_back(std::move(x));
  }
  return xs;
}

// Workspace reports for both constructions plus the end-to-end count.
inline std::vector<ConstructionReport> cpm3_suite(std::size_t n, std::size_t probes, std::uint64_t seed,
                                                  std::int64_t G = 10, std::int64_t M = 3) {
  const auto xs = cpm3_probes(n, probes, seed);
  auto [mha, rm] = build_cpm3_workspace_mha(n, xs);
  auto [iha, ri] = build_cpm3_workspace_iha(n, xs);
  std::int64_t worst = 0;
  for (const auto& x : xs) {
    const TokenSeq want = cpm3_count_oracle(x, G, M);
    for (const Tensor& ws : {mha.workspace(x), iha.workspace(x)}) {
      const TokenSeq got = cpm3_mlp_eval(ws, n, G, M);
      for (std::size_t i = 0; i < n; ++i) worst = std::max(worst, std::abs(got[i] - want[i]));
    }
  }
  ConstructionReport e;
  e.name = "cpm3/count n_max=" + std::to_string(n);
  e.max_abs_error = static_cast<double>(worst);
  e.tolerance = 0.0;
  e.param_check = ParamCheck::reported;
  e.details = "workspace + MLP vs brute-force count, G=" + std::to_string(G) + " M=" + std::to_string(M);
  e.finalize();
  return {rm, ri, e};
}

inline std::vector<ConstructionReport> rank_suite(std::size_t N, std::size_t d, std::size_t k, std::size_t trials,
                                                  std::uint64_t seed) {
  return {rank_bound_check(N, d, k, trials, seed)};
}

}  // namespace ihalab
