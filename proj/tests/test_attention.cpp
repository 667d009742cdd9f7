#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "ihalab/attention.hpp"
#include "ihalab/verify.hpp"

using namespace ihalab;

namespace {

// Fully unrolled scalar loops: per head softmax(q k^T / sqrt(d)) v, concat, W_O.
Tensor scalar_mha(const Tensor& x, const MhaParams& p) {
  const std::size_t N = x.dim(0), D = x.dim(1), H = p.heads(), d = p.qk_dim();
  Tensor cat({N, H * d});
  for (std::size_t h = 0; h < H; ++h) {
    std::vector<double> q(N * d), k(N * d), v(N * d);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < d; ++c)
        for (std::size_t i = 0; i < D; ++i) {
          q[n * d + c] += x(n, i) * p.wq[h](i, c);
          k[n * d + c] += x(n, i) * p.wk[h](i, c);
          v[n * d + c] += x(n, i) * p.wv[h](i, c);
        }
    for (std::size_t i = 0; i < N; ++i) {
      std::vector<double> s(N);
      double mx = -1e300, z = 0.0;
      for (std::size_t j = 0; j < N; ++j) {
        for (std::size_t c = 0; c < d; ++c) s[j] += q[i * d + c] * k[j * d + c];
        s[j] /= std::sqrt(static_cast<double>(d));
        mx = std::max(mx, s[j]);
      }
      for (auto& e : s) z += (e = std::exp(e - mx));
      for (std::size_t j = 0; j < N; ++j)
        for (std::size_t c = 0; c < d; ++c) cat(i, h * d + c) += s[j] / z * v[j * d + c];
    }
  }
  Tensor out({N, D});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t j = 0; j < D; ++j)
      for (std::size_t i = 0; i < H * d; ++i) out(n, j) += cat(n, i) * (*p.wo)(i, j);
  return out;
}

}  // namespace

TEST(MhaForward, SingleTokenIsValueProjection) {
  CounterRng rng(1);
  const MhaParams p = MhaParams::random(2, 2, rng);
  const Tensor x = random_normal({1, 4}, rng);
  std::vector<Tensor> heads;
  for (std::size_t h = 0; h < 2; ++h) heads.push_back(matmul(x, p.wv[h]));
  const Tensor want = matmul(hconcat(heads), *p.wo);
  EXPECT_LE(max_abs_diff(mha_forward(x, p, AttentionConfig::make(1, 2, 2)), want), 1e-14);
}

TEST(MhaForward, RepeatedTokenHeadsReduceToValues) {
  CounterRng rng(2);
  MhaParams p = MhaParams::random(3, 2, rng, false);
  const Tensor x = random_normal({6}, rng);
  const Tensor X = repeated_token(5, x);
  MultiheadOptions opt;
  const Tensor out = multihead_attention(X, p, opt);
  for (std::size_t h = 0; h < 3; ++h) {
    const Tensor v = matmul(X, p.wv[h]);
    for (std::size_t n = 0; n < 5; ++n)
      for (std::size_t c = 0; c < 2; ++c) EXPECT_NEAR(out(n, h * 2 + c), v(n, c), 1e-14);
  }
}

TEST(MhaForward, MatchesScalarLoopOracle) {
  CounterRng rng(3);
  const MhaParams p = MhaParams::random(2, 2, rng);
  const Tensor x = random_normal({3, 4}, rng);
  EXPECT_LE(max_abs_diff(mha_forward(x, p, AttentionConfig::make(3, 2, 2)), scalar_mha(x, p)), 1e-12);
}

TEST(MhaForward, ShapeMismatchThrows) {
  CounterRng rng(4);
  const MhaParams p = MhaParams::random(2, 2, rng);
  EXPECT_THROW(mha_forward(Tensor({3, 5}), p, AttentionConfig::make(3, 2, 2)), dimension_error);
  EXPECT_THROW(mha_forward(Tensor({3, 4}), p, AttentionConfig::make(3, 2, 2, 2)), std::invalid_argument);
}

TEST(MhaForward, CausalSelfPositionAlwaysVisible) {
  CounterRng rng(5);
  const MhaParams p = MhaParams::random(2, 2, rng);
  AttentionConfig cfg = AttentionConfig::make(4, 2, 2);
  cfg.mask_mode = MaskMode::causal;
  const Tensor x = random_normal({4, 4}, rng);
  const Tensor out = mha_forward(x, p, cfg);
  // First position only sees itself.
  Tensor x0({1, 4});
  for (std::size_t j = 0; j < 4; ++j) x0(0, j) = x(0, j);
  const Tensor first = mha_forward(x0, p, AttentionConfig::make(1, 2, 2));
  for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(out(0, j), first(0, j), 1e-14);
}

TEST(MhaForward, ConvexCombinationOfValues) {
  CounterRng rng(6);
  MhaParams p = MhaParams::random(2, 3, rng, false);
  const Tensor x = random_normal({7, 6}, rng);
  const Tensor out = multihead_attention(x, p, {});
  for (std::size_t h = 0; h < 2; ++h) {
    const Tensor v = matmul(x, p.wv[h]);
    for (std::size_t c = 0; c < 3; ++c) {
      double lo = 1e300, hi = -1e300;
      for (std::size_t n = 0; n < 7; ++n) {
        lo = std::min(lo, v(n, c));
        hi = std::max(hi, v(n, c));
      }
      for (std::size_t n = 0; n < 7; ++n) {
        EXPECT_GE(out(n, h * 3 + c), lo - 1e-12);
        EXPECT_LE(out(n, h * 3 + c), hi + 1e-12);
      }
    }
  }
}

TEST(LinearAttention, ShiftConstructionGivesPowers) {
  CounterRng rng(7);
  const std::size_t N = 5, d = 2;
  const Tensor a = random_uniform({N, N}, rng);
  const Tensor x_hat = hconcat({random_uniform({N, d}, rng), Tensor::identity(N)});
  const Tensor wk = vconcat({Tensor({d, N}), Tensor::identity(N)});
  EXPECT_LE(max_abs_diff(linear_attention_matrix(x_hat, vconcat({Tensor({d, N}), matmul(a, a)}), wk), matmul(a, a)),
            1e-12);
  EXPECT_LE(max_abs_diff(linear_attention_matrix(x_hat, wk, wk), Tensor::identity(N)), 1e-15);
}

TEST(LinearAttention, FilterHeadsReproducePowers) {
  CounterRng rng(8);
  const std::size_t N = 6, d = 1;
  const Tensor a = random_uniform({N, N}, rng), x = random_uniform({N, d}, rng);
  MhaParams p;
  Tensor power = Tensor::identity(N);
  for (std::size_t i = 0; i <= 4; ++i) {
    p.wq.push_back(vconcat({Tensor({d, N}), power}));
    p.wk.push_back(vconcat({Tensor({d, N}), Tensor::identity(N)}));
    p.wv.push_back(vconcat({Tensor::identity(d), Tensor({N, d})}));
    power = matmul(power, a);
  }
  MultiheadOptions opt;
  opt.mode = ScoreMode::linear;
  const Tensor out = multihead_attention(hconcat({x, Tensor::identity(N)}), p, opt);
  Tensor ax = x;
  for (std::size_t i = 0; i <= 4; ++i) {
    EXPECT_LE(max_abs_diff(slice_cols(out, i, i + 1), ax), 1e-10);
    ax = matmul(a, ax);
  }
}

TEST(HardAttention, TiesShareMass) {
  const Tensor w = hard_attention_rows(Tensor::matrix({{1, 0, 1, 0}, {5, 1, 1, 1}, {0, 0, 0, 0}}));
  EXPECT_EQ(w(0, 0), 0.5);
  EXPECT_EQ(w(0, 1), 0.0);
  EXPECT_EQ(w(0, 2), 0.5);
  EXPECT_EQ(w(1, 0), 1.0);
  EXPECT_EQ(w(1, 1), 0.0);
  EXPECT_EQ(w(2, 3), 0.25);
}

TEST(HardAttention, FullyMaskedRowThrows) {
  BoolMatrix m(1, 2, false);
  EXPECT_THROW(hard_attention_rows(Tensor({1, 2}), m), degenerate_row_error);
}

TEST(HardAttention, TiedIntegerValuesStayExact) {
  AttendOptions opt;
  opt.mode = ScoreMode::hard;
  const Tensor q = Tensor::matrix({{1.0}}), k = Tensor::matrix({{1.0}, {1.0}, {1.0}});
  const Tensor v = Tensor::matrix({{3.0}, {3.0}, {3.0}});
  EXPECT_EQ(attend(q, k, 3.0 * v, opt)(0, 0), 9.0);
}

TEST(Rotary, PositionZeroIsIdentity) {
  CounterRng rng(9);
  const Tensor q = random_normal({1, 4}, rng);
  EXPECT_EQ(max_abs_diff(rotary_positions(q, 500000.0, {0.0}), q), 0.0);
}

TEST(Rotary, InnerProductDependsOnOffset) {
  CounterRng rng(10);
  const Tensor q = random_normal({1, 6}, rng), k = random_normal({1, 6}, rng);
  auto ip = [&](double p1, double p2) {
    const Tensor a = rotary_positions(q, 100.0, {p1}), b = rotary_positions(k, 100.0, {p2});
    double s = 0.0;
    for (std::size_t i = 0; i < 6; ++i) s += a[i] * b[i];
    return s;
  };
  EXPECT_NEAR(ip(3, 1), ip(10, 8), 1e-10);
  EXPECT_NEAR(ip(0, 5), ip(7, 12), 1e-10);
}

TEST(Rotary, QuarterTurn) {
  const Tensor r = rotary_positions(Tensor::matrix({{1.0, 0.0}}), 1.0, {std::numbers::pi / 2});
  EXPECT_NEAR(r(0, 0), 0.0, 1e-12);
  EXPECT_NEAR(r(0, 1), 1.0, 1e-12);
}

TEST(Rotary, OddWidthThrows) {
  EXPECT_THROW(rotary_positions(Tensor({1, 3}), 1.0, {0.0}), dimension_error);
}

TEST(SlidingWindow, Shapes) {
  const BoolMatrix full = sliding_window_mask(4, 4, 4, true);
  const BoolMatrix diag = sliding_window_mask(4, 4, 1, true);
  const BoolMatrix band = sliding_window_mask(4, 4, 2, true);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      EXPECT_EQ(full(i, j), j <= i);
      EXPECT_EQ(diag(i, j), i == j);
      EXPECT_EQ(band(i, j), j == i || j + 1 == i);
    }
  EXPECT_THROW(sliding_window_mask(2, 2, 0, false), std::invalid_argument);
}

TEST(AttentionConfig, Validation) {
  AttentionConfig c = AttentionConfig::make(4, 2, 2);
  c.D = 5;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = AttentionConfig::make(4, 2, 2);
  c.window = 5;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c.window = 2;
  c.rotary_theta = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Strictness, MhaLinearOnRepeatedTokens) {
  const StrictnessResult s = strictness_probe(2, 2, 4, 10, 3);
  EXPECT_LE(s.mha_residual, 1e-9);
  EXPECT_GE(s.nonlinear_hits, 1u);
  EXPECT_GT(s.witness_nonlinearity, 1e-3);
}
