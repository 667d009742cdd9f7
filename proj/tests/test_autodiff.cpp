#include <gtest/gtest.h>

#include <cmath>

#include "ihalab/autodiff.hpp"
#include "ihalab/model.hpp"
#include "ihalab/tasks.hpp"

using namespace ihalab;

namespace {

// Scalar read-out that weights every entry differently.
Var readout(Var y, std::uint64_t seed) {
  CounterRng rng(seed);
  Var c = y.tape->constant(random_normal({y.value().dim(1), 1}, rng));
  return ad::sum(ad::tanh(ad::matmul(y, c)));
}

GradcheckReport check(const LossBuilder& f, NamedParams ps) {
  auto rep = gradcheck(f, std::move(ps), 1e-5, 1e-4);
  if (!rep.passed())
    for (const auto& [name, e] : rep.per_param) ADD_FAILURE() << name << " rel err " << e;
  return rep;
}

std::vector<TaskExample> tiny_examples(std::size_t count, std::uint64_t seed) {
  DatasetSpec s;
  s.task = TaskKind::binary_comp;
  s.size_min = 3;
  s.size_max = 4;
  s.bernoulli_p = 0.4;
  s.seed = seed;
  std::vector<TaskExample> xs;
  for (std::size_t i = 0; i < count; ++i) xs.push_back(gen_example(s, Split::train, i));
  return xs;
}

ModelConfig tiny_config(AttentionKind kind) {
  ModelConfig c;
  c.kind = kind;
  c.H = 2;
  c.d = 2;
  c.D = 4;
  c.P = kind == AttentionKind::iha ? 2 : 1;
  c.vocab = 2;
  c.grid = 4;
  c.mlp_hidden = 4;
  return c;
}

}  // namespace

TEST(Backward, SumGivesOnes) {
  Tape t;
  Var w = t.param(Tensor::matrix({{1, 2}, {3, 4}}), 0);
  auto g = t.backward(ad::sum(w));
  EXPECT_EQ(max_abs_diff(g.at(0), Tensor({2, 2}, 1.0)), 0.0);
}

TEST(Backward, SoftmaxRowSumHasNoGradient) {
  CounterRng rng(3);
  Tape t;
  Var s = t.param(random_normal({3, 5}, rng), 0);
  auto g = t.backward(ad::sum(ad::softmax_rows(s)));
  EXPECT_LE(max_abs(g.at(0)), 1e-10);
}

TEST(Backward, SquareAtThree) {
  Tape t;
  Var w = t.param(Tensor::matrix({{3}}), 0);
  auto g = t.backward(ad::sum(ad::matmul(w, w)));
  EXPECT_NEAR(g.at(0)[0], 6.0, 1e-12);
}

TEST(Backward, NonScalarLossThrows) {
  Tape t;
  Var w = t.param(Tensor({2, 2}, 1.0), 0);
  EXPECT_THROW(t.backward(w), dimension_error);
}

TEST(Backward, SumRuleAccumulatesBothConsumers) {
  Tape t;
  Var w = t.param(Tensor::matrix({{2, -1}}), 0);
  // loss = sum(w) + sum(3 w) -> gradient 4 everywhere.
  auto g = t.backward(ad::add(ad::sum(w), ad::sum(ad::scale(w, 3.0))));
  EXPECT_NEAR(g.at(0)(0, 0), 4.0, 1e-15);
  EXPECT_NEAR(g.at(0)(0, 1), 4.0, 1e-15);
}

TEST(Backward, ConstantsCarryNoBackwardState) {
  Tape t;
  Var c = t.constant(Tensor({2, 2}, 1.0));
  Var y = ad::relu(ad::matmul(c, c));
  EXPECT_FALSE(t.requires_grad(y.id));
  EXPECT_FALSE(static_cast<bool>(t.node(y.id).backward));
}

TEST(Backward, UnreachedParamGetsZero) {
  Tape t;
  Var a = t.param(Tensor({1, 1}, 2.0), 0);
  t.param(Tensor({2, 1}, 5.0), 1);
  auto g = t.backward(ad::sum(a));
  EXPECT_EQ(max_abs(g.at(1)), 0.0);
}

TEST(Gradcheck, QuadraticScalar) {
  LossBuilder f = [](Tape&, const std::vector<Var>& p) { return ad::sum(ad::matmul(p[0], p[0])); };
  const auto grads = tape_gradients(f, {{"w", Tensor::matrix({{3}})}});
  EXPECT_NEAR(grads.at(0)[0], 6.0, 1e-8);
  EXPECT_TRUE(check(f, {{"w", Tensor::matrix({{3}})}}).passed());
}

TEST(Gradcheck, RejectsBadEps) {
  LossBuilder f = [](Tape&, const std::vector<Var>& p) { return ad::sum(p[0]); };
  EXPECT_THROW(gradcheck(f, {{"w", Tensor({1}, 1.0)}}, 1e-9), std::invalid_argument);
  EXPECT_THROW(gradcheck(f, {{"w", Tensor({1}, 1.0)}}, 0.1), std::invalid_argument);
}

TEST(Gradcheck, HardModeIsSkipped) {
  LossBuilder f = [](Tape&, const std::vector<Var>& p) { return ad::sum(p[0]); };
  const auto rep = gradcheck(f, {{"w", Tensor({1}, 1.0)}}, ScoreMode::hard);
  EXPECT_EQ(rep.status, GradcheckReport::Status::skipped);
  EXPECT_EQ(rep.reason, "non-differentiable mode");
}

TEST(Gradcheck, NonFiniteLossRaises) {
  LossBuilder f = [](Tape&, const std::vector<Var>& p) {
    return ad::scale(ad::sum(p[0]), std::numeric_limits<double>::infinity());
  };
  EXPECT_THROW(gradcheck(f, {{"w", Tensor({1}, 1.0)}}), non_finite_error);
}

TEST(Gradcheck, DetectsWrongGradient) {
  // A broken op: forward 2x, backward claims 3.
  LossBuilder f = [](Tape& t, const std::vector<Var>& p) {
    Tensor out = 2.0 * p[0].value();
    Var y = t.push(std::move(out), {p[0].id}, [a = p[0].id](Tape& tp, std::size_t self) {
      Tensor& ga = tp.grad(a);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += 3.0 * tp.grad(self)[i];
    });
    return ad::sum(y);
  };
  EXPECT_EQ(gradcheck(f, {{"w", Tensor({2}, 1.0)}}).status, GradcheckReport::Status::failed);
}

TEST(GradcheckOps, Elementwise) {
  CounterRng rng(21);
  NamedParams ps{{"a", random_normal({3, 4}, rng)}, {"b", random_normal({3, 4}, rng)}, {"bias", random_normal({4}, rng)}};
  LossBuilder f = [](Tape&, const std::vector<Var>& p) {
    Var y = ad::add_row_bias(ad::add(ad::tanh(p[0]), ad::scale(p[1], -0.7)), p[2]);
    return readout(y, 1);
  };
  EXPECT_TRUE(check(f, ps).passed());
}

TEST(GradcheckOps, ReluAwayFromKink) {
  NamedParams ps{{"a", Tensor::matrix({{0.5, -0.4, 1.2}, {-1.1, 0.3, 0.9}})}};
  LossBuilder f = [](Tape&, const std::vector<Var>& p) { return readout(ad::relu(p[0]), 2); };
  EXPECT_TRUE(check(f, ps).passed());
}

TEST(GradcheckOps, MatmulAndSoftmax) {
  CounterRng rng(22);
  NamedParams ps{{"a", random_normal({3, 4}, rng)}, {"b", random_normal({4, 5}, rng)}};
  LossBuilder f = [](Tape&, const std::vector<Var>& p) { return readout(ad::softmax_rows(ad::matmul(p[0], p[1])), 3); };
  EXPECT_TRUE(check(f, ps).passed());
}

TEST(GradcheckOps, GatherRepeatedIndices) {
  CounterRng rng(23);
  NamedParams ps{{"table", random_normal({4, 3}, rng)}};
  LossBuilder f = [](Tape&, const std::vector<Var>& p) { return readout(ad::gather_rows(p[0], {2, 0, 2, 3, 2}), 4); };
  EXPECT_TRUE(check(f, ps).passed());
}

TEST(GradcheckOps, MixAttendCollapse) {
  CounterRng rng(24);
  const std::size_t L = 4, H = 2, P = 3, d = 2;
  NamedParams ps{{"q", random_normal({L, H * d}, rng)},
                 {"k", random_normal({L, H * d}, rng)},
                 {"v", random_normal({L, H * d}, rng)},
                 {"aq", random_normal({H, H, P}, rng, 0.7)},
                 {"ak", random_normal({H, H, P}, rng, 0.7)},
                 {"av", random_normal({H, H, P}, rng, 0.7)},
                 {"r", random_normal({H, H * P}, rng, 0.7)}};
  LossBuilder f = [](Tape&, const std::vector<Var>& p) {
    Var o = ad::grouped_attention(ad::mix_heads(p[0], p[3]), ad::mix_heads(p[1], p[4]), ad::mix_heads(p[2], p[5]), 2,
                                  3, 0.7);
    return readout(ad::collapse(o, p[6]), 5);
  };
  EXPECT_TRUE(check(f, ps).passed());
}

TEST(GradcheckOps, Losses) {
  CounterRng rng(25);
  NamedParams ps{{"z", random_normal({5, 1}, rng, 2.0)}};
  const std::vector<double> y{1, 0, 0, 1, 1};
  const std::vector<bool> mask{true, true, false, true, true};
  LossBuilder bce = [&](Tape&, const std::vector<Var>& p) { return ad::bce_with_logits_sum(p[0], y, mask); };
  LossBuilder mse = [&](Tape&, const std::vector<Var>& p) { return ad::mse_sum(p[0], y, mask); };
  EXPECT_TRUE(check(bce, ps).passed());
  EXPECT_TRUE(check(mse, ps).passed());
}

TEST(GroupedAttention, MatchesSoftmaxReference) {
  CounterRng rng(26);
  const std::size_t L = 5, G = 2, P = 2, d = 3;
  const Tensor Q = random_normal({L, G * P * d}, rng), K = random_normal({L, G * P * d}, rng),
               V = random_normal({L, G * P * d}, rng);
  Tape t;
  const Tensor out = ad::grouped_attention(t.constant(Q), t.constant(K), t.constant(V), G, P, 0.5).value();
  // Group g: virtual tokens (n, j) with features from column block g*P + j.
  for (std::size_t g = 0; g < G; ++g) {
    Tensor q({L * P, d}), k({L * P, d}), v({L * P, d});
    for (std::size_t n = 0; n < L; ++n)
      for (std::size_t j = 0; j < P; ++j)
        for (std::size_t c = 0; c < d; ++c) {
          q(n * P + j, c) = Q(n, (g * P + j) * d + c);
          k(n * P + j, c) = K(n, (g * P + j) * d + c);
          v(n * P + j, c) = V(n, (g * P + j) * d + c);
        }
    Tensor s = matmul(q, transpose(k));
    for (auto& x : s.data()) x *= 0.5;
    const Tensor ref = matmul(softmax_rows(s), v);
    for (std::size_t n = 0; n < L; ++n)
      for (std::size_t j = 0; j < P; ++j)
        for (std::size_t c = 0; c < d; ++c) EXPECT_NEAR(out(n, (g * P + j) * d + c), ref(n * P + j, c), 1e-13);
  }
}

TEST(GroupedAttention, ExtremeScoresStayFinite) {
  Tape t;
  Var q = t.constant(Tensor::matrix({{300.0}, {-300.0}}));
  const Tensor out = ad::grouped_attention(q, q, t.constant(Tensor::matrix({{1.0}, {2.0}})), 1, 1, 10.0).value();
  for (double v : out.data()) EXPECT_TRUE(std::isfinite(v));
  EXPECT_NEAR(out(0, 0), 1.0, 1e-12);
  EXPECT_NEAR(out(1, 0), 2.0, 1e-12);
}

class ModelGradcheck : public ::testing::TestWithParam<AttentionKind> {};

TEST_P(ModelGradcheck, SingleLayerBce) {
  const ModelConfig cfg = tiny_config(GetParam());
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const Model m = init_model(cfg, 100 + seed);
    const auto batch = tiny_examples(2, seed);
    const auto rep = gradcheck(batch_loss_builder(m, batch), m.params, 1e-5, 1e-4);
    EXPECT_TRUE(rep.passed()) << to_string(cfg.kind) << " seed " << seed << " err " << rep.max_rel_error;
  }
}

INSTANTIATE_TEST_SUITE_P(Kinds, ModelGradcheck, ::testing::Values(AttentionKind::mha, AttentionKind::iha),
                         [](const auto& info) { return to_string(info.param); });
