#include <gtest/gtest.h>

#include <map>

#include "ihalab/constructions.hpp"
#include "ihalab/verify.hpp"

using namespace ihalab;

namespace {

// Count via a residue histogram.
TokenSeq count_by_histogram(const TokenSeq& x, std::int64_t G, std::int64_t M) {
  std::map<std::int64_t, std::int64_t> pair_res;
  for (auto a : x)
    for (auto b : x) ++pair_res[(((G * a + b) % M) + M) % M];
  TokenSeq out;
  for (auto v : x) {
    const std::int64_t need = (((-v) % M) + M) % M;
    out.push_back(pair_res.count(need) ? pair_res[need] : 0);
  }
  return out;
}

Tensor cyclic4() { return Tensor::matrix({{1, 2, 3, 4}, {2, 3, 4, 1}, {3, 4, 1, 2}, {4, 1, 2, 3}}); }

}  // namespace

TEST(PolyfilterOracle, SmallCases) {
  CounterRng rng(1);
  const Tensor x = random_normal({3, 2}, rng);
  EXPECT_EQ(max_abs_diff(polyfilter_oracle(Tensor::identity(3), x, 3), hconcat({x, x, x})), 0.0);
  EXPECT_EQ(max_abs_diff(polyfilter_oracle(random_normal({3, 3}, rng), x, 1), x), 0.0);
  const Tensor got = polyfilter_oracle(Tensor::matrix({{0, 1}, {1, 0}}), Tensor::matrix({{1}, {2}}), 2);
  EXPECT_EQ(max_abs_diff(got, Tensor::matrix({{1, 2}, {2, 1}})), 0.0);
  EXPECT_THROW(polyfilter_oracle(Tensor::identity(2), x, 2), dimension_error);
}

TEST(MhaPolyfilter, N16d3k4) {
  CounterRng rng(2);
  const auto c = build_mha_polyfilter(random_uniform({16, 16}, rng), random_uniform({16, 3}, rng), 4);
  EXPECT_LE(c.report.max_abs_error, 1e-9);
  EXPECT_EQ(c.report.param_count_formula, 2 * 16 * 19 * 4 + 3 * 19 * 4);
  EXPECT_EQ(c.report.param_count_constructed, 2660);
  EXPECT_TRUE(c.report.passed);
}

TEST(MhaPolyfilter, IdentityAdjacencyRepeatsX) {
  CounterRng rng(3);
  const Tensor x = random_uniform({8, 2}, rng);
  const auto c = build_mha_polyfilter(Tensor::identity(8), x, 3);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_LE(max_abs_diff(slice_cols(c.output, 2 * i, 2 * i + 2), x), 1e-15);
}

TEST(MhaPolyfilter, RandomSmall) {
  CounterRng rng(4);
  const auto c = build_mha_polyfilter(random_uniform({8, 8}, rng), random_uniform({8, 2}, rng), 3);
  EXPECT_TRUE(c.report.passed) << c.report.max_abs_error;
}

TEST(MhaPolyfilter, Preconditions) {
  EXPECT_THROW(build_mha_polyfilter(Tensor::identity(4), Tensor({4, 4}), 1), std::invalid_argument);
  EXPECT_THROW(build_mha_polyfilter(Tensor::identity(4), Tensor({4, 2}), 3), std::invalid_argument);
  EXPECT_THROW(build_mha_polyfilter(Tensor::identity(5), Tensor({4, 1}), 2), dimension_error);
}

TEST(IhaPolyfilter, WorkedExampleWeights) {
  CounterRng rng(5);
  const std::size_t N = 6, d = 1;
  const Tensor a = random_uniform({N, N}, rng), x = random_uniform({N, d}, rng);
  const auto c = build_iha_polyfilter(a, x, 4);
  ASSERT_EQ(c.params.heads(), 2u);
  ASSERT_EQ(c.params.pseudo(), 2u);
  const Tensor pad({d, N});
  EXPECT_EQ(max_abs_diff(c.params.base.wq[0], vconcat({pad, Tensor::identity(N)})), 0.0);
  EXPECT_LE(max_abs_diff(c.params.base.wq[1], vconcat({pad, matmul(a, a)})), 1e-15);
  EXPECT_EQ(max_abs_diff(c.params.base.wk[0], vconcat({pad, Tensor::identity(N)})), 0.0);
  EXPECT_EQ(max_abs_diff(c.params.base.wk[1], vconcat({pad, transpose(a)})), 0.0);
  const Tensor want = polyfilter_oracle(a, x, 4);
  EXPECT_LE(max_abs_diff(c.output, want), 1e-12);
  EXPECT_TRUE(c.report.passed);
}

TEST(IhaPolyfilter, SingleHeadGivesX) {
  CounterRng rng(6);
  const Tensor x = random_uniform({5, 2}, rng);
  const auto c = build_iha_polyfilter(random_uniform({5, 5}, rng), x, 1);
  EXPECT_EQ(c.params.heads(), 1u);
  EXPECT_LE(max_abs_diff(c.output, x), 1e-15);
}

TEST(IhaPolyfilter, N16d2NineHopsCountBelowMha) {
  CounterRng rng(7);
  const Tensor a = random_normalized_adjacency(16, rng), x = random_uniform({16, 2}, rng);
  // k = 9 needs k*d = 18 > N columns, so the largest admissible bank is k = 8.
  EXPECT_THROW(build_iha_polyfilter(a, x, 9), std::invalid_argument);
  const auto ci = build_iha_polyfilter(a, x, 8);
  const auto cm = build_mha_polyfilter(a, x, 8);
  EXPECT_TRUE(ci.report.passed);
  EXPECT_TRUE(cm.report.passed);
  EXPECT_LT(ci.report.param_count_constructed, cm.report.param_count_constructed);
  EXPECT_LT(iha_polyfilter_formula(16, 2, 9), mha_polyfilter_formula(16, 2, 9));
}

TEST(IhaPolyfilter, PaddingColumnsFinite) {
  CounterRng rng(8);
  const auto c = build_iha_polyfilter(random_normalized_adjacency(16, rng), random_uniform({16, 2}, rng), 5);
  EXPECT_EQ(c.output.dim(1), 9u * 2u);
  EXPECT_TRUE(c.report.passed) << c.report.details;
}

TEST(Polyfilter, AllReportsPassUpToN32) {
  for (std::size_t N : {8, 16, 32})
    for (std::size_t d : {2, 3})
      for (std::size_t k : {1, 2, 4, 9, 16}) {
        if (k * d > N) continue;
        for (const auto& r : polyfilter_suite(N, d, k, 3)) EXPECT_TRUE(r.passed) << r.name << " " << r.max_abs_error;
      }
}

TEST(Polyfilter, FormulaCrossoverN64d4) {
  for (std::int64_t k = 9; k <= 200; ++k) EXPECT_LT(iha_polyfilter_formula(64, 4, k), mha_polyfilter_formula(64, 4, k));
  EXPECT_GE(iha_polyfilter_formula(64, 4, 1), mha_polyfilter_formula(64, 4, 1));
}

TEST(CyclicWorkspace, Oracle) {
  EXPECT_EQ(max_abs_diff(cyclic_shift_workspace_oracle({1, 2, 3, 4}), cyclic4()), 0.0);
  EXPECT_EQ(max_abs_diff(cyclic_shift_workspace_oracle({7, 7, 7}), Tensor({3, 3}, 7.0)), 0.0);
  EXPECT_EQ(cyclic_shift_workspace_oracle({9})(0, 0), 9.0);
}

TEST(Cpm3Mha, WorkedExample) {
  auto [c, r] = build_cpm3_workspace_mha(4);
  EXPECT_EQ(max_abs_diff(c.workspace({1, 2, 3, 4}), cyclic4()), 0.0);
  EXPECT_TRUE(r.passed);
  EXPECT_EQ(r.param_count_formula, 256);
}

TEST(Cpm3Mha, SingleToken) {
  auto [c, r] = build_cpm3_workspace_mha(1);
  EXPECT_EQ(c.workspace({5})(0, 0), 5.0);
}

TEST(Cpm3Mha, RandomSequenceLengthSix) {
  auto [c, r] = build_cpm3_workspace_mha(6);
  for (const auto& x : cpm3_probes(6, 10, 9)) EXPECT_EQ(max_abs_diff(c.workspace(x), cyclic_shift_workspace_oracle(x)), 0.0);
}

TEST(Cpm3Iha, WorkedExampleHeads) {
  auto [c, r] = build_cpm3_workspace_iha(4);
  ASSERT_EQ(c.heads(), 2u);
  const Tensor full = c.workspace_full({1, 2, 3, 4});
  EXPECT_EQ(max_abs_diff(slice_cols(full, 0, 2), Tensor::matrix({{1, 2}, {2, 3}, {3, 4}, {4, 1}})), 0.0);
  EXPECT_EQ(max_abs_diff(slice_cols(full, 2, 4), Tensor::matrix({{3, 4}, {4, 1}, {1, 2}, {2, 3}})), 0.0);
  EXPECT_TRUE(r.passed);
  EXPECT_LE(r.param_count_constructed, r.param_count_formula);
}

TEST(Cpm3Iha, SingleToken) {
  auto [c, r] = build_cpm3_workspace_iha(1);
  EXPECT_EQ(c.workspace({3})(0, 0), 3.0);
}

TEST(Cpm3Iha, PaddedPrefixLengthSeven) {
  auto [c, r] = build_cpm3_workspace_iha(7);
  EXPECT_EQ(c.heads(), 3u);
  for (const auto& x : cpm3_probes(7, 10, 10)) {
    const Tensor full = c.workspace_full(x);
    EXPECT_EQ(full.dim(1), 9u);
    EXPECT_EQ(max_abs_diff(slice_cols(full, 0, 7), cyclic_shift_workspace_oracle(x)), 0.0);
  }
}

TEST(Cpm3Count, Examples) {
  EXPECT_EQ(cpm3_count_oracle({1, 2, 3}, 10, 3), (TokenSeq{3, 3, 3}));
  EXPECT_EQ(cpm3_count_oracle({0, 0}, 10, 1), (TokenSeq{4, 4}));
  EXPECT_EQ(cpm3_count_oracle({5, 7, 1, 4}, 10, 4), (TokenSeq{7, 5, 7, 1}));
  EXPECT_THROW(cpm3_count_oracle({1}, 6, 3), std::invalid_argument);
}

TEST(Cpm3Count, AgreesWithHistogramOracle) {
  CounterRng rng(11);
  for (int t = 0; t < 50; ++t) {
    const std::size_t n = static_cast<std::size_t>(rng.uniform_int(1, 9));
    TokenSeq x(n);
    for (auto& v : x) v = rng.uniform_int(0, 30);
    const std::int64_t M = rng.uniform_int(1, 6);
    const std::int64_t G = 2 * M + 1 + rng.uniform_int(0, 5);
    EXPECT_EQ(cpm3_count_oracle(x, G, M), count_by_histogram(x, G, M));
  }
}

TEST(Cpm3Mlp, EndToEndWorkedExample) {
  auto [c, r] = build_cpm3_workspace_iha(3);
  EXPECT_EQ(cpm3_mlp_eval(c.workspace({1, 2, 3}), 3, 10, 3), (TokenSeq{3, 3, 3}));
}

TEST(Cpm3Mlp, SingleToken) {
  auto [c, r] = build_cpm3_workspace_mha(1);
  // The only pair is (1, 1): x + G x + x = 13 x with G = 11.
  EXPECT_EQ(cpm3_mlp_eval(c.workspace({5}), 1, 11, 5), (TokenSeq{1}));
  EXPECT_EQ(cpm3_mlp_eval(c.workspace({1}), 1, 11, 5), (TokenSeq{0}));
}

TEST(Cpm3Mlp, RandomSequencesMatchOracle) {
  for (std::size_t n = 1; n <= 8; ++n) {
    auto [cm, rm] = build_cpm3_workspace_mha(n);
    auto [ci, ri] = build_cpm3_workspace_iha(n);
    for (const auto& x : cpm3_probes(n, 20, 12)) {
      const TokenSeq want = cpm3_count_oracle(x, 10, 3);
      EXPECT_EQ(cpm3_mlp_eval(cm.workspace(x), n, 10, 3), want);
      EXPECT_EQ(cpm3_mlp_eval(ci.workspace_full(x), n, 10, 3), want);
    }
  }
}

TEST(Cpm3Mlp, RejectsNonIntegerWorkspace) {
  Tensor w = cyclic_shift_workspace_oracle({1, 2});
  w(0, 1) = 2.5;
  EXPECT_THROW(cpm3_mlp_eval(w, 2, 10, 3), non_integer_workspace_error);
}

TEST(Cpm3, AllSuitesPassUpTo16) {
  for (std::size_t n = 1; n <= 16; ++n)
    for (const auto& r : cpm3_suite(n, 10, 13)) EXPECT_TRUE(r.passed) << r.name << " " << r.details;
}

TEST(RankBound, Cases) {
  CounterRng rng(14);
  const Tensor x = random_uniform({10, 2}, rng);
  EXPECT_LE(numerical_rank(polyfilter_oracle(Tensor::identity(10), x, 3), 1e-9), 2u);
  EXPECT_EQ(numerical_rank(polyfilter_oracle(random_uniform({10, 10}, rng), Tensor({10, 2}), 3), 1e-9), 0u);
  const auto r = rank_bound_check(10, 2, 3, 20, 1);
  EXPECT_TRUE(r.passed) << r.details;
  EXPECT_LE(r.param_count_constructed, 6);
  EXPECT_THROW(rank_bound_check(4, 2, 3, 1, 1), std::invalid_argument);
}

TEST(Report, JsonRoundTripAndGolden) {
  auto reports = polyfilter_suite(8, 2, 2, 1);
  const nlohmann::json j = reports;
  const auto back = j.get<std::vector<ConstructionReport>>();
  EXPECT_TRUE(compare_to_golden(reports, back).empty());
  auto tampered = back;
  tampered[0].param_count_formula += 1;
  EXPECT_FALSE(compare_to_golden(reports, tampered).empty());
  tampered = back;
  tampered[1].max_abs_error += 1e-6;
  EXPECT_FALSE(compare_to_golden(reports, tampered).empty());
}

TEST(Report, PassRequiresBothConditions) {
  ConstructionReport r;
  r.max_abs_error = 1e-12;
  r.param_count_constructed = 5;
  r.param_count_formula = 6;
  r.finalize();
  EXPECT_FALSE(r.passed);
  r.param_check = ParamCheck::at_most;
  r.finalize();
  EXPECT_TRUE(r.passed);
  r.max_abs_error = 1e-3;
  r.finalize();
  EXPECT_FALSE(r.passed);
}
