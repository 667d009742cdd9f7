// End-to-end acceptance run: one PASS/FAIL line per criterion.

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <tuple>

#include "ihalab/ihalab.hpp"

using namespace ihalab;

namespace {

struct Outcome {
  bool ok = true;
  std::ostringstream note;

  void require(bool cond, const std::string& what) {
    if (!cond) {
      if (!ok) note << "; ";
      note << "failed: " << what;
      ok = false;
    }
  }
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

// Criterion 1: IHA with identity mixing reproduces MHA.
void superset(Outcome& o) {
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::size_t pairs = 0;
  bool all = true;
  for (std::size_t H : {1, 2, 4})
    for (std::size_t d : {2, 4})
      for (std::size_t N : {1, 3, 8})
        for (std::size_t P : {1, 2, 3}) {
          const ConstructionReport r = superset_check(H, d, P, N, 1, 1000 * H + 100 * d + 10 * N + P);
          worst = std::max(worst, r.max_abs_error);
          all = all && r.passed;
          ++pairs;
        }
  const double t = seconds_since(t0);
  o.require(pairs >= 50, "at least 50 pairs");
  o.require(all && worst <= 1e-10, "max error <= 1e-10");
  o.require(t < 10.0, "runtime < 10 s");
  o.note << (o.ok ? "" : "; ") << pairs << " pairs, max err " << worst << ", " << t << " s";
}

// Criterion 2: MHA linear on repeated tokens; the witness is not.
void strictness(Outcome& o) {
  const StrictnessResult s = strictness_probe(2, 2, 4, 10, 2);
  o.require(s.mha_residual <= 1e-9, "MHA residual <= 1e-9");
  o.require(s.nonlinear_hits >= 1 && s.witness_nonlinearity > 1e-3, "witness nonlinear on >= 1 of 10");
  o.note << (o.ok ? "" : "; ") << "MHA residual " << s.mha_residual << ", witness gap " << s.witness_nonlinearity
         << " (" << s.nonlinear_hits << "/10)";
}

// Criterion 3: polynomial filter constructions.
void polyfilter(Outcome& o) {
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::size_t configs = 0;
  bool counts = true, within = true;
  for (std::size_t N : {8, 16, 32})
    for (std::size_t d : {2, 3})
      for (std::size_t k : {1, 2, 4, 9, 16}) {
        if (k * d > N) continue;
        for (const auto& r : polyfilter_suite(N, d, k, 3)) {
          worst = std::max(worst, r.max_abs_error);
          within = within && r.max_abs_error <= 1e-9;
          counts = counts && r.param_check == ParamCheck::exact && r.params_ok();
        }
        ++configs;
      }
  o.require(within, "both constructions within 1e-9");
  o.require(counts, "constructed counts equal closed forms");

  CounterRng rng(33);
  const Tensor a = random_normalized_adjacency(16, rng);
  const Tensor x = random_uniform({16, 3}, rng);
  std::vector<Tensor> powers{x};
  for (int i = 1; i < 4; ++i) powers.push_back(matmul(a, powers.back()));
  const Tensor want = hconcat(powers);
  const double e_mha = max_abs_diff(build_mha_polyfilter(a, x, 4).output, want);
  const double e_iha = max_abs_diff(build_iha_polyfilter(a, x, 4).output, want);
  o.require(e_mha <= 1e-9 && e_iha <= 1e-9, "k=4 example reproduces [X, AX, A^2X, A^3X]");
  const double t = seconds_since(t0);
  o.require(t < 30.0, "runtime < 30 s");
  o.note << (o.ok ? "" : "; ") << configs << " configs, max err " << worst << ", k=4 example err "
         << std::max(e_mha, e_iha) << ", " << t << " s";
}

// Criterion 4: CPM-3 workspaces and counts.
void cpm3(Outcome& o) {
  const auto t0 = Clock::now();
  const TokenSeq x{1, 2, 3, 4};
  const Tensor want = Tensor::matrix({{1, 2, 3, 4}, {2, 3, 4, 1}, {3, 4, 1, 2}, {4, 1, 2, 3}});
  const Tensor ws_mha = build_cpm3_workspace_mha(4).first.workspace(x);
  const Tensor ws_iha = build_cpm3_workspace_iha(4).first.workspace(x);
  o.require(max_abs_diff(ws_mha, want) == 0.0 && max_abs_diff(ws_iha, want) == 0.0, "(a) 4x4 cyclic matrix");

  bool suites = true;
  for (std::size_t n = 1; n <= 10; ++n)
    for (const auto& r : cpm3_suite(n, 10, 4)) suites = suites && r.passed;
  o.require(suites, "(b) n_max 1..10 workspaces and counts exact");

  const TokenSeq y{1, 2, 3};
  const TokenSeq expect{3, 3, 3};
  const auto [c3, r3] = build_cpm3_workspace_mha(3);
  o.require(cpm3_count_oracle(y, 10, 3) == expect && cpm3_mlp_eval(c3.workspace(y), 3, 10, 3) == expect,
            "(c) (1,2,3) -> (3,3,3)");
  const double t = seconds_since(t0);
  o.require(t < 30.0, "runtime < 30 s");
  o.note << (o.ok ? "" : "; ") << t << " s";
}

// Criterion 5: virtual token ordering.
void ordering(Outcome& o) {
  CounterRng rng(5);
  double worst_plain = 0.0, least_rotary = 1e300;
  for (int c = 0; c < 20; ++c) {
    const std::size_t H = static_cast<std::size_t>(rng.uniform_int(1, 3));
    const std::size_t d = 2 * static_cast<std::size_t>(rng.uniform_int(1, 2));
    const std::size_t P = static_cast<std::size_t>(rng.uniform_int(2, 4));
    const std::size_t N = static_cast<std::size_t>(rng.uniform_int(2, 6));
    const IhaParams p = random_iha_params(H, d, P, rng);
    const Tensor x = random_normal({N, H * d}, rng);
    AttentionConfig cfg = AttentionConfig::make(N, H, d, P);
    worst_plain = std::max(worst_plain, max_abs_diff(iha_forward(x, p, cfg, Ordering::interleaved),
                                                     iha_forward(x, p, cfg, Ordering::pseudo_major)));
    cfg.rotary_theta = 10.0;
    least_rotary = std::min(least_rotary, max_abs_diff(iha_forward(x, p, cfg, Ordering::interleaved),
                                                       iha_forward(x, p, cfg, Ordering::pseudo_major)));
  }
  o.require(worst_plain <= 1e-10, "no positions: orderings agree within 1e-10");
  o.require(least_rotary > 1e-6, "rotary: orderings differ by > 1e-6");
  o.note << (o.ok ? "" : "; ") << "max diff without positions " << worst_plain << ", min diff with rotary "
         << least_rotary;
}

// Criterion 6: finite-difference gradient checks.
void gradients(Outcome& o) {
  const auto t0 = Clock::now();
  double worst = 0.0;
  bool all = true;
  for (AttentionKind k : {AttentionKind::mha, AttentionKind::iha})
    for (const auto& r : model_gradcheck(k, 2, 10, 6, 1e-5, 1e-4)) {
      worst = std::max(worst, r.max_rel_error);
      all = all && r.passed();
    }
  const double t = seconds_since(t0);
  o.require(all && worst <= 1e-4, "relative error <= 1e-4");
  o.require(t < 60.0, "runtime < 60 s");
  o.note << (o.ok ? "" : "; ") << "20 instances, max rel err " << worst << ", " << t << " s";
}

// Criterion 7: FLOP and parameter analysis.
void analysis(Outcome& o) {
  const FlopReport r = flop_report(8192, 128, 20, 4, Schedule::hybrid_4to1);
  o.require(r.window && *r.window == 256, "W(8192, P=4) = 256");
  o.require(std::abs(r.ratio - 0.6) <= 1e-12, "hybrid ratio 0.6");
  CounterRng rng(7);
  bool tally = true;
  for (std::size_t H : {1, 2, 3, 8})
    for (std::size_t P : {1, 2, 4}) {
      const IhaParams p = random_iha_params(H, 2, P, rng);
      const std::size_t direct = p.alpha_q.size() + p.alpha_k.size() + p.alpha_v.size() + p.collapse.size();
      tally = tally && static_cast<std::int64_t>(direct) ==
                           iha_extra_params(static_cast<std::int64_t>(H), static_cast<std::int64_t>(P));
    }
  o.require(tally, "iha_extra_params matches direct tally");
  o.note << (o.ok ? "" : "; ") << "W=" << (r.window ? *r.window : 0) << ", ratio " << r.ratio;
}

// Criterion 8: desk-scale training of both models.
void desk_training(Outcome& o) {
  const auto t0 = Clock::now();
  const Dataset data = gen_dataset(make_spec(TaskKind::binary_comp, Preset::desk, 0));
  const double balance = positive_fraction(data.train);
  o.require(balance >= 0.35 && balance <= 0.65, "label balance in [0.35, 0.65]");
  TrainOptions opt;
  opt.lr = 1e-3;
  opt.patience = 10;
  opt.max_epochs = 30;
  opt.seed = 0;
  o.note << (o.ok ? "" : "; ") << "balance " << balance;
  for (AttentionKind kind : {AttentionKind::mha, AttentionKind::iha}) {
    const ModelConfig cfg = model_for(data.spec, kind, 8, 2, 2);
    Model m = init_model(cfg, 0);
    const TrainResult r = train(m, data, opt);
    const std::string k = to_string(kind);
    o.require(r.final_train_loss <= 0.7 * r.initial_train_loss, k + " final BCE <= 0.7 x initial");
    o.require(r.test_accuracy > 0.55, k + " test accuracy > 0.55");

    Model again = init_model(cfg, 0);
    TrainOptions short_opt = opt;
    short_opt.max_epochs = 2;
    const TrainResult r2 = train(again, data, short_opt);
    bool same = r2.curves.size() == 3;
    for (std::size_t e = 0; same && e < r2.curves.size(); ++e)
      same = r2.curves[e].train_loss == r.curves[e].train_loss && r2.curves[e].val_loss == r.curves[e].val_loss;
    o.require(same, k + " bit-reproducible");
    o.note << "; " << k << " BCE " << r.initial_train_loss << " -> " << r.final_train_loss << " ("
           << r.final_train_loss / r.initial_train_loss << "x), test acc " << r.test_accuracy << ", "
           << r.epochs_run << " epochs";
  }
  const double t = seconds_since(t0);
  o.require(t < 900.0, "runtime < 15 min");
  o.note << "; " << t << " s";
}

// Criterion 9: numerical rank of the filter output.
void rank_bound(Outcome& o) {
  bool all = true;
  std::size_t instances = 0;
  for (auto [N, d, k] : {std::tuple<std::size_t, std::size_t, std::size_t>{16, 2, 4}, {16, 3, 2}, {32, 2, 9}}) {
    const ConstructionReport r = rank_bound_check(N, d, k, 20, 9, 1e-9);
    all = all && r.passed;
    instances += 20;
  }
  o.require(all, "rank <= k*d");
  o.note << (o.ok ? "" : "; ") << instances << " instances";
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<void(Outcome&)>>> criteria{
      {"superset inclusion", superset},  {"strictness", strictness},       {"polynomial filters", polyfilter},
      {"cpm3 workspaces", cpm3},         {"ordering equivalence", ordering}, {"gradient checks", gradients},
      {"flop and param analysis", analysis}, {"desk training", desk_training}, {"rank bound", rank_bound}};
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      criteria[i].second(o);
    } catch (const std::exception& e) {
      o.require(false, std::string("exception: ") + e.what());
    }
    std::cout << "criterion " << (i + 1) << " " << (o.ok ? "PASS" : "FAIL") << " [" << criteria[i].first << "] "
              << o.note.str() << std::endl;
    failures += o.ok ? 0 : 1;
  }
  return failures == 0 ? 0 : 1;
}
