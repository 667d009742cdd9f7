// ihalab command-line entry point.
//
// Exit codes: 0 success, 1 verification failure, 2 usage error, 3 runtime error.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

#include "ihalab/ihalab.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ihalab;

namespace {

constexpr int kExitVerifyFailed = 1;
constexpr int kExitUsage = 2;
constexpr int kExitRuntime = 3;

// JSON config files: top-level keys are global flags, nested objects are
// per-subcommand sections. Command-line flags take precedence.
class ConfigJson : public CLI::Config {
 public:
  std::string to_config(const CLI::App* app, bool default_also, bool, std::string) const override {
    json j;
    for (const CLI::Option* opt : app->get_options({})) {
      if (opt->get_lnames().empty() || opt->get_configurable() == false) continue;
      const std::string name = opt->get_lnames()[0];
      if (opt->count() > 0) {
        const auto r = opt->results();
        j[name] = r.size() == 1 ? json(r[0]) : json(r);
      } else if (default_also && !opt->get_default_str().empty()) {
        j[name] = opt->get_default_str();
      }
    }
    return j.dump(2);
  }

  std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
    json j;
    try {
      input >> j;
    } catch (const json::exception& e) {
      throw CLI::ConversionError(std::string("config file is not valid JSON: ") + e.what());
    }
    std::vector<CLI::ConfigItem> items;
    collect(j, {}, items);
    return items;
  }

 private:
  static std::string scalar(const json& v) {
    if (v.is_string()) return v.get<std::string>();
    return v.dump();
  }

  static void collect(const json& j, const std::vector<std::string>& parents, std::vector<CLI::ConfigItem>& out) {
    for (const auto& [key, v] : j.items()) {
      if (v.is_object()) {
        auto p = parents;
        p.push_back(key);
        collect(v, p, out);
        continue;
      }
      CLI::ConfigItem it;
      it.parents = parents;
      it.name = key;
      if (v.is_array()) {
        for (const auto& e : v) it.inputs.push_back(scalar(e));
      } else {
        it.inputs.push_back(scalar(v));
      }
      out.push_back(std::move(it));
    }
  }
};

struct Globals {
  std::uint64_t seed = 0;
  std::string out;
  std::string preset = "desk";
  std::size_t threads = std::max(1u, std::thread::hardware_concurrency());
};

void write_text(const fs::path& path, const std::string& text) {
  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
}

// Runs `jobs` on at most `threads` workers, keeping results in job order.
template <class R>
std::vector<R> run_parallel(const std::vector<std::function<R()>>& jobs, std::size_t threads) {
  std::vector<R> out(jobs.size());
  std::mutex mu;
  std::size_t next = 0;
  std::exception_ptr failure;
  auto worker = [&] {
    for (;;) {
      std::size_t i;
      {
        std::lock_guard lock(mu);
        if (next >= jobs.size() || failure) return;
        i = next++;
      }
      try {
        out[i] = jobs[i]();
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < std::min(threads, jobs.size()); ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  return out;
}

// ---------------------------------------------------------------------------
// verify

struct VerifyArgs {
  std::string suite = "all";
  std::size_t N = 16, d = 3, k = 4, nmax = 4, H = 2, P = 3;
  std::size_t trials = 50, probes = 10;
  std::string golden;
};

json matrix_json(const Tensor& t) {
  json rows = json::array();
  for (std::size_t i = 0; i < t.dim(0); ++i) {
    json r = json::array();
    for (std::size_t j = 0; j < t.dim(1); ++j) r.push_back(t(i, j));
    rows.push_back(r);
  }
  return rows;
}

int run_verify(const VerifyArgs& a, const Globals& g) {
  const bool all = a.suite == "all";
  using Reports = std::vector<ConstructionReport>;
  std::vector<std::function<Reports()>> jobs;
  json extra = json::object();
  if (all || a.suite == "superset") {
    jobs.push_back([=] { return Reports{superset_check(a.H, a.d, a.P, std::min<std::size_t>(a.N, 8), a.trials, g.seed)}; });
    jobs.push_back([=] { return Reports{strictness_check(a.H, a.d, 4, 10, g.seed)}; });
  }
  if (all || a.suite == "polyfilter") jobs.push_back([=] { return polyfilter_suite(a.N, a.d, a.k, g.seed); });
  if (all || a.suite == "cpm3") {
    jobs.push_back([=] { return cpm3_suite(a.nmax, a.probes, g.seed); });
    TokenSeq x(a.nmax);
    for (std::size_t i = 0; i < a.nmax; ++i) x[i] = static_cast<std::int64_t>(i + 1);
    extra["cpm3_workspace"] = {{"x", x}, {"matrix", matrix_json(build_cpm3_workspace_mha(a.nmax).first.workspace(x))}};
  }
  if (all || a.suite == "rank") jobs.push_back([=] { return rank_suite(a.N, a.d, a.k, 20, g.seed); });
  if (jobs.empty()) throw CLI::ValidationError("--suite", "unknown suite '" + a.suite + "'");

  Reports reports;
  for (auto& r : run_parallel(jobs, g.threads)) reports.insert(reports.end(), r.begin(), r.end());

  bool ok = true;
  for (const auto& r : reports)
    if (!r.passed) {
      if (ok) std::cerr << "verify: FAILED " << json(r).dump() << '\n';
      ok = false;
    }
  json doc = {{"suite", a.suite}, {"seed", g.seed}, {"passed", ok}, {"reports", reports}};
  for (const auto& [k, v] : extra.items()) doc[k] = v;

  if (!a.golden.empty()) {
    std::ifstream f(a.golden);
    if (!f) throw std::runtime_error("cannot read golden file " + a.golden);
    const json gj = json::parse(f);
    const Reports golden = (gj.is_array() ? gj : gj.at("reports")).get<Reports>();
    const auto diffs = compare_to_golden(reports, golden);
    doc["golden_diffs"] = diffs;
    if (!diffs.empty()) {
      std::cerr << "verify: golden mismatch: " << diffs.front() << '\n';
      ok = false;
    }
  }
  const std::string text = doc.dump(2) + "\n";
  std::cout << text;
  if (!g.out.empty()) write_text(fs::path(g.out) / "verify.json", text);
  return ok ? 0 : kExitVerifyFailed;
}

// ---------------------------------------------------------------------------
// gen / train / sweep

struct DataArgs {
  std::string task = "binary";
  std::string data;  // existing dataset directory; generated from preset/seed when empty
};

Dataset load_or_generate(const DataArgs& a, const Globals& g) {
  if (!a.data.empty()) return read_dataset(a.data);
  return gen_dataset(make_spec(task_from_string(a.task), preset_from_string(g.preset), g.seed));
}

fs::path out_dir(const Globals& g, const std::string& fallback) { return g.out.empty() ? fs::path(fallback) : fs::path(g.out); }

int run_gen(const DataArgs& a, const Globals& g) {
  const fs::path dir = out_dir(g, "data");
  const Dataset d = gen_dataset(make_spec(task_from_string(a.task), preset_from_string(g.preset), g.seed));
  write_dataset(dir, d);
  std::cout << json{{"out", dir.string()},
                    {"task", to_string(d.spec.task)},
                    {"train", d.train.size()},
                    {"val", d.val.size()},
                    {"test", d.test.size()},
                    {"positive_fraction", d.spec.task == TaskKind::cpm3 ? json(nullptr)
                                                                        : json(positive_fraction(d.train))}}
                   .dump()
            << '\n';
  return 0;
}

struct ModelArgs {
  std::size_t H = 8, d = 2, P = 2;
  TrainOptions train;
  std::string optimizer = "adam";
};

int run_train(const DataArgs& da, const ModelArgs& ma, const std::string& kind_s, bool quiet, const Globals& g) {
  const Dataset data = load_or_generate(da, g);
  const AttentionKind kind = attention_kind_from_string(kind_s);
  TrainOptions o = ma.train;
  o.seed = g.seed;
  o.optimizer = optimizer_from_string(ma.optimizer);
  Model m = init_model(model_for(data.spec, kind, ma.H, ma.d, ma.P), g.seed);
  const TrainResult r = train(m, data, o, [&](const EpochStats& e) {
    if (!quiet)
      std::cerr << "epoch " << e.epoch << " train " << fmt_double(e.train_loss) << " val " << fmt_double(e.val_loss)
                << " val_acc " << fmt_double(e.val_acc) << '\n';
  });
  const fs::path dir = out_dir(g, "runs");
  write_result(dir, kind_s, r);
  save_tensors((dir / (kind_s + ".params.bin")).string(), m.params);
  json summary = result_to_json(r);
  summary.erase("curves");
  std::cout << summary.dump() << '\n';
  return 0;
}

struct SweepArgs {
  std::vector<std::string> kinds{"mha", "iha"};
  std::vector<double> lrs{1e-3, 1e-4};
};

int run_sweep(const DataArgs& da, const ModelArgs& ma, const SweepArgs& sa, const Globals& g) {
  const Dataset data = load_or_generate(da, g);
  SweepOptions o;
  o.kinds.clear();
  for (const auto& k : sa.kinds) o.kinds.push_back(attention_kind_from_string(k));
  o.lrs = sa.lrs;
  o.seed = g.seed;
  o.H = ma.H;
  o.d = ma.d;
  o.P = ma.P;
  o.train = ma.train;
  o.train.optimizer = optimizer_from_string(ma.optimizer);
  o.threads = g.threads;
  const fs::path csv = out_dir(g, "runs") / "sweep.csv";
  const auto rows = sweep(data, o, csv);
  std::cout << kSweepHeader << '\n';
  for (const auto& r : rows) std::cout << sweep_row_csv(r) << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// flops / params / gradcheck

struct FlopArgs {
  std::int64_t N = 8192, d = 128, H = 20, P = 4;
  std::string schedule = "hybrid_4to1";
  std::string global_layer = "mha";
};

int run_flops(const FlopArgs& a, const Globals& g) {
  const json j = flop_report(a.N, a.d, a.H, a.P, schedule_from_string(a.schedule),
                             global_layer_from_string(a.global_layer));
  std::cout << j.dump(2) << '\n';
  if (!g.out.empty()) write_text(fs::path(g.out) / "flops.json", j.dump(2) + "\n");
  return 0;
}

struct ParamArgs {
  std::int64_t N = 16, d = 3, k = 4, nmax = 4, H = 8, P = 2;
};

int run_params(const ParamArgs& a, const Globals& g) {
  std::ostringstream s;
  s << "quantity,N,d,k,n_max,H,P,mha,iha\n";
  s << "iha_extra_params,,,,," << a.H << ',' << a.P << ",0," << iha_extra_params(a.H, a.P) << '\n';
  for (std::int64_t k = 1; k <= a.k; ++k) {
    const auto c = polyfilter_param_counts(a.N, a.d, k);
    s << "polyfilter," << a.N << ',' << a.d << ',' << k << ",,,," << c.mha << ',' << c.iha << '\n';
  }
  s << "polyfilter_crossover_k," << a.N << ',' << a.d << ",,,,,," << polyfilter_crossover(a.N, a.d) << '\n';
  const auto b = cpm3_param_bounds(a.nmax);
  s << "cpm3_bounds,,,," << a.nmax << ",,," << b.mha_lower << ',' << b.iha_upper << '\n';
  std::cout << s.str();
  if (!g.out.empty()) write_text(fs::path(g.out) / "params.csv", s.str());
  return 0;
}

struct GradArgs {
  std::string kind = "both";
  std::size_t P = 2, instances = 10;
  double eps = 1e-5, tol = 1e-4;
};

int run_gradcheck(const GradArgs& a, const Globals& g) {
  std::vector<AttentionKind> kinds;
  if (a.kind == "both") {
    kinds = {AttentionKind::mha, AttentionKind::iha};
  } else {
    kinds = {attention_kind_from_string(a.kind)};
  }
  bool ok = true;
  json doc = json::array();
  for (AttentionKind k : kinds) {
    const auto reps = model_gradcheck(k, a.P, a.instances, g.seed, a.eps, a.tol);
    for (std::size_t i = 0; i < reps.size(); ++i) {
      ok = ok && reps[i].passed();
      doc.push_back({{"kind", to_string(k)},
                     {"instance", i},
                     {"status", reps[i].status_str()},
                     {"max_rel_error", reps[i].max_rel_error}});
    }
  }
  std::cout << doc.dump(2) << '\n';
  return ok ? 0 : kExitVerifyFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ihalab: interleaved head attention toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  app.config_formatter(std::make_shared<ConfigJson>());
  app.set_config("--config", "", "JSON config file (flags override)");

  Globals g;
  app.add_option("--seed", g.seed, "RNG seed");
  app.add_option("--out", g.out, "output directory")->envname("IHALAB_OUT");
  app.add_option("--preset", g.preset, "dataset preset")->check(CLI::IsMember({"paper", "desk"}));
  app.add_option("--threads", g.threads, "worker cap")->check(CLI::PositiveNumber);

  VerifyArgs va;
  auto* verify = app.add_subcommand("verify", "check weight constructions against oracles");
  verify->add_option("--suite", va.suite)->check(CLI::IsMember({"all", "superset", "polyfilter", "cpm3", "rank"}));
  verify->add_option("--N", va.N)->check(CLI::PositiveNumber);
  verify->add_option("--d", va.d)->check(CLI::PositiveNumber);
  verify->add_option("--k", va.k)->check(CLI::PositiveNumber);
  verify->add_option("--nmax", va.nmax)->check(CLI::PositiveNumber);
  verify->add_option("--H", va.H)->check(CLI::PositiveNumber);
  verify->add_option("--P", va.P)->check(CLI::PositiveNumber);
  verify->add_option("--trials", va.trials)->check(CLI::PositiveNumber);
  verify->add_option("--probes", va.probes)->check(CLI::PositiveNumber);
  verify->add_option("--golden", va.golden, "stored reports to compare against")->check(CLI::ExistingFile);

  DataArgs da;
  auto add_data = [&](CLI::App* sc, bool with_dir) {
    sc->add_option("--task", da.task)->check(CLI::IsMember({"binary", "ternary", "cpm3"}));
    if (with_dir) sc->add_option("--data", da.data, "dataset directory written by gen")->check(CLI::ExistingDirectory);
  };
  ModelArgs ma;
  auto add_model = [&](CLI::App* sc) {
    sc->add_option("--H", ma.H)->check(CLI::PositiveNumber);
    sc->add_option("--d", ma.d)->check(CLI::PositiveNumber);
    sc->add_option("--P", ma.P)->check(CLI::PositiveNumber);
    sc->add_option("--lr", ma.train.lr)->check(CLI::NonNegativeNumber);
    sc->add_option("--epochs", ma.train.max_epochs);
    sc->add_option("--patience", ma.train.patience)->check(CLI::PositiveNumber);
    sc->add_option("--batch", ma.train.batch)->check(CLI::PositiveNumber);
    sc->add_option("--optimizer", ma.optimizer)->check(CLI::IsMember({"adam", "sgd"}));
  };

  auto* gen = app.add_subcommand("gen", "generate a dataset (JSONL splits + manifest)");
  add_data(gen, false);

  std::string kind = "iha";
  bool quiet = false;
  auto* trn = app.add_subcommand("train", "train one model");
  add_data(trn, true);
  add_model(trn);
  trn->add_option("--kind", kind)->check(CLI::IsMember({"mha", "iha"}));
  trn->add_flag("--quiet", quiet, "no per-epoch progress on stderr");

  SweepArgs sa;
  auto* swp = app.add_subcommand("sweep", "kinds x learning rates grid, resumable CSV");
  add_data(swp, true);
  add_model(swp);
  swp->add_option("--kinds", sa.kinds)->check(CLI::IsMember({"mha", "iha"}));
  swp->add_option("--lrs", sa.lrs)->check(CLI::PositiveNumber);

  FlopArgs fa;
  auto* flops = app.add_subcommand("flops", "attention FLOP report (JSON)");
  flops->add_option("--N", fa.N)->check(CLI::PositiveNumber);
  flops->add_option("--d", fa.d)->check(CLI::PositiveNumber);
  flops->add_option("--H", fa.H)->check(CLI::PositiveNumber);
  flops->add_option("--P", fa.P)->check(CLI::PositiveNumber);
  flops->add_option("--schedule", fa.schedule)->check(CLI::IsMember({"global", "hybrid_4to1", "hybrid"}));
  flops->add_option("--global-layer", fa.global_layer)->check(CLI::IsMember({"mha", "iha"}));

  ParamArgs pa;
  auto* params = app.add_subcommand("params", "closed-form parameter counts (CSV)");
  params->add_option("--N", pa.N)->check(CLI::PositiveNumber);
  params->add_option("--d", pa.d)->check(CLI::PositiveNumber);
  params->add_option("--k", pa.k)->check(CLI::PositiveNumber);
  params->add_option("--nmax", pa.nmax)->check(CLI::PositiveNumber);
  params->add_option("--H", pa.H)->check(CLI::PositiveNumber);
  params->add_option("--P", pa.P)->check(CLI::PositiveNumber);

  GradArgs ga;
  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of model gradients");
  grad->add_option("--kind", ga.kind)->check(CLI::IsMember({"mha", "iha", "both"}));
  grad->add_option("--P", ga.P)->check(CLI::PositiveNumber);
  grad->add_option("--instances", ga.instances)->check(CLI::PositiveNumber);
  grad->add_option("--eps", ga.eps);
  grad->add_option("--tol", ga.tol);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*verify) return run_verify(va, g);
    if (*gen) return run_gen(da, g);
    if (*trn) return run_train(da, ma, kind, quiet, g);
    if (*swp) return run_sweep(da, ma, sa, g);
    if (*flops) return run_flops(fa, g);
    if (*params) return run_params(pa, g);
    if (*grad) return run_gradcheck(ga, g);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "ihalab: configuration error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "ihalab: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}
