#pragma once

// Training loop, evaluation and learning-rate sweeps for the toy model.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "autodiff.hpp"
#include "model.hpp"
#include "rng.hpp"
#include "tasks.hpp"

namespace ihalab {

enum class Optimizer { sgd, adam };

inline std::string to_string(Optimizer o) { return o == Optimizer::sgd ? "sgd" : "adam"; }

inline Optimizer optimizer_from_string(const std::string& s) {
  if (s == "sgd") return Optimizer::sgd;
  if (s == "adam") return Optimizer::adam;
  throw std::invalid_argument("unknown optimizer '" + s + "' (sgd|adam)");
}

struct TrainOptions {
  double lr = 1e-3;
  std::size_t max_epochs = 30;
  std::size_t patience = 10;
  std::size_t batch = 32;
  std::uint64_t seed = 0;
  Optimizer optimizer = Optimizer::adam;
  double adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-8;

  void validate() const {
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw std::invalid_argument("train: lr must be finite and >= 0");
    if (patience < 1) throw std::invalid_argument("train: patience must be >= 1");
    if (batch < 1) throw std::invalid_argument("train: batch must be >= 1");
  }
};

struct EpochStats {
  std::size_t epoch = 0;
  double train_loss = 0.0, train_acc = 0.0;
  double val_loss = 0.0, val_acc = 0.0;
  bool operator==(const EpochStats&) const = default;
};

struct TrainResult {
  std::string kind;
  double lr = 0.0;
  std::uint64_t seed = 0;
  std::vector<EpochStats> curves;  // epoch 0 is the untrained model
  std::size_t best_epoch = 0;
  std::size_t epochs_run = 0;
  double initial_train_loss = 0.0;
  double final_train_loss = 0.0;  // restored best-val parameters
  double test_loss = 0.0;
  double test_accuracy = 0.0;
  std::size_t param_count = 0;
  double wall_seconds = 0.0;  // kept out of the JSON, see write_result
};

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
  std::size_t positions = 0;
};

// Per-position outputs for one example, aligned with its valid positions.
using Predictor = std::function<std::vector<double>(const TaskExample&)>;

inline double position_loss(OutputHead head, double out, double target) {
  if (head == OutputHead::count) return (out - target) * (out - target);
  return std::max(out, 0.0) - out * target + std::log1p(std::exp(-std::abs(out)));
}

inline bool position_correct(OutputHead head, double out, double target) {
  if (head == OutputHead::count) return std::llround(out) == std::llround(target);
  return (out > 0.0) == (target > 0.5);
}

// Loss and accuracy over valid positions; examples with no valid position are skipped.
inline EvalResult evaluate(const Predictor& predict, const std::vector<TaskExample>& data, OutputHead head) {
  double loss = 0.0;
  std::size_t correct = 0, count = 0;
  for (const auto& ex : data) {
    std::vector<double> targets;
    for (std::size_t i = 0; i < ex.length(); ++i)
      if (ex.valid_mask[i]) targets.push_back(static_cast<double>(ex.targets[i]));
    if (targets.empty()) continue;
    const auto out = predict(ex);
    if (out.size() != targets.size()) throw dimension_error("evaluate: predictor output length mismatch");
    for (std::size_t i = 0; i < out.size(); ++i) {
      loss += position_loss(head, out[i], targets[i]);
      correct += position_correct(head, out[i], targets[i]) ? 1 : 0;
    }
    count += targets.size();
  }
  EvalResult r;
  r.positions = count;
  if (count) {
    r.loss = loss / static_cast<double>(count);
    r.accuracy = static_cast<double>(correct) / static_cast<double>(count);
  }
  return r;
}

inline Predictor model_predictor(const Model& m) {
  return [&m](const TaskExample& ex) { return model_outputs(m, view_of(m.config, ex)); };
}

inline EvalResult evaluate(const Model& m, const std::vector<TaskExample>& data) {
  return evaluate(model_predictor(m), data, m.config.head);
}

// Targets pushed through as confident outputs.
inline Predictor oracle_predictor(OutputHead head) {
  return [head](const TaskExample& ex) {
    std::vector<double> out;
    for (std::size_t i = 0; i < ex.length(); ++i) {
      if (!ex.valid_mask[i]) continue;
      const double t = static_cast<double>(ex.targets[i]);
      out.push_back(head == OutputHead::count ? t : (t > 0.5 ? 20.0 : -20.0));
    }
    return out;
  };
}

namespace detail {

class AdamState {
 public:
  explicit AdamState(const NamedParams& ps) {
    for (const auto& [n, t] : ps) {
      m_.emplace_back(t.shape());
      v_.emplace_back(t.shape());
    }
  }

  void step(NamedParams& ps, const std::map<std::size_t, Tensor>& grads, const TrainOptions& o) {
    ++t_;
    const double c1 = 1.0 - std::pow(o.adam_beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(o.adam_beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < ps.size(); ++i) {
      const Tensor& g = grads.at(i);
      Tensor& w = ps[i].second;
      for (std::size_t e = 0; e < w.size(); ++e) {
        m_[i][e] = o.adam_beta1 * m_[i][e] + (1.0 - o.adam_beta1) * g[e];
        v_[i][e] = o.adam_beta2 * v_[i][e] + (1.0 - o.adam_beta2) * g[e] * g[e];
        w[e] -= o.lr * (m_[i][e] / c1) / (std::sqrt(v_[i][e] / c2) + o.adam_eps);
      }
    }
  }

 private:
  std::vector<Tensor> m_, v_;
  std::uint64_t t_ = 0;
};

inline std::vector<std::size_t> shuffled_order(std::size_t n, CounterRng rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i - 1)));
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

}  // namespace detail

using EpochCallback = std::function<void(const EpochStats&)>;

inline TrainResult train(Model& model, const Dataset& data, const TrainOptions& opt,
                         const EpochCallback& on_epoch = nullptr) {
  opt.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const OutputHead head = model.config.head;
  TrainResult res;
  res.kind = to_string(model.config.kind);
  res.lr = opt.lr;
  res.seed = opt.seed;
  res.param_count = model.param_count();

  std::vector<ExampleView> train_views;
  train_views.reserve(data.train.size());
  for (const auto& ex : data.train) train_views.push_back(view_of(model.config, ex));

  EpochStats e0;
  {
    const EvalResult tr = evaluate(model, data.train), va = evaluate(model, data.val);
    e0 = {0, tr.loss, tr.accuracy, va.loss, va.accuracy};
  }
  res.curves.push_back(e0);
  res.initial_train_loss = e0.train_loss;
  if (on_epoch) on_epoch(e0);

  NamedParams best = model.params;
  double best_val = e0.val_loss;
  std::size_t stale = 0;
  detail::AdamState adam(model.params);
  const CounterRng shuffle_rng = CounterRng(opt.seed).substream("shuffle");

  for (std::size_t epoch = 1; epoch <= opt.max_epochs; ++epoch) {
    const auto order = detail::shuffled_order(train_views.size(), shuffle_rng.substream(epoch));
    double loss_sum = 0.0;
    std::size_t correct = 0, seen = 0;
    for (std::size_t start = 0, bi = 0; start < order.size(); start += opt.batch, ++bi) {
      const std::size_t stop = std::min(order.size(), start + opt.batch);
      std::size_t count = 0;
      for (std::size_t i = start; i < stop; ++i) count += train_views[order[i]].positions.size();
      if (count == 0) continue;

      Tape tape;
      const auto leaves = param_leaves(tape, model);
      Var total = tape.constant(Tensor::scalar(0.0));
      for (std::size_t i = start; i < stop; ++i) {
        const ExampleView& v = train_views[order[i]];
        if (v.positions.empty()) continue;
        const Var out = model_forward(model, leaves, v);
        for (std::size_t p = 0; p < v.targets.size(); ++p)
          correct += position_correct(head, out.value()[p], v.targets[p]) ? 1 : 0;
        const std::vector<bool> mask(v.targets.size(), true);
        total = ad::add(total, head == OutputHead::binary_logit ? ad::bce_with_logits_sum(out, v.targets, mask)
                                                                : ad::mse_sum(out, v.targets, mask));
      }
      const Var loss = ad::scale(total, 1.0 / static_cast<double>(count));
      if (!std::isfinite(loss.value()[0]))
        throw non_finite_error("non-finite training loss at epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(bi));
      loss_sum += total.value()[0];
      seen += count;
      const auto grads = tape.backward(loss);
      if (opt.optimizer == Optimizer::adam) {
        adam.step(model.params, grads, opt);
      } else {
        for (std::size_t i = 0; i < model.params.size(); ++i) {
          Tensor& w = model.params[i].second;
          const Tensor& g = grads.at(i);
          for (std::size_t e = 0; e < w.size(); ++e) w[e] -= opt.lr * g[e];
        }
      }
    }
    const EvalResult va = evaluate(model, data.val);
    EpochStats st{epoch, seen ? loss_sum / static_cast<double>(seen) : 0.0,
                  seen ? static_cast<double>(correct) / static_cast<double>(seen) : 0.0, va.loss, va.accuracy};
    res.curves.push_back(st);
    res.epochs_run = epoch;
    if (on_epoch) on_epoch(st);
    if (va.loss < best_val) {
      best_val = va.loss;
      best = model.params;
      res.best_epoch = epoch;
      stale = 0;
    } else if (++stale >= opt.patience) {
      break;
    }
  }

  model.params = best;
  res.final_train_loss = evaluate(model, data.train).loss;
  const EvalResult te = evaluate(model, data.test);
  res.test_loss = te.loss;
  res.test_accuracy = te.accuracy;
  res.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

// ---------------------------------------------------------------------------
// Output

inline nlohmann::json result_to_json(const TrainResult& r) {
  nlohmann::json curves = nlohmann::json::array();
  for (const auto& e : r.curves)
    curves.push_back({{"epoch", e.epoch},
                      {"train_loss", e.train_loss},
                      {"train_acc", e.train_acc},
                      {"val_loss", e.val_loss},
                      {"val_acc", e.val_acc}});
  return {{"kind", r.kind},
          {"lr", r.lr},
          {"seed", r.seed},
          {"best_epoch", r.best_epoch},
          {"epochs_run", r.epochs_run},
          {"initial_train_loss", r.initial_train_loss},
          {"final_train_loss", r.final_train_loss},
          {"test_loss", r.test_loss},
          {"test_accuracy", r.test_accuracy},
          {"param_count", r.param_count},
          {"curves", curves}};
}

inline std::string fmt_double(double v) {
  std::ostringstream s;
  s.precision(17);
  s << v;
  return s.str();
}

inline void write_curves_csv(const std::filesystem::path& path, const TrainResult& r) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << "epoch,split,loss,acc\n";
  for (const auto& e : r.curves) {
    f << e.epoch << ",train," << fmt_double(e.train_loss) << ',' << fmt_double(e.train_acc) << '\n';
    f << e.epoch << ",val," << fmt_double(e.val_loss) << ',' << fmt_double(e.val_acc) << '\n';
  }
}

// result.json is reproducible; timing goes to a sidecar.
inline void write_result(const std::filesystem::path& dir, const std::string& stem, const TrainResult& r) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream f(dir / (stem + ".json"));
    if (!f) throw std::runtime_error("cannot write result in " + dir.string());
    f << result_to_json(r).dump(2) << '\n';
  }
  write_curves_csv(dir / (stem + ".curves.csv"), r);
  std::ofstream f(dir / (stem + ".timing.json"));
  f << nlohmann::json{{"wall_seconds", r.wall_seconds}}.dump() << '\n';
}

// ---------------------------------------------------------------------------
// Sweeps

struct SweepCell {
  AttentionKind kind = AttentionKind::mha;
  double lr = 1e-3;
  std::uint64_t seed = 0;
};

struct SweepRow {
  std::string kind;
  double lr = 0.0;
  std::uint64_t seed = 0;
  double test_accuracy = 0.0;
  std::size_t epochs = 0;
  std::size_t best_epoch = 0;
  double initial_train_loss = 0.0;
  double final_train_loss = 0.0;
  std::size_t param_count = 0;
};

inline const char* kSweepHeader =
    "kind,lr,seed,test_accuracy,epochs,best_epoch,initial_train_loss,final_train_loss,param_count";

inline std::string sweep_row_csv(const SweepRow& r) {
  std::ostringstream s;
  s << r.kind << ',' << fmt_double(r.lr) << ',' << r.seed << ',' << fmt_double(r.test_accuracy) << ',' << r.epochs
    << ',' << r.best_epoch << ',' << fmt_double(r.initial_train_loss) << ',' << fmt_double(r.final_train_loss) << ','
    << r.param_count;
  return s.str();
}

inline std::vector<SweepRow> read_sweep_csv(const std::filesystem::path& path) {
  std::vector<SweepRow> rows;
  std::ifstream f(path);
  if (!f) return rows;
  std::string line;
  std::getline(f, line);
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cols.push_back(c);
    if (cols.size() != 9) continue;  // a partially written line from an interrupted run
    SweepRow r;
    r.kind = cols[0];
    r.lr = std::stod(cols[1]);
    r.seed = std::stoull(cols[2]);
    r.test_accuracy = std::stod(cols[3]);
    r.epochs = std::stoul(cols[4]);
    r.best_epoch = std::stoul(cols[5]);
    r.initial_train_loss = std::stod(cols[6]);
    r.final_train_loss = std::stod(cols[7]);
    r.param_count = std::stoul(cols[8]);
    rows.push_back(r);
  }
  return rows;
}

struct SweepOptions {
  std::vector<AttentionKind> kinds{AttentionKind::mha, AttentionKind::iha};
  std::vector<double> lrs{1e-3, 1e-4};
  std::uint64_t seed = 0;
  std::size_t H = 8, d = 2, P = 2;
  TrainOptions train;
  std::size_t threads = 1;
};

inline bool same_cell(const SweepRow& r, const SweepCell& c) {
  return r.kind == to_string(c.kind) && r.lr == c.lr && r.seed == c.seed;
}

// One row per (kind, lr) cell. Rows already present in `csv` are reused;
// the file is rewritten in grid order at the end.
inline std::vector<SweepRow> sweep(const Dataset& data, const SweepOptions& o, const std::filesystem::path& csv) {
  if (o.kinds.empty() || o.lrs.empty()) throw std::invalid_argument("sweep: empty grid");
  std::vector<SweepCell> cells;
  for (auto k : o.kinds)
    for (double lr : o.lrs) cells.push_back({k, lr, o.seed});

  const auto existing = read_sweep_csv(csv);
  std::vector<std::optional<SweepRow>> rows(cells.size());
  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    for (const auto& r : existing)
      if (same_cell(r, cells[i])) rows[i] = r;
    if (!rows[i]) todo.push_back(i);
  }
  if (!csv.parent_path().empty()) std::filesystem::create_directories(csv.parent_path());
  if (existing.empty()) {
    std::ofstream f(csv);
    f << kSweepHeader << '\n';
  }

  std::mutex mu;
  std::size_t next = 0;
  std::exception_ptr failure;
  auto worker = [&] {
    for (;;) {
      std::size_t i;
      {
        std::lock_guard lock(mu);
        if (next >= todo.size() || failure) return;
        i = todo[next++];
      }
      try {
        const SweepCell& c = cells[i];
        Model m = init_model(model_for(data.spec, c.kind, o.H, o.d, o.P), c.seed);
        TrainOptions to = o.train;
        to.lr = c.lr;
        to.seed = c.seed;
        const TrainResult tr = train(m, data, to);
        SweepRow row{tr.kind, c.lr, c.seed, tr.test_accuracy, tr.epochs_run, tr.best_epoch, tr.initial_train_loss,
                     tr.final_train_loss, tr.param_count};
        std::lock_guard lock(mu);
        rows[i] = row;
        std::ofstream f(csv, std::ios::app);
        f << sweep_row_csv(row) << '\n';
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const std::size_t nthreads = std::max<std::size_t>(1, std::min(o.threads, todo.size()));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < nthreads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);

  std::vector<SweepRow> out;
  std::ofstream f(csv);
  f << kSweepHeader << '\n';
  for (const auto& r : rows) {
    out.push_back(*r);
    f << sweep_row_csv(*r) << '\n';
  }
  return out;
}

}  // namespace ihalab
