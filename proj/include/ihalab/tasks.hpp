#pragma once

// Synthetic datasets: boolean relation composition (2 and 3 hops) and CPM-3
// counting, generated from counter-based substreams so every example is a
// pure function of (seed, task, split, index).

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "constructions.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace ihalab {

enum class TaskKind { binary_comp, ternary_comp, cpm3 };
enum class Split { train, val, test };

inline std::string to_string(TaskKind k) {
  switch (k) {
    case TaskKind::binary_comp: return "binary";
    case TaskKind::ternary_comp: return "ternary";
    case TaskKind::cpm3: return "cpm3";
  }
  return "?";
}

inline TaskKind task_from_string(const std::string& s) {
  if (s == "binary" || s == "binary_comp") return TaskKind::binary_comp;
  if (s == "ternary" || s == "ternary_comp") return TaskKind::ternary_comp;
  if (s == "cpm3") return TaskKind::cpm3;
  throw std::invalid_argument("unknown task '" + s + "' (binary|ternary|cpm3)");
}

inline std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

inline constexpr Split kSplits[] = {Split::train, Split::val, Split::test};

struct ExampleMeta {
  TaskKind task = TaskKind::binary_comp;
  std::size_t size = 0;  // m for composition, n for cpm3
  std::uint64_t seed = 0;
  std::uint64_t index = 0;
  bool operator==(const ExampleMeta&) const = default;
};

struct TaskExample {
  std::vector<std::int64_t> tokens;
  std::vector<std::int64_t> targets;
  std::vector<bool> valid_mask;
  ExampleMeta meta;

  std::size_t length() const { return tokens.size(); }
  bool operator==(const TaskExample&) const = default;
};

struct SplitCounts {
  std::size_t train = 0, val = 0, test = 0;

  std::size_t of(Split s) const {
    switch (s) {
      case Split::train: return train;
      case Split::val: return val;
      case Split::test: return test;
    }
    return 0;
  }
};

struct DatasetSpec {
  TaskKind task = TaskKind::binary_comp;
  std::size_t size_min = 6, size_max = 10;  // m range, or n range for cpm3
  double bernoulli_p = 0.325;
  SplitCounts counts{40000, 5000, 5000};
  std::uint64_t seed = 0;
  std::int64_t G = 10, M = 3;
  std::int64_t vocab_max = 10;  // cpm3 tokens are drawn from [0, vocab_max)

  std::size_t hops() const { return task == TaskKind::ternary_comp ? 3 : 2; }

  void validate() const {
    if (size_min < 1 || size_min > size_max) throw std::invalid_argument("dataset spec: bad size range");
    if (task != TaskKind::cpm3 && !(bernoulli_p > 0.0 && bernoulli_p < 1.0))
      throw std::invalid_argument("dataset spec: bernoulli_p must lie in (0, 1)");
    if (task == TaskKind::cpm3) {
      if (M < 1 || G <= 2 * M) throw std::invalid_argument("dataset spec: requires G > 2M and M >= 1");
      if (vocab_max < 1) throw std::invalid_argument("dataset spec: vocab_max must be >= 1");
    }
  }
};

enum class Preset { paper, desk };

inline Preset preset_from_string(const std::string& s) {
  if (s == "paper") return Preset::paper;
  if (s == "desk") return Preset::desk;
  throw std::invalid_argument("unknown preset '" + s + "' (paper|desk)");
}

inline std::string to_string(Preset p) { return p == Preset::paper ? "paper" : "desk"; }

inline DatasetSpec make_spec(TaskKind task, Preset preset, std::uint64_t seed) {
  DatasetSpec s;
  s.task = task;
  s.seed = seed;
  s.counts = preset == Preset::paper ? SplitCounts{40000, 5000, 5000} : SplitCounts{4000, 500, 500};
  switch (task) {
    case TaskKind::binary_comp:
      s.size_min = 6;
      s.size_max = 10;
      s.bernoulli_p = 0.325;
      break;
    case TaskKind::ternary_comp:
      s.size_min = 5;
      s.size_max = 8;
      s.bernoulli_p = 0.264;
      break;
    case TaskKind::cpm3:
      s.size_min = 1;
      s.size_max = 8;
      s.G = 10;
      s.M = 3;
      s.vocab_max = static_cast<std::int64_t>(s.size_max);
      break;
  }
  return s;
}

inline void to_json(nlohmann::json& j, const DatasetSpec& s) {
  j = nlohmann::json{{"task", to_string(s.task)},
                     {"size_min", s.size_min},
                     {"size_max", s.size_max},
                     {"bernoulli_p", s.bernoulli_p},
                     {"counts", {{"train", s.counts.train}, {"val", s.counts.val}, {"test", s.counts.test}}},
                     {"seed", s.seed},
                     {"hops", s.hops()},
                     {"cpm3", {{"G", s.G}, {"M", s.M}, {"vocab_max", s.vocab_max}}}};
}

inline void from_json(const nlohmann::json& j, DatasetSpec& s) {
  s.task = task_from_string(j.at("task").get<std::string>());
  j.at("size_min").get_to(s.size_min);
  j.at("size_max").get_to(s.size_max);
  j.at("bernoulli_p").get_to(s.bernoulli_p);
  j.at("counts").at("train").get_to(s.counts.train);
  j.at("counts").at("val").get_to(s.counts.val);
  j.at("counts").at("test").get_to(s.counts.test);
  j.at("seed").get_to(s.seed);
  j.at("cpm3").at("G").get_to(s.G);
  j.at("cpm3").at("M").get_to(s.M);
  j.at("cpm3").at("vocab_max").get_to(s.vocab_max);
}

// Exhaustive boolean power: (R o R)_ij = OR_k R_ik & R_kj, and the 3-hop
// analogue over (k, l).
inline BoolMatrix bool_compose(const BoolMatrix& r, std::size_t hops) {
  if (r.rows() != r.cols()) throw dimension_error("bool_compose: relation must be square");
  if (hops != 2 && hops != 3) throw std::invalid_argument("bool_compose: hops must be 2 or 3");
  const std::size_t m = r.rows();
  BoolMatrix out(m, m);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      bool any = false;
      for (std::size_t k = 0; k < m && !any; ++k) {
        if (!r(i, k)) continue;
        if (hops == 2) {
          any = r(k, j);
        } else {
          for (std::size_t l = 0; l < m && !any; ++l) any = r(k, l) && r(l, j);
        }
      }
      out.set(i, j, any);
    }
  return out;
}

namespace detail {
inline CounterRng example_stream(const DatasetSpec& spec, Split split, std::uint64_t index) {
  return CounterRng(spec.seed).substream(to_string(spec.task)).substream(to_string(split)).substream(index);
}
}  // namespace detail

inline TaskExample gen_example(const DatasetSpec& spec, Split split, std::uint64_t index) {
  CounterRng rng = detail::example_stream(spec, split, index);
  const auto size = static_cast<std::size_t>(
      rng.uniform_int(static_cast<std::int64_t>(spec.size_min), static_cast<std::int64_t>(spec.size_max)));
  TaskExample ex;
  ex.meta = {spec.task, size, spec.seed, index};
  if (spec.task == TaskKind::cpm3) {
    for (std::size_t i = 0; i < size; ++i) ex.tokens.push_back(rng.uniform_int(0, spec.vocab_max - 1));
    ex.targets = cpm3_count_oracle(ex.tokens, spec.G, spec.M);
  } else {
    BoolMatrix r(size, size);
    for (std::size_t i = 0; i < size; ++i)
      for (std::size_t j = 0; j < size; ++j) r.set(i, j, rng.bernoulli(spec.bernoulli_p));
    const BoolMatrix c = bool_compose(r, spec.hops());
    for (std::size_t i = 0; i < size; ++i)
      for (std::size_t j = 0; j < size; ++j) {
        ex.tokens.push_back(r(i, j) ? 1 : 0);
        ex.targets.push_back(c(i, j) ? 1 : 0);
      }
  }
  ex.valid_mask.assign(ex.tokens.size(), true);
  return ex;
}

inline std::vector<TaskExample> gen_split(const DatasetSpec& spec, Split split) {
  spec.validate();
  std::vector<TaskExample> out;
  const std::size_t n = spec.counts.of(split);
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(gen_example(spec, split, i));
  return out;
}

struct Dataset {
  DatasetSpec spec;
  std::vector<TaskExample> train, val, test;

  std::vector<TaskExample>& of(Split s) { return s == Split::train ? train : s == Split::val ? val : test; }
  const std::vector<TaskExample>& of(Split s) const {
    return s == Split::train ? train : s == Split::val ? val : test;
  }
};

inline Dataset gen_dataset(const DatasetSpec& spec) {
  spec.validate();
  Dataset d;
  d.spec = spec;
  for (Split s : kSplits) d.of(s) = gen_split(spec, s);
  return d;
}

inline Dataset gen_composition(const DatasetSpec& spec) {
  if (spec.task == TaskKind::cpm3) throw std::invalid_argument("gen_composition: spec is a cpm3 task");
  return gen_dataset(spec);
}

inline Dataset gen_cpm3(const DatasetSpec& spec) {
  if (spec.task != TaskKind::cpm3) throw std::invalid_argument("gen_cpm3: spec is not a cpm3 task");
  return gen_dataset(spec);
}

// Fraction of positive targets over valid positions.
inline double positive_fraction(const std::vector<TaskExample>& xs) {
  std::size_t pos = 0, tot = 0;
  for (const auto& ex : xs)
    for (std::size_t i = 0; i < ex.length(); ++i)
      if (ex.valid_mask[i]) {
        ++tot;
        pos += ex.targets[i] != 0 ? 1 : 0;
      }
  return tot ? static_cast<double>(pos) / static_cast<double>(tot) : 0.0;
}

// ---------------------------------------------------------------------------
// Batching

struct Batch {
  std::size_t B = 0, L = 0;
  std::vector<std::int64_t> tokens;   // B*L, pad id 0
  std::vector<std::int64_t> targets;  // B*L, 0 on pads
  std::vector<bool> mask;             // B*L

  std::size_t valid_count() const { return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true)); }
};

inline std::size_t max_length(const std::vector<TaskExample>& xs) {
  std::size_t L = 0;
  for (const auto& ex : xs) L = std::max(L, ex.length());
  return L;
}

inline Batch pad_batch(const std::vector<TaskExample>& xs, std::size_t to_length) {
  if (to_length < max_length(xs)) throw std::invalid_argument("pad_batch: to_length below longest example");
  Batch b;
  b.B = xs.size();
  b.L = to_length;
  b.tokens.assign(b.B * b.L, 0);
  b.targets.assign(b.B * b.L, 0);
  b.mask.assign(b.B * b.L, false);
  for (std::size_t i = 0; i < xs.size(); ++i)
    for (std::size_t t = 0; t < xs[i].length(); ++t) {
      b.tokens[i * b.L + t] = xs[i].tokens[t];
      b.targets[i * b.L + t] = xs[i].targets[t];
      b.mask[i * b.L + t] = xs[i].valid_mask[t];
    }
  return b;
}

inline Batch pad_batch(const std::vector<TaskExample>& xs) { return pad_batch(xs, max_length(xs)); }

// ---------------------------------------------------------------------------
// JSON lines

inline nlohmann::json example_to_json(const TaskExample& ex) {
  return nlohmann::json{{"tokens", ex.tokens},
                        {"targets", ex.targets},
                        {"meta",
                         {{"task", to_string(ex.meta.task)},
                          {"size", ex.meta.size},
                          {"seed", ex.meta.seed},
                          {"index", ex.meta.index}}}};
}

inline TaskExample example_from_json(const nlohmann::json& j) {
  TaskExample ex;
  j.at("tokens").get_to(ex.tokens);
  j.at("targets").get_to(ex.targets);
  if (ex.tokens.size() != ex.targets.size()) throw std::runtime_error("example: tokens/targets length mismatch");
  if (j.contains("valid_mask")) {
    ex.valid_mask = j.at("valid_mask").get<std::vector<bool>>();
  } else {
    ex.valid_mask.assign(ex.tokens.size(), true);
  }
  const auto& m = j.at("meta");
  ex.meta.task = task_from_string(m.at("task").get<std::string>());
  m.at("size").get_to(ex.meta.size);
  m.at("seed").get_to(ex.meta.seed);
  m.at("index").get_to(ex.meta.index);
  return ex;
}

inline void write_jsonl(const std::filesystem::path& path, const std::vector<TaskExample>& xs) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  for (const auto& ex : xs) f << example_to_json(ex).dump() << '\n';
}

inline std::vector<TaskExample> read_jsonl(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::vector<TaskExample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(example_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

// train/val/test .jsonl plus manifest.json with the full spec.
inline void write_dataset(const std::filesystem::path& dir, const Dataset& d) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["spec"] = d.spec;
  for (Split s : kSplits) {
    const std::string file = to_string(s) + ".jsonl";
    write_jsonl(dir / file, d.of(s));
    manifest["files"][to_string(s)] = {{"path", file}, {"count", d.of(s).size()}};
  }
  std::ofstream f(dir / "manifest.json");
  if (!f) throw std::runtime_error("cannot write manifest in " + dir.string());
  f << manifest.dump(2) << '\n';
}

inline Dataset read_dataset(const std::filesystem::path& dir) {
  std::ifstream f(dir / "manifest.json");
  if (!f) throw std::runtime_error("no manifest.json in " + dir.string());
  const auto manifest = nlohmann::json::parse(f);
  Dataset d;
  d.spec = manifest.at("spec").get<DatasetSpec>();
  for (Split s : kSplits)
    d.of(s) = read_jsonl(dir / manifest.at("files").at(to_string(s)).at("path").get<std::string>());
  return d;
}

}  // namespace ihalab
