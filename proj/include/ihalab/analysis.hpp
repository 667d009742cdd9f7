#pragma once

// Closed-form parameter tallies and attention FLOP accounting.

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "constructions.hpp"

namespace ihalab {

// alpha^Q, alpha^K, alpha^V (3 H^2 P) plus the collapse map (H^2 P).
inline std::int64_t iha_extra_params(std::int64_t H, std::int64_t P) {
  if (H < 1 || P < 1) throw std::invalid_argument("iha_extra_params: H and P must be >= 1");
  return 4 * H * H * P;
}

struct PolyfilterCounts {
  std::int64_t mha = 0;
  std::int64_t iha = 0;
  std::int64_t crossover_k = 0;  // smallest k with iha < mha; 0 if none up to the scan limit
};

inline std::int64_t polyfilter_crossover(std::int64_t N, std::int64_t d, std::int64_t limit = 100000) {
  for (std::int64_t k = 1; k <= limit; ++k)
    if (iha_polyfilter_formula(N, d, k) < mha_polyfilter_formula(N, d, k)) return k;
  return 0;
}

inline PolyfilterCounts polyfilter_param_counts(std::int64_t N, std::int64_t d, std::int64_t k) {
  if (k < 1 || N < 1 || d < 1) throw std::invalid_argument("polyfilter_param_counts: N, d, k must be >= 1");
  return {mha_polyfilter_formula(N, d, k), iha_polyfilter_formula(N, d, k), polyfilter_crossover(N, d)};
}

struct Cpm3Bounds {
  std::int64_t iha_upper = 0;
  std::int64_t mha_lower = 0;
};

inline Cpm3Bounds cpm3_param_bounds(std::int64_t n_max) {
  if (n_max < 1) throw std::invalid_argument("cpm3_param_bounds: n_max must be >= 1");
  return {cpm3_iha_upper_bound(n_max), cpm3_mha_lower_bound(n_max)};
}

// Smallest n from which iha_upper < mha_lower holds for every n up to `limit`.
inline std::int64_t cpm3_bound_threshold(std::int64_t limit = 5000) {
  std::int64_t threshold = 0;
  for (std::int64_t n = 1; n <= limit; ++n) {
    const auto b = cpm3_param_bounds(n);
    if (b.iha_upper < b.mha_lower) {
      if (threshold == 0) threshold = n;
    } else {
      threshold = 0;
    }
  }
  return threshold;
}

enum class Schedule { global, hybrid_4to1 };
enum class GlobalLayer { mha, iha };

inline Schedule schedule_from_string(const std::string& s) {
  if (s == "global") return Schedule::global;
  if (s == "hybrid_4to1" || s == "hybrid") return Schedule::hybrid_4to1;
  throw std::invalid_argument("unknown schedule '" + s + "' (global|hybrid_4to1)");
}

inline std::string to_string(Schedule s) { return s == Schedule::global ? "global" : "hybrid_4to1"; }

inline GlobalLayer global_layer_from_string(const std::string& s) {
  if (s == "mha") return GlobalLayer::mha;
  if (s == "iha") return GlobalLayer::iha;
  throw std::invalid_argument("unknown global layer '" + s + "' (mha|iha)");
}

inline std::string to_string(GlobalLayer g) { return g == GlobalLayer::mha ? "mha" : "iha"; }

struct FlopReport {
  std::int64_t N = 0, d = 0, H = 0, P = 0;
  Schedule schedule = Schedule::global;
  GlobalLayer global_layer = GlobalLayer::mha;
  std::optional<std::int64_t> window;  // W = floor(N / (2 P^2)), hybrid only
  double local_layer_flops = 0.0;      // hybrid only
  double global_layer_flops = 0.0;
  double average_flops = 0.0;
  double baseline_flops = 0.0;  // global MHA, 2 H N^2 d
  double ratio = 0.0;
};

// Score and weighted-sum multiply-adds, 2 H Lq Lk d, with Lq = N P.
inline double attention_flops(std::int64_t H, std::int64_t Lq, std::int64_t Lk, std::int64_t d) {
  return 2.0 * static_cast<double>(H) * static_cast<double>(Lq) * static_cast<double>(Lk) * static_cast<double>(d);
}

inline FlopReport flop_report(std::int64_t N, std::int64_t d, std::int64_t H, std::int64_t P, Schedule schedule,
                              GlobalLayer global_layer = GlobalLayer::mha) {
  if (N < 1 || d < 1 || H < 1 || P < 1) throw std::invalid_argument("flop_report: N, d, H, P must be >= 1");
  FlopReport r;
  r.N = N;
  r.d = d;
  r.H = H;
  r.P = P;
  r.schedule = schedule;
  r.global_layer = global_layer;
  r.baseline_flops = attention_flops(H, N, N, d);
  const double iha_global = attention_flops(H, N * P, N * P, d);
  if (schedule == Schedule::global) {
    r.global_layer_flops = iha_global;
    r.average_flops = iha_global;
  } else {
    const std::int64_t W = N / (2 * P * P);
    if (W < 1)
      throw std::invalid_argument("flop_report: window N/(2P^2) = " + std::to_string(W) + " < 1 for N=" +
                                  std::to_string(N) + ", P=" + std::to_string(P));
    r.window = W;
    r.local_layer_flops = attention_flops(H, N * P, W * P, d);
    r.global_layer_flops = global_layer == GlobalLayer::mha ? r.baseline_flops : iha_global;
    r.average_flops = (4.0 * r.local_layer_flops + r.global_layer_flops) / 5.0;
  }
  r.ratio = r.average_flops / r.baseline_flops;
  return r;
}

inline void to_json(nlohmann::json& j, const FlopReport& r) {
  j = nlohmann::json{{"N", r.N},
                     {"d", r.d},
                     {"H", r.H},
                     {"P", r.P},
                     {"schedule", to_string(r.schedule)},
                     {"global_layer", to_string(r.global_layer)},
                     {"window", r.window ? nlohmann::json(*r.window) : nlohmann::json(nullptr)},
                     {"local_layer_flops", r.local_layer_flops},
                     {"global_layer_flops", r.global_layer_flops},
                     {"average_flops", r.average_flops},
                     {"baseline_flops", r.baseline_flops},
                     {"ratio", r.ratio}};
}

}  // namespace ihalab
