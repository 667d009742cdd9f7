#pragma once

// The toy single-layer model: token + 2-D position embeddings, one attention
// block (MHA or IHA) with a residual connection, then a two-layer ReLU MLP
// mapping each position to one output.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "autodiff.hpp"
#include "interleaved.hpp"
#include "rng.hpp"
#include "tasks.hpp"

namespace ihalab {

enum class AttentionKind { mha, iha };
enum class OutputHead { binary_logit, count };

inline std::string to_string(AttentionKind k) { return k == AttentionKind::mha ? "mha" : "iha"; }

inline AttentionKind attention_kind_from_string(const std::string& s) {
  if (s == "mha") return AttentionKind::mha;
  if (s == "iha") return AttentionKind::iha;
  throw std::invalid_argument("unknown attention kind '" + s + "' (mha|iha)");
}

struct ModelConfig {
  AttentionKind kind = AttentionKind::mha;
  std::size_t layers = 1;
  std::size_t H = 8, P = 1, D = 16, d = 2;
  std::size_t vocab = 2;
  std::size_t grid = 10;  // position table size (max rows, max cols)
  bool grid_positions = true;  // false: 1-D positions for cpm3
  OutputHead head = OutputHead::binary_logit;
  std::size_t mlp_hidden = 16;

  void validate() const {
    if (layers != 1) throw std::invalid_argument("model: only single-layer models are supported");
    if (H < 1 || d < 1 || D != H * d)
      throw std::invalid_argument("model: D (" + std::to_string(D) + ") must equal H*d (" + std::to_string(H * d) + ")");
    if (P < 1) throw std::invalid_argument("model: P must be >= 1");
    if (kind == AttentionKind::mha && P != 1) throw std::invalid_argument("model: MHA requires P = 1");
    if (vocab < 1 || grid < 1 || mlp_hidden < 1) throw std::invalid_argument("model: empty table");
  }

  std::size_t position_rows() const { return grid_positions ? grid : grid * grid; }
  std::size_t position_cols() const { return grid_positions ? grid : 1; }
};

// Matching config for a dataset: binary logits for composition, counts for cpm3.
inline ModelConfig model_for(const DatasetSpec& spec, AttentionKind kind, std::size_t H, std::size_t d,
                             std::size_t P) {
  ModelConfig c;
  c.kind = kind;
  c.H = H;
  c.d = d;
  c.D = H * d;
  c.P = kind == AttentionKind::iha ? P : 1;
  c.mlp_hidden = c.D;
  if (spec.task == TaskKind::cpm3) {
    c.vocab = static_cast<std::size_t>(spec.vocab_max);
    c.grid = spec.size_max;
    c.grid_positions = false;
    c.head = OutputHead::count;
  } else {
    c.vocab = 2;
    c.grid = spec.size_max;
    c.grid_positions = true;
    c.head = OutputHead::binary_logit;
  }
  return c;
}

struct Model {
  ModelConfig config;
  NamedParams params;

  std::size_t index_of(const std::string& name) const {
    for (std::size_t i = 0; i < params.size(); ++i)
      if (params[i].first == name) return i;
    throw std::out_of_range("model has no parameter '" + name + "'");
  }
  const Tensor& param(const std::string& name) const { return params[index_of(name)].second; }
  Tensor& param(const std::string& name) { return params[index_of(name)].second; }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : params) n += t.size();
    return n;
  }
};

inline Model init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  CounterRng rng = CounterRng(seed).substream("model-init");
  const double D = static_cast<double>(cfg.D), F = static_cast<double>(cfg.mlp_hidden);
  Model m;
  m.config = cfg;
  auto add = [&](const std::string& name, Tensor t) { m.params.emplace_back(name, std::move(t)); };
  add("tok_emb", random_normal({cfg.vocab, cfg.D}, rng, 1.0));
  add("row_emb", random_normal({cfg.position_rows(), cfg.D}, rng, 1.0));
  add("col_emb", random_normal({cfg.position_cols(), cfg.D}, rng, 1.0));
  const double sw = std::sqrt(1.0 / D);
  add("W_Q", random_normal({cfg.D, cfg.D}, rng, sw));
  add("W_K", random_normal({cfg.D, cfg.D}, rng, sw));
  add("W_V", random_normal({cfg.D, cfg.D}, rng, sw));
  add("W_O", random_normal({cfg.D, cfg.D}, rng, sw));
  if (cfg.kind == AttentionKind::iha) {
    const std::size_t H = cfg.H, P = cfg.P;
    for (const char* name : {"alpha_q", "alpha_k", "alpha_v"}) {
      Tensor a = identity_router(H, P) + random_normal({H, H, P}, rng, 0.1);
      add(name, std::move(a));
    }
    Tensor r = random_normal({H, H * P}, rng, 0.1);
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t p = 0; p < P; ++p) r(h, h * P + p) += 1.0 / static_cast<double>(P);
    add("collapse", std::move(r));
  }
  add("W_1", random_normal({cfg.D, cfg.mlp_hidden}, rng, std::sqrt(2.0 / (D + F))));
  add("b_1", Tensor({cfg.mlp_hidden}));
  add("W_2", random_normal({cfg.mlp_hidden, 1}, rng, std::sqrt(2.0 / (F + 1.0))));
  add("b_2", Tensor({1}));
  return m;
}

// Per-head projection matrices W[:, m*d:(m+1)*d] of a combined D x D map.
inline std::vector<Tensor> split_heads(const Tensor& w, std::size_t H) {
  const std::size_t d = w.dim(1) / H;
  std::vector<Tensor> out;
  for (std::size_t m = 0; m < H; ++m) out.push_back(slice_cols(w, m * d, (m + 1) * d));
  return out;
}

// The attention block of a model as standalone IHA parameters (MHA models
// use the identity embedding with P = 1).
inline IhaParams attention_params(const Model& m) {
  MhaParams base;
  base.wq = split_heads(m.param("W_Q"), m.config.H);
  base.wk = split_heads(m.param("W_K"), m.config.H);
  base.wv = split_heads(m.param("W_V"), m.config.H);
  base.wo = m.param("W_O");
  if (m.config.kind == AttentionKind::mha) return embed_mha_as_iha(base, 1);
  IhaParams p;
  p.base = std::move(base);
  p.alpha_q = m.param("alpha_q");
  p.alpha_k = m.param("alpha_k");
  p.alpha_v = m.param("alpha_v");
  p.collapse = m.param("collapse");
  return p;
}

// Valid positions of an example, with their row / column table indices.
struct ExampleView {
  std::vector<std::size_t> positions;
  std::vector<std::size_t> tokens, rows, cols;
  std::vector<double> targets;
};

inline ExampleView view_of(const ModelConfig& cfg, const TaskExample& ex) {
  ExampleView v;
  const std::size_t m = ex.meta.size ? ex.meta.size : 1;
  for (std::size_t i = 0; i < ex.length(); ++i) {
    if (!ex.valid_mask[i]) continue;
    if (ex.tokens[i] < 0 || static_cast<std::size_t>(ex.tokens[i]) >= cfg.vocab)
      throw std::out_of_range("token " + std::to_string(ex.tokens[i]) + " outside vocabulary");
    v.positions.push_back(i);
    v.tokens.push_back(static_cast<std::size_t>(ex.tokens[i]));
    if (cfg.grid_positions) {
      v.rows.push_back(i / m);
      v.cols.push_back(i % m);
    } else {
      v.rows.push_back(i);
      v.cols.push_back(0);
    }
    v.targets.push_back(static_cast<double>(ex.targets[i]));
  }
  return v;
}

// Outputs [L, 1] over the valid positions of `v`. `leaves` follow the
// model's parameter order.
inline Var model_forward(const Model& m, const std::vector<Var>& leaves, const ExampleView& v) {
  const ModelConfig& c = m.config;
  auto p = [&](const char* name) { return leaves.at(m.index_of(name)); };
  Var x = ad::add(ad::add(ad::gather_rows(p("tok_emb"), v.tokens), ad::gather_rows(p("row_emb"), v.rows)),
                  ad::gather_rows(p("col_emb"), v.cols));
  Var q = ad::matmul(x, p("W_Q"));
  Var k = ad::matmul(x, p("W_K"));
  Var val = ad::matmul(x, p("W_V"));
  const double sc = 1.0 / std::sqrt(static_cast<double>(c.d));
  Var o;
  if (c.kind == AttentionKind::mha) {
    o = ad::grouped_attention(q, k, val, c.H, 1, sc);
  } else {
    Var qm = ad::mix_heads(q, p("alpha_q"));
    Var km = ad::mix_heads(k, p("alpha_k"));
    Var vm = ad::mix_heads(val, p("alpha_v"));
    o = ad::collapse(ad::grouped_attention(qm, km, vm, c.H, c.P, sc), p("collapse"));
  }
  Var h = ad::add(x, ad::matmul(o, p("W_O")));
  Var z = ad::relu(ad::add_row_bias(ad::matmul(h, p("W_1")), p("b_1")));
  return ad::add_row_bias(ad::matmul(z, p("W_2")), p("b_2"));
}

inline Var example_loss_sum(const Model& m, const std::vector<Var>& leaves, const ExampleView& v) {
  Var out = model_forward(m, leaves, v);
  const std::vector<bool> mask(v.targets.size(), true);
  return m.config.head == OutputHead::binary_logit ? ad::bce_with_logits_sum(out, v.targets, mask)
                                                   : ad::mse_sum(out, v.targets, mask);
}

// Mean loss over the valid positions of `batch`, as a gradcheck-ready closure.
inline LossBuilder batch_loss_builder(const Model& m, const std::vector<TaskExample>& batch) {
  std::vector<ExampleView> views;
  std::size_t count = 0;
  for (const auto& ex : batch) {
    views.push_back(view_of(m.config, ex));
    count += views.back().positions.size();
  }
  return [&m, views, count](Tape& t, const std::vector<Var>& leaves) {
    Var total = t.constant(Tensor::scalar(0.0));
    for (const auto& v : views)
      if (!v.positions.empty()) total = ad::add(total, example_loss_sum(m, leaves, v));
    return ad::scale(total, count ? 1.0 / static_cast<double>(count) : 0.0);
  };
}

inline std::vector<Var> param_leaves(Tape& t, const Model& m) {
  std::vector<Var> leaves;
  for (std::size_t i = 0; i < m.params.size(); ++i) leaves.push_back(t.param(m.params[i].second, i));
  return leaves;
}

// Per-position outputs over valid positions; constants only, so no backward state is kept.
inline std::vector<double> model_outputs(const Model& m, const ExampleView& v) {
  Tape t;
  std::vector<Var> leaves;
  for (const auto& [name, w] : m.params) leaves.push_back(t.constant(w));
  const Var out = model_forward(m, leaves, v);
  return out.value().vec();
}

// Finite-difference checks of the full model loss on small random instances
// (H=2, d=2, 3x3 or 4x4 relations, two examples per batch).
inline std::vector<GradcheckReport> model_gradcheck(AttentionKind kind, std::size_t P, std::size_t instances,
                                                    std::uint64_t seed, double eps = 1e-5, double tol = 1e-4) {
  ModelConfig c;
  c.kind = kind;
  c.H = 2;
  c.d = 2;
  c.D = 4;
  c.P = kind == AttentionKind::iha ? P : 1;
  c.vocab = 2;
  c.grid = 4;
  c.mlp_hidden = 4;
  DatasetSpec s;
  s.size_min = 3;
  s.size_max = 4;
  s.bernoulli_p = 0.4;
  std::vector<GradcheckReport> out;
  for (std::size_t i = 0; i < instances; ++i) {
    s.seed = seed * 1000003 + i;
    const Model m = init_model(c, s.seed);
    const std::vector<TaskExample> batch{gen_example(s, Split::train, 0), gen_example(s, Split::train, 1)};
    out.push_back(gradcheck(batch_loss_builder(m, batch), m.params, eps, tol));
  }
  return out;
}

}  // namespace ihalab
