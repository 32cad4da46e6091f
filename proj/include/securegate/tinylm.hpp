#pragma once

// A small frozen decoder-only language model: 2-layer single-head causal
// transformer with sinusoidal positions, GELU FFN, pre-layer-norm blocks and
// an untied output head. Adapters attach to the attention q and v
// projections. There are two execution paths over the same kernels: a tape
// for training and a tape-free forward for scoring and sampling; with no
// adapter attached their outputs are bit-identical.

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "securegate/autodiff.hpp"
#include "securegate/optim.hpp"
#include "securegate/serialize.hpp"
#include "securegate/tensor.hpp"
#include "securegate/tokenizer.hpp"

namespace securegate {

struct ModelConfig {
  std::size_t vocab_size = 160;
  std::size_t embed_dim = 64;
  std::size_t n_layers = 2;
  std::size_t context_len = 128;
  std::size_t n_heads = 1;

  void validate() const {
    if (vocab_size == 0 || embed_dim == 0 || n_layers == 0 || context_len == 0)
      throw std::invalid_argument("ModelConfig: dimensions must be positive");
    if (n_heads != 1)
      throw std::invalid_argument("ModelConfig: only single-head attention is supported");
    if (embed_dim % n_heads != 0)
      throw std::invalid_argument("ModelConfig: embed_dim must divide by n_heads");
    if (vocab_size <= static_cast<std::size_t>(tok::kNumReserved))
      throw std::invalid_argument("ModelConfig: vocab_size must exceed the " +
                                  std::to_string(tok::kNumReserved) +
                                  " reserved token ids");
  }
};

struct AttachPoint {
  std::string name;  // weight key, e.g. "layers.0.attn.wq"
  std::size_t d, k;  // delta shape (d x k)
};

struct TinyLM {
  ModelConfig config;
  std::map<std::string, Tensor> weights;

  std::vector<AttachPoint> attachment_points() const {
    std::vector<AttachPoint> pts;
    for (std::size_t l = 0; l < config.n_layers; ++l) {
      const std::string base = "layers." + std::to_string(l) + ".attn.";
      pts.push_back({base + "wq", config.embed_dim, config.embed_dim});
      pts.push_back({base + "wv", config.embed_dim, config.embed_dim});
    }
    return pts;
  }
};

// Scaled to the token-embedding magnitude; a unit-scale code would dominate
// the residual stream at this width and wash token identity out of the
// layer-normalized hidden states.
inline Tensor sinusoidal_positions(std::size_t context_len, std::size_t d,
                                   double scale = 0.05) {
  Tensor pe = Tensor::zeros({context_len, d});
  for (std::size_t p = 0; p < context_len; ++p)
    for (std::size_t i = 0; i < d; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
      pe.at(p, i) = scale * std::sin(static_cast<double>(p) * freq);
      if (i + 1 < d) pe.at(p, i + 1) = scale * std::cos(static_cast<double>(p) * freq);
    }
  return pe;
}

inline TinyLM init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  TinyLM m;
  m.config = cfg;
  Rng rng(derive_seed(seed, "model_init"));
  const std::size_t d = cfg.embed_dim;
  auto randn = [&](std::vector<std::size_t> shape) {
    return Tensor::randn(std::move(shape), rng, 0.02);
  };
  m.weights["tok_emb"] = randn({cfg.vocab_size, d});
  m.weights["pos_emb"] = sinusoidal_positions(cfg.context_len, d);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    m.weights[p + "ln1.gamma"] = Tensor::full({d}, 1.0);
    m.weights[p + "ln1.beta"] = Tensor::zeros({d});
    m.weights[p + "attn.wq"] = randn({d, d});
    m.weights[p + "attn.wk"] = randn({d, d});
    m.weights[p + "attn.wv"] = randn({d, d});
    m.weights[p + "attn.wo"] = randn({d, d});
    m.weights[p + "ln2.gamma"] = Tensor::full({d}, 1.0);
    m.weights[p + "ln2.beta"] = Tensor::zeros({d});
    m.weights[p + "ffn.w1"] = randn({4 * d, d});
    m.weights[p + "ffn.w2"] = randn({d, 4 * d});
  }
  m.weights["ln_f.gamma"] = Tensor::full({d}, 1.0);
  m.weights["ln_f.beta"] = Tensor::zeros({d});
  m.weights["head"] = randn({cfg.vocab_size, d});
  return m;
}

// ---------------------------------------------------------------------------
// fast path

// Weight view with optional dense adapter deltas folded in. Folding once and
// reusing keeps candidate scoring at frozen-base cost.
struct FoldedModel {
  ModelConfig config;
  std::map<std::string, Tensor> weights;
};

using EmbedOverrides = std::map<int, Tensor>;  // token id -> replacement row

inline FoldedModel fold_model(const TinyLM& m,
                              const std::map<std::string, Tensor>* deltas = nullptr) {
  FoldedModel f;
  f.config = m.config;
  f.weights = m.weights;
  if (deltas) {
    for (const auto& [name, delta] : *deltas) {
      auto it = f.weights.find(name);
      if (it == f.weights.end())
        throw std::invalid_argument("fold_model: no attachment point named '" + name + "'");
      if (!it->second.same_shape(delta))
        throw std::invalid_argument("fold_model: delta shape " + delta.shape_str() +
                                    " does not match " + name + " " +
                                    it->second.shape_str());
      for (std::size_t i = 0; i < delta.numel(); ++i)
        it->second.data[i] += delta.data[i];
    }
  }
  return f;
}

inline void check_token_ids(const std::vector<int>& tokens, std::size_t vocab) {
  for (int t : tokens)
    if (t < 0 || static_cast<std::size_t>(t) >= vocab)
      throw std::out_of_range("token id " + std::to_string(t) +
                              " outside vocabulary of " + std::to_string(vocab));
}

// Hidden states after the final layer norm, before the head: [n, d].
inline Tensor forward_hidden(const FoldedModel& f, const std::vector<int>& tokens,
                             const EmbedOverrides* overrides = nullptr,
                             std::uint64_t* flops = nullptr) {
  const ModelConfig& cfg = f.config;
  check_token_ids(tokens, cfg.vocab_size);
  if (tokens.size() > cfg.context_len)
    throw std::invalid_argument("sequence of " + std::to_string(tokens.size()) +
                                " tokens exceeds context of " +
                                std::to_string(cfg.context_len));
  const std::size_t n = tokens.size(), d = cfg.embed_dim;
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(d));

  Tensor x = embedding_gather(f.weights.at("tok_emb"), tokens);
  if (overrides)
    for (std::size_t i = 0; i < n; ++i) {
      auto it = overrides->find(tokens[i]);
      if (it == overrides->end()) continue;
      if (it->second.numel() != d)
        throw std::invalid_argument("embedding override must have length d");
      std::copy(it->second.data.begin(), it->second.data.end(),
                x.data.begin() + i * d);
    }
  const Tensor& pos = f.weights.at("pos_emb");
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) x.data[i * d + j] += pos.data[i * d + j];

  Tensor q, k, v, scores, att, proj, f1, f2;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    Tensor a = layer_norm_forward(x, f.weights.at(p + "ln1.gamma"),
                                  f.weights.at(p + "ln1.beta"), 1e-5);
    matmul_into(q, a, f.weights.at(p + "attn.wq"), false, true, flops);
    matmul_into(k, a, f.weights.at(p + "attn.wk"), false, true, flops);
    matmul_into(v, a, f.weights.at(p + "attn.wv"), false, true, flops);
    matmul_into(scores, q, k, false, true, flops);
    softmax_inplace(scores, true, att_scale);
    matmul_into(att, scores, v, false, false, flops);
    matmul_into(proj, att, f.weights.at(p + "attn.wo"), false, true, flops);
    for (std::size_t i = 0; i < x.numel(); ++i) x.data[i] += proj.data[i];

    Tensor b = layer_norm_forward(x, f.weights.at(p + "ln2.gamma"),
                                  f.weights.at(p + "ln2.beta"), 1e-5);
    matmul_into(f1, b, f.weights.at(p + "ffn.w1"), false, true, flops);
    gelu_inplace(f1);
    matmul_into(f2, f1, f.weights.at(p + "ffn.w2"), false, true, flops);
    for (std::size_t i = 0; i < x.numel(); ++i) x.data[i] += f2.data[i];
  }
  return layer_norm_forward(x, f.weights.at("ln_f.gamma"), f.weights.at("ln_f.beta"),
                            1e-5);
}

// Logits per position, [n, vocab]. Empty input yields an empty tensor.
inline Tensor forward_logits(const FoldedModel& f, const std::vector<int>& tokens,
                             const EmbedOverrides* overrides = nullptr,
                             std::uint64_t* flops = nullptr) {
  if (tokens.empty()) return Tensor();
  Tensor h = forward_hidden(f, tokens, overrides, flops);
  Tensor logits;
  matmul_into(logits, h, f.weights.at("head"), false, true, flops);
  return logits;
}

// Post-final-block, pre-head hidden vector at one position, computed on the
// frozen base (adapters are never consulted on this path).
inline Tensor hidden_state_at(const TinyLM& m, const std::vector<int>& tokens,
                              std::size_t position,
                              const EmbedOverrides* overrides = nullptr) {
  if (position >= tokens.size())
    throw std::out_of_range("hidden_state_at: position " + std::to_string(position) +
                            " outside sequence of " + std::to_string(tokens.size()));
  FoldedModel f = fold_model(m);
  Tensor h = forward_hidden(f, tokens, overrides);
  const std::size_t d = m.config.embed_dim;
  Tensor row = Tensor::zeros({d});
  std::copy(h.data.begin() + position * d, h.data.begin() + (position + 1) * d,
            row.data.begin());
  return row;
}

// ---------------------------------------------------------------------------
// scoring

// Per-token negative log-likelihoods of `doc` scored from an end-of-text
// context start, so every token contributes one position.
inline std::vector<double> sequence_nll(const FoldedModel& f,
                                        const std::vector<int>& doc,
                                        const EmbedOverrides* overrides = nullptr,
                                        std::uint64_t* flops = nullptr) {
  if (doc.empty())
    throw std::invalid_argument("sequence_nll: no scored positions");
  std::vector<int> input(doc.size());
  input[0] = tok::kEot;
  std::copy(doc.begin(), doc.end() - 1, input.begin() + 1);
  Tensor logits = forward_logits(f, input, overrides, flops);
  const std::size_t v = f.config.vocab_size;
  std::vector<double> nll(doc.size());
  for (std::size_t i = 0; i < doc.size(); ++i) {
    const double* row = logits.data.data() + i * v;
    double mx = row[0];
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double lse = 0.0;
    for (std::size_t j = 0; j < v; ++j) lse += std::exp(row[j] - mx);
    nll[i] = mx + std::log(lse) - row[static_cast<std::size_t>(doc[i])];
  }
  return nll;
}

inline double perplexity_from_logprobs(const std::vector<double>& logprobs) {
  if (logprobs.empty())
    throw std::invalid_argument("perplexity: zero scored positions");
  double sum = 0.0;
  for (double lp : logprobs) sum += lp;
  return std::exp(-sum / static_cast<double>(logprobs.size()));
}

// Documents are scored independently of each other, so duplicating a document
// in the list leaves the result unchanged.
inline double perplexity(const FoldedModel& f,
                         const std::vector<std::vector<int>>& docs,
                         std::uint64_t* flops = nullptr) {
  std::vector<double> logprobs;
  for (const auto& doc : docs) {
    if (doc.empty()) continue;
    for (double nll : sequence_nll(f, doc, nullptr, flops)) logprobs.push_back(-nll);
  }
  return perplexity_from_logprobs(logprobs);
}

inline double perplexity(const FoldedModel& f, const std::vector<int>& doc,
                         std::uint64_t* flops = nullptr) {
  return perplexity(f, std::vector<std::vector<int>>{doc}, flops);
}

// ---------------------------------------------------------------------------
// sampling

struct SampleParams {
  double temperature = 1.0;
  std::size_t max_new = 64;
  std::uint64_t seed = 0;
};

// Deterministic given the seed. Temperatures below 1e-9 select the argmax.
inline std::vector<int> sample(const FoldedModel& f, const std::vector<int>& prompt,
                               const SampleParams& sp,
                               std::uint64_t* flops = nullptr) {
  if (sp.temperature <= 0.0)
    throw std::invalid_argument("sample: temperature must be positive");
  check_token_ids(prompt, f.config.vocab_size);
  Rng rng(derive_seed(sp.seed, "sample"));
  std::vector<int> ctx;
  ctx.reserve(prompt.size() + sp.max_new + 1);
  ctx.push_back(tok::kEot);
  ctx.insert(ctx.end(), prompt.begin(), prompt.end());
  std::vector<int> out;
  const std::size_t v = f.config.vocab_size;
  for (std::size_t step = 0; step < sp.max_new; ++step) {
    if (ctx.size() > f.config.context_len)
      ctx.erase(ctx.begin(), ctx.end() - static_cast<long>(f.config.context_len));
    Tensor logits = forward_logits(f, ctx, nullptr, flops);
    const double* row = logits.data.data() + (ctx.size() - 1) * v;
    int next;
    if (sp.temperature < 1e-9) {
      next = 0;
      for (std::size_t j = 1; j < v; ++j)
        if (row[j] > row[next]) next = static_cast<int>(j);
    } else {
      double mx = row[0];
      for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
      std::vector<double> p(v);
      double sum = 0.0;
      for (std::size_t j = 0; j < v; ++j) {
        p[j] = std::exp((row[j] - mx) / sp.temperature);
        sum += p[j];
      }
      const double u = rng.uniform() * sum;
      double acc = 0.0;
      next = static_cast<int>(v) - 1;
      for (std::size_t j = 0; j < v; ++j) {
        acc += p[j];
        if (u < acc) {
          next = static_cast<int>(j);
          break;
        }
      }
    }
    if (next == tok::kEot) break;
    out.push_back(next);
    ctx.push_back(next);
  }
  return out;
}

// ---------------------------------------------------------------------------
// tape path

struct AdapterGraphSpec {
  std::size_t rank = 0;
  double scale = 1.0;      // lora_alpha / r
  double dropout_p = 0.0;  // applied to the A*x activation when training
};

struct LmGraphConfig {
  bool train_base = false;  // base weights become trainable inputs
  std::map<std::string, AdapterGraphSpec> adapters;  // keyed by attachment point
  bool training = false;    // enables dropout nodes
};

struct LmGraph {
  Tape tape;
  NodeId logits = -1;
  NodeId loss = -1;

  LmGraph(std::uint64_t seed) : tape(seed) {}
};

// Builds the exact computation of forward_logits on a tape, optionally with
// low-rank adapter terms at the attachment points and a cross-entropy loss.
// Trainable inputs: base weights when cfg.train_base, and
// "adapter.<point>.A" / "adapter.<point>.B" per configured adapter.
inline LmGraph build_lm_graph(const TinyLM& m, const std::vector<int>& tokens,
                              const std::vector<int>& targets,
                              const LmGraphConfig& cfg, std::uint64_t tape_seed) {
  m.config.validate();
  check_token_ids(tokens, m.config.vocab_size);
  if (tokens.empty())
    throw std::invalid_argument("build_lm_graph: empty token sequence");
  if (tokens.size() > m.config.context_len)
    throw std::invalid_argument("build_lm_graph: sequence exceeds context length");
  const std::size_t n = tokens.size(), d = m.config.embed_dim;
  LmGraph g(tape_seed);
  Tape& t = g.tape;

  auto weight = [&](const std::string& name) -> NodeId {
    if (cfg.train_base && name != "pos_emb")
      return t.input(name, m.weights.at(name).shape, true);
    return t.constant(m.weights.at(name), name);
  };

  // x = tok_emb[ids] + pos[0..n)
  NodeId emb = t.embed(weight("tok_emb"), tokens);
  const Tensor& pe = m.weights.at("pos_emb");
  Tensor pos_slice({n, d}, std::vector<double>(pe.data.begin(),
                                               pe.data.begin() + n * d));
  NodeId x = t.add(emb, t.constant(std::move(pos_slice), "pos_slice"));

  const double att_scale = 1.0 / std::sqrt(static_cast<double>(d));

  auto project = [&](NodeId act, const std::string& point) -> NodeId {
    NodeId base = t.matmul(act, weight(point), false, true);
    auto it = cfg.adapters.find(point);
    if (it == cfg.adapters.end()) return base;
    const AdapterGraphSpec& sp = it->second;
    NodeId a = t.input("adapter." + point + ".A", {sp.rank, d}, true);
    NodeId b = t.input("adapter." + point + ".B", {d, sp.rank}, true);
    NodeId ax = t.matmul(act, a, false, true);  // [n, r]
    if (cfg.training && sp.dropout_p > 0.0) ax = t.dropout(ax, sp.dropout_p);
    NodeId bax = t.matmul(ax, b, false, true);  // [n, d]
    NodeId scaled = t.mul(bax, t.constant(Tensor::full({n, d}, sp.scale)));
    return t.add(base, scaled);
  };

  for (std::size_t l = 0; l < m.config.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    NodeId a = t.layer_norm(x, weight(p + "ln1.gamma"), weight(p + "ln1.beta"));
    NodeId q = project(a, p + "attn.wq");
    NodeId k = t.matmul(a, weight(p + "attn.wk"), false, true);
    NodeId v = project(a, p + "attn.wv");
    NodeId scores = t.softmax(t.matmul(q, k, false, true), true, att_scale);
    NodeId att = t.matmul(scores, v, false, false);
    NodeId proj = t.matmul(att, weight(p + "attn.wo"), false, true);
    x = t.add(x, proj);
    NodeId b = t.layer_norm(x, weight(p + "ln2.gamma"), weight(p + "ln2.beta"));
    NodeId f1 = t.gelu(t.matmul(b, weight(p + "ffn.w1"), false, true));
    NodeId f2 = t.matmul(f1, weight(p + "ffn.w2"), false, true);
    x = t.add(x, f2);
  }
  NodeId h = t.layer_norm(x, weight("ln_f.gamma"), weight("ln_f.beta"));
  g.logits = t.matmul(h, weight("head"), false, true);
  t.mark_output("logits", g.logits);
  if (!targets.empty()) {
    g.loss = t.cross_entropy(g.logits, targets);
    t.mark_output("loss", g.loss);
  }
  return g;
}

// ---------------------------------------------------------------------------
// pretraining

struct PretrainOptions {
  std::size_t batch_size = 8;
  double lr = 1e-3;
  double holdout_fraction = 0.1;
};

struct PretrainReport {
  double initial_holdout_nll = 0.0;
  double final_holdout_nll = 0.0;
  std::size_t steps = 0;
};

namespace detail {

inline double mean_nll(const TinyLM& m, const std::vector<std::vector<int>>& docs) {
  FoldedModel f = fold_model(m);
  double total = 0.0;
  std::size_t count = 0;
  for (auto doc : docs) {
    if (doc.size() > m.config.context_len) doc.resize(m.config.context_len);
    for (double v : sequence_nll(f, doc)) total += v;
    count += doc.size();
  }
  return total / static_cast<double>(count);
}

// Input/target pair for next-token training: predict doc[i] from the
// end-of-text start plus the preceding tokens.
inline void shifted_pair(const std::vector<int>& doc, std::size_t context_len,
                         std::vector<int>& input, std::vector<int>& target) {
  std::size_t len = std::min(doc.size(), context_len);
  input.assign(doc.begin(), doc.begin() + len);
  target = input;
  input.pop_back();
  input.insert(input.begin(), tok::kEot);
}

}  // namespace detail

// Trains a randomly initialized model on the corpus and returns it; callers
// treat the result as frozen. The held-out slice must improve over the random
// initialization or the run is rejected.
inline TinyLM pretrain_base(const ModelConfig& cfg,
                            const std::vector<std::vector<int>>& corpus,
                            std::size_t steps, std::uint64_t seed,
                            const PretrainOptions& opt = {},
                            PretrainReport* report = nullptr) {
  if (corpus.empty()) throw std::invalid_argument("pretrain_base: empty corpus");
  if (steps < 1) throw std::invalid_argument("pretrain_base: steps must be >= 1");
  for (const auto& doc : corpus) {
    if (doc.empty()) throw std::invalid_argument("pretrain_base: empty document");
    check_token_ids(doc, cfg.vocab_size);
  }
  TinyLM m = init_model(cfg, seed);

  const std::size_t n_holdout =
      std::max<std::size_t>(1, static_cast<std::size_t>(
                                   static_cast<double>(corpus.size()) *
                                   opt.holdout_fraction));
  const std::size_t n_train = corpus.size() > n_holdout
                                  ? corpus.size() - n_holdout
                                  : corpus.size();
  std::vector<std::vector<int>> train(corpus.begin(), corpus.begin() + n_train);
  std::vector<std::vector<int>> holdout(corpus.begin() + n_train, corpus.end());
  if (holdout.empty()) holdout = train;

  const double initial = detail::mean_nll(m, holdout);

  AdamW opt_state(AdamWParams{.lr = opt.lr, .weight_decay = 0.0});
  Rng rng(derive_seed(seed, "pretrain_order"));
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);
  std::size_t cursor = 0;

  std::map<std::string, Tensor> params;
  for (const auto& [name, w] : m.weights)
    if (name != "pos_emb") params[name] = w;

  LmGraphConfig gcfg;
  gcfg.train_base = true;
  for (std::size_t step = 0; step < steps; ++step) {
    std::map<std::string, Tensor> grad_sum;
    std::size_t batch = std::min(opt.batch_size, train.size());
    for (std::size_t bi = 0; bi < batch; ++bi) {
      if (cursor == order.size()) {
        rng.shuffle(order);
        cursor = 0;
      }
      const auto& doc = train[order[cursor++]];
      std::vector<int> input, target;
      detail::shifted_pair(doc, cfg.context_len, input, target);
      LmGraph g = build_lm_graph(m, input, target, gcfg,
                                 derive_seed(seed, "pretrain_tape", step, bi));
      g.tape.forward(params);
      auto grads = g.tape.backward(g.loss);
      for (auto& [name, gt] : grads) {
        auto it = grad_sum.find(name);
        if (it == grad_sum.end())
          grad_sum[name] = gt;
        else
          for (std::size_t i = 0; i < gt.numel(); ++i) it->second.data[i] += gt.data[i];
      }
    }
    for (auto& [name, gt] : grad_sum)
      for (double& v : gt.data) v /= static_cast<double>(batch);
    opt_state.step(params, grad_sum);
  }
  for (auto& [name, w] : params) m.weights[name] = w;

  const double final_nll = detail::mean_nll(m, holdout);
  if (report) *report = {initial, final_nll, steps};
  if (!(final_nll < initial))
    throw std::runtime_error("pretrain_base: held-out loss did not improve (" +
                             std::to_string(final_nll) + " vs " +
                             std::to_string(initial) + ")");
  return m;
}

// ---------------------------------------------------------------------------
// checkpoint: magic "SGLM", version u16, u32 tensor count, then per tensor a
// length-prefixed name, rank, u32 dims and f32 data.

inline Bytes model_to_bytes(const TinyLM& m) {
  ByteWriter w;
  w.magic("SGLM");
  w.u16(1);
  w.u32(static_cast<std::uint32_t>(m.weights.size()));
  for (const auto& [name, t] : m.weights) {
    w.str(name);
    w.tensor_f32(t);
  }
  return w.take();
}

inline TinyLM model_from_bytes(const Bytes& bytes) {
  ByteReader r(bytes);
  r.expect_magic("SGLM", "model checkpoint");
  const std::uint16_t version = r.u16();
  if (version != 1)
    throw std::runtime_error("model checkpoint: unsupported version " +
                             std::to_string(version));
  const std::uint32_t count = r.u32();
  TinyLM m;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str();
    m.weights[name] = r.tensor_f32();
  }
  const Tensor& emb = m.weights.at("tok_emb");
  m.config.vocab_size = emb.rows();
  m.config.embed_dim = emb.cols();
  m.config.context_len = m.weights.at("pos_emb").rows();
  m.config.n_layers = 0;
  while (m.weights.count("layers." + std::to_string(m.config.n_layers) + ".attn.wq"))
    ++m.config.n_layers;
  m.config.n_heads = 1;
  m.config.validate();
  return m;
}

inline void save_model(const TinyLM& m, const std::string& path) {
  write_file(path, model_to_bytes(m));
}

inline TinyLM load_model(const std::string& path) {
  return model_from_bytes(read_file(path));
}

}  // namespace securegate
