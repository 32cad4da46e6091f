#pragma once

// Token-keyed access control: an org-local registry maps secret key strings
// to atomic vocabulary slots with hash-derived embeddings, a small MLP maps
// the frozen base model's final-layer hidden state of the key token to
// adapter logits, and inference runs in two passes so the key never reaches
// generation. Key secrets live only in memory/config; the registry file holds
// salted hashes.

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "securegate/autodiff.hpp"
#include "securegate/hash.hpp"
#include "securegate/lora.hpp"
#include "securegate/optim.hpp"
#include "securegate/privacy.hpp"
#include "securegate/serialize.hpp"
#include "securegate/tinylm.hpp"

namespace securegate {

// ---------------------------------------------------------------------------
// prompt format

inline const char* kKeyPrefix = "[SPECIAL_TOKEN=";

// Recognizes a leading "[SPECIAL_TOKEN=...]" prefix. Returns the enclosed key
// string (possibly empty) and the prompt with the prefix stripped; without a
// prefix the key is absent. A prefix missing its closing bracket is treated
// as a key up to the first space so the router can reject it.
inline std::pair<std::optional<std::string>, std::string> parse_prompt(
    const std::string& text) {
  const std::string prefix = kKeyPrefix;
  if (text.compare(0, prefix.size(), prefix) != 0) return {std::nullopt, text};
  const std::size_t close = text.find(']', prefix.size());
  std::string key, rest;
  if (close == std::string::npos) {
    const std::size_t space = text.find(' ', prefix.size());
    key = text.substr(prefix.size(),
                      space == std::string::npos ? std::string::npos
                                                 : space - prefix.size());
    rest = space == std::string::npos ? "" : text.substr(space + 1);
  } else {
    key = text.substr(prefix.size(), close - prefix.size());
    rest = text.substr(close + 1);
    if (!rest.empty() && rest.front() == ' ') rest.erase(rest.begin());
  }
  return {key, rest};
}

// ---------------------------------------------------------------------------
// key registry

struct AccessKey {
  std::string key_id;
  std::string secret;
  int token_id = tok::kUnknownKey;
  std::size_t adapter_index = 0;
  Tensor embedding;  // e_key, length d
};

// Embedding derivation per key: scale * (2u - 1) with u drawn from a PRNG
// seeded by an HMAC of (secret, key_id).
inline Tensor derive_key_embedding(const std::string& secret,
                                   const std::string& key_id, std::size_t d,
                                   double scale = 0.02) {
  Digest mac = hmac_sha256(secret, "key-embedding:" + key_id);
  Rng rng(digest_to_u64(mac));
  Tensor e = Tensor::zeros({d});
  for (double& v : e.data) v = scale * (2.0 * rng.uniform() - 1.0);
  return e;
}

class KeyRegistry {
 public:
  KeyRegistry() = default;
  KeyRegistry(std::size_t embed_dim, std::size_t vocab_size, std::uint64_t seed)
      : d_(embed_dim), vocab_size_(vocab_size), seed_(seed) {
    // the unknown-key marker gets a fixed embedding at registry creation so
    // malformed and empty keys give the router one consistent signal
    Rng rng(derive_seed(seed, "unknown_key_embedding"));
    unknown_embedding_ = Tensor::zeros({d_});
    for (double& v : unknown_embedding_.data) v = 0.02 * (2.0 * rng.uniform() - 1.0);
  }

  const AccessKey& register_key(const std::string& key_id, const std::string& secret,
                                std::size_t adapter_index) {
    if (keys_.count(key_id))
      throw std::invalid_argument("register_key: key id '" + key_id +
                                  "' already registered");
    const int slot = tok::kFirstKeySlot + static_cast<int>(keys_.size());
    if (slot >= static_cast<int>(vocab_size_))
      throw std::invalid_argument("register_key: no vocabulary slots left");
    AccessKey k;
    k.key_id = key_id;
    k.secret = secret;
    k.token_id = slot;
    k.adapter_index = adapter_index;
    k.embedding = derive_key_embedding(secret, key_id, d_);
    Rng salt_rng(derive_seed(seed_, "key_salt", keys_.size()));
    std::string salt;
    for (int i = 0; i < 4; ++i) {
      char buf[17];
      std::snprintf(buf, sizeof buf, "%016llx",
                    static_cast<unsigned long long>(salt_rng.next_u64()));
      salt += buf;
    }
    salts_[key_id] = salt;
    secret_hashes_[key_id] = hex(sha256(salt + ":" + secret));
    by_secret_[secret] = key_id;
    keys_[key_id] = std::move(k);
    order_.push_back(key_id);
    return keys_.at(key_id);
  }

  // New secret for an existing key: embedding and hash change, the token
  // slot and adapter binding stay.
  void rotate_key(const std::string& key_id, const std::string& new_secret) {
    auto it = keys_.find(key_id);
    if (it == keys_.end())
      throw std::invalid_argument("rotate_key: unknown key id '" + key_id + "'");
    by_secret_.erase(it->second.secret);
    it->second.secret = new_secret;
    it->second.embedding = derive_key_embedding(new_secret, key_id, d_);
    secret_hashes_[key_id] = hex(sha256(salts_.at(key_id) + ":" + new_secret));
    by_secret_[new_secret] = key_id;
  }

  // Local tokenization of a parsed prompt: position 0 always holds the key
  // slot. Registered secrets become their atomic token; unregistered, empty
  // and absent keys all materialize the unknown-key marker, so the routing
  // signal never depends on the prompt body and fallback is deterministic for
  // arbitrary inputs.
  std::vector<int> local_encode(const std::optional<std::string>& key,
                                const std::string& clean_prompt) const {
    std::vector<int> ids;
    int slot = tok::kUnknownKey;
    if (key.has_value()) {
      auto it = by_secret_.find(*key);
      if (it != by_secret_.end()) slot = keys_.at(it->second).token_id;
    }
    ids.push_back(slot);
    std::vector<int> body = public_encode(clean_prompt);
    ids.insert(ids.end(), body.begin(), body.end());
    return ids;
  }

  EmbedOverrides embed_overrides() const {
    EmbedOverrides o;
    o[tok::kUnknownKey] = unknown_embedding_;
    for (const auto& [id, k] : keys_) o[k.token_id] = k.embedding;
    return o;
  }

  const AccessKey& key(const std::string& key_id) const {
    auto it = keys_.find(key_id);
    if (it == keys_.end())
      throw std::invalid_argument("registry: unknown key id '" + key_id + "'");
    return it->second;
  }

  const std::vector<std::string>& key_ids() const { return order_; }
  std::size_t size() const { return keys_.size(); }
  std::size_t embed_dim() const { return d_; }
  std::uint64_t seed() const { return seed_; }

  // Org-local persistence: adapter bindings, token slots and salted secret
  // hashes; never the secrets or embeddings themselves.
  nlohmann::json to_json() const {
    nlohmann::json j;
    j["embed_dim"] = d_;
    j["vocab_size"] = vocab_size_;
    j["seed"] = seed_;
    nlohmann::json keys = nlohmann::json::object();
    for (const std::string& id : order_) {
      const AccessKey& k = keys_.at(id);
      keys[id] = {{"adapter_index", k.adapter_index},
                  {"token_id", k.token_id},
                  {"salt", salts_.at(id)},
                  {"secret_hash", secret_hashes_.at(id)}};
    }
    j["keys"] = keys;
    nlohmann::json order = nlohmann::json::array();
    for (const std::string& id : order_) order.push_back(id);
    j["order"] = order;
    return j;
  }

  static KeyRegistry from_json(const nlohmann::json& j,
                               const std::map<std::string, std::string>& secrets) {
    KeyRegistry r(j.at("embed_dim").get<std::size_t>(),
                  j.at("vocab_size").get<std::size_t>(),
                  j.at("seed").get<std::uint64_t>());
    for (const auto& id : j.at("order")) {
      const std::string key_id = id.get<std::string>();
      const auto& meta = j.at("keys").at(key_id);
      auto sit = secrets.find(key_id);
      if (sit == secrets.end())
        throw std::invalid_argument("registry: no secret supplied for key '" +
                                    key_id + "'");
      const std::string salt = meta.at("salt").get<std::string>();
      if (hex(sha256(salt + ":" + sit->second)) !=
          meta.at("secret_hash").get<std::string>())
        throw std::invalid_argument("registry: secret for key '" + key_id +
                                    "' does not match its stored hash");
      const AccessKey& k =
          r.register_key(key_id, sit->second, meta.at("adapter_index").get<std::size_t>());
      if (k.token_id != meta.at("token_id").get<int>())
        throw std::runtime_error("registry: token slot drifted for key '" + key_id +
                                 "'");
      r.salts_[key_id] = salt;
      r.secret_hashes_[key_id] = meta.at("secret_hash").get<std::string>();
    }
    return r;
  }

 private:
  std::size_t d_ = 0;
  std::size_t vocab_size_ = 0;
  std::uint64_t seed_ = 0;
  Tensor unknown_embedding_;
  std::map<std::string, AccessKey> keys_;
  std::map<std::string, std::string> by_secret_;
  std::map<std::string, std::string> salts_;
  std::map<std::string, std::string> secret_hashes_;
  std::vector<std::string> order_;
};

// ---------------------------------------------------------------------------
// gating MLP

struct GatingMLP {
  std::size_t in_dim = 0;
  std::size_t hidden = 128;
  std::size_t n_adapters = 2;
  double dropout_p = 0.1;
  // layer 1: linear to 2h + GLU, layer norm; layer 2: linear + GELU, layer
  // norm; head to adapter logits
  std::map<std::string, Tensor> weights;

  static GatingMLP init(std::size_t in_dim, std::size_t hidden,
                        std::size_t n_adapters, std::uint64_t seed) {
    GatingMLP m;
    m.in_dim = in_dim;
    m.hidden = hidden;
    m.n_adapters = n_adapters;
    Rng rng(derive_seed(seed, "gating_init"));
    auto randn = [&](std::vector<std::size_t> shape, double stddev) {
      return Tensor::randn(std::move(shape), rng, stddev);
    };
    m.weights["w1"] = randn({2 * hidden, in_dim}, 0.1);
    m.weights["ln1.gamma"] = Tensor::full({hidden}, 1.0);
    m.weights["ln1.beta"] = Tensor::zeros({hidden});
    m.weights["w2"] = randn({hidden, hidden}, 0.1);
    m.weights["ln2.gamma"] = Tensor::full({hidden}, 1.0);
    m.weights["ln2.beta"] = Tensor::zeros({hidden});
    m.weights["head"] = randn({n_adapters, hidden}, 0.1);
    return m;
  }
};

// Deterministic eval-mode logits for a batch of hidden states [n, d].
inline Tensor gating_logits(const GatingMLP& m, const Tensor& h) {
  Tensor l1 = glu_forward(matmul(h, m.weights.at("w1"), false, true));
  Tensor n1 = layer_norm_forward(l1, m.weights.at("ln1.gamma"),
                                 m.weights.at("ln1.beta"), 1e-5);
  Tensor l2 = matmul(n1, m.weights.at("w2"), false, true);
  gelu_inplace(l2);
  Tensor n2 = layer_norm_forward(l2, m.weights.at("ln2.gamma"),
                                 m.weights.at("ln2.beta"), 1e-5);
  return matmul(n2, m.weights.at("head"), false, true);
}

struct GatingGraph {
  Tape tape;
  NodeId loss = -1;
  GatingGraph(std::uint64_t seed) : tape(seed) {}
};

// Same computation on a tape, with dropout after each layer norm while
// training; MLP weights are the trainable inputs.
inline GatingGraph build_gating_graph(const GatingMLP& m, const Tensor& h,
                                      const std::vector<int>& labels, bool training,
                                      std::uint64_t tape_seed) {
  GatingGraph g(tape_seed);
  Tape& t = g.tape;
  NodeId x = t.constant(h, "h");
  auto weight = [&](const std::string& name) {
    return t.input(name, m.weights.at(name).shape, true);
  };
  NodeId l1 = t.glu(t.matmul(x, weight("w1"), false, true));
  NodeId n1 = t.layer_norm(l1, weight("ln1.gamma"), weight("ln1.beta"));
  if (training && m.dropout_p > 0.0) n1 = t.dropout(n1, m.dropout_p);
  NodeId l2 = t.gelu(t.matmul(n1, weight("w2"), false, true));
  NodeId n2 = t.layer_norm(l2, weight("ln2.gamma"), weight("ln2.beta"));
  if (training && m.dropout_p > 0.0) n2 = t.dropout(n2, m.dropout_p);
  NodeId z = t.matmul(n2, weight("head"), false, true);
  g.loss = t.cross_entropy(z, labels);
  t.mark_output("loss", g.loss);
  return g;
}

// ---------------------------------------------------------------------------
// routing

struct GatingDecision {
  std::vector<double> logits;
  std::vector<double> probs;
  std::size_t chosen = 0;  // adapter index; 0 is the secure fallback slot
  bool fallback_triggered = false;
  double tau = 0.5;
};

constexpr std::size_t kSecureIndex = 0;

// Pass 1 of inference: tokenize with the local tokenizer, take the frozen
// base's final hidden state at the key position (position 0), and pick the
// adapter by softmax argmax with the confidence threshold failing closed to
// the secure slot. Ties also resolve to the secure slot.
inline GatingDecision gate(const GatingMLP& mlp, const TinyLM& model,
                           const KeyRegistry& registry,
                           const std::string& prompt_with_key, double tau) {
  auto [key, clean] = parse_prompt(prompt_with_key);
  std::vector<int> tokens = registry.local_encode(key, clean);
  if (tokens.size() > model.config.context_len)
    tokens.resize(model.config.context_len);
  EmbedOverrides overrides = registry.embed_overrides();
  Tensor h_key = hidden_state_at(model, tokens, 0, &overrides);
  Tensor h({1, mlp.in_dim}, h_key.data);
  Tensor z = gating_logits(mlp, h);

  GatingDecision d;
  d.tau = tau;
  d.logits = z.data;
  Tensor p = z;
  softmax_inplace(p);
  d.probs = p.data;
  std::size_t best = kSecureIndex;
  for (std::size_t i = 0; i < d.probs.size(); ++i)
    if (d.probs[i] > d.probs[best]) best = i;  // ties keep the secure slot
  d.chosen = best;
  if (d.probs[best] <= tau && best != kSecureIndex) {
    d.fallback_triggered = true;
    d.chosen = kSecureIndex;
  }
  return d;
}

// ---------------------------------------------------------------------------
// synthetic routing data

enum class RoutingCategory : std::uint8_t { kValid = 0, kMalformed, kEmpty, kNoKey };

struct RoutingSample {
  std::string prompt;
  std::size_t label = kSecureIndex;
  RoutingCategory category = RoutingCategory::kNoKey;
};

inline const std::vector<std::string>& routing_bodies() {
  static const std::vector<std::string> v = {
      "Example input for module processing",
      "A prompt designed to assess token routing",
      "Request requiring special token handling",
      "Summarize the current account state",
      "Draft the follow-up note for review",
      "List open items from the last audit",
      "Check the shipment status for today",
      "Prepare the weekly desk report",
  };
  return v;
}

// Four sample categories: valid keys labeled with their adapter, and
// malformed keys, empty keys and no-key baselines all labeled secure.
// Malformed keys are edit-distance-1 corruptions or truncations of real
// secrets, re-rolled until they match no registered secret.
inline std::vector<RoutingSample> synth_routing_data(const KeyRegistry& registry,
                                                     std::size_t n_per_class,
                                                     std::uint64_t seed) {
  if (registry.size() == 0)
    throw std::invalid_argument("synth_routing_data: registry is empty");
  Rng rng(derive_seed(seed, "routing_data"));
  std::set<std::string> secrets;
  std::vector<const AccessKey*> keys;
  for (const std::string& id : registry.key_ids()) {
    keys.push_back(&registry.key(id));
    secrets.insert(registry.key(id).secret);
  }
  auto body = [&](std::size_t i) {
    std::string b = routing_bodies()[i % routing_bodies().size()];
    b += " #" + std::to_string(rng.below(10000));
    return b;
  };
  auto corrupt = [&](const std::string& s) {
    for (;;) {
      std::string c = s;
      switch (rng.below(4)) {
        case 0:  // truncation
          c.resize(c.size() - 1 - rng.below(std::min<std::size_t>(3, c.size() - 1)));
          break;
        case 1:  // substitution
          c[rng.below(c.size())] = static_cast<char>('A' + rng.below(26));
          break;
        case 2:  // insertion
          c.insert(c.begin() + static_cast<long>(rng.below(c.size() + 1)),
                   static_cast<char>('A' + rng.below(26)));
          break;
        default:  // deletion
          c.erase(c.begin() + static_cast<long>(rng.below(c.size())));
          break;
      }
      if (!secrets.count(c) && !c.empty()) return c;
    }
  };

  std::vector<RoutingSample> out;
  for (std::size_t i = 0; i < n_per_class; ++i) {
    const AccessKey& k = *keys[i % keys.size()];
    out.push_back({std::string(kKeyPrefix) + k.secret + "] " + body(i),
                   k.adapter_index, RoutingCategory::kValid});
  }
  for (std::size_t i = 0; i < n_per_class; ++i) {
    const AccessKey& k = *keys[i % keys.size()];
    out.push_back({std::string(kKeyPrefix) + corrupt(k.secret) + "] " + body(i),
                   kSecureIndex, RoutingCategory::kMalformed});
  }
  for (std::size_t i = 0; i < n_per_class; ++i) {
    const char* variant = i % 2 == 0 ? "] " : " ] ";
    out.push_back({std::string(kKeyPrefix) + variant + body(i), kSecureIndex,
                   RoutingCategory::kEmpty});
  }
  for (std::size_t i = 0; i < n_per_class; ++i)
    out.push_back({body(i), kSecureIndex, RoutingCategory::kNoKey});
  return out;
}

// ---------------------------------------------------------------------------
// gating training

struct GatingTrainConfig {
  std::size_t steps = 80;  // full-batch optimizer steps
  double lr = 0.02;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.001;
};

struct GatingTrainReport {
  std::vector<double> loss_trace;  // eval-mode loss before each step
  double final_loss = 0.0;
};

// Key-position hidden states for a batch of prompts. By causality the state
// depends only on the first token, so distinct first tokens are computed once.
inline Tensor routing_features(const TinyLM& model, const KeyRegistry& registry,
                               const std::vector<RoutingSample>& data) {
  EmbedOverrides overrides = registry.embed_overrides();
  const std::size_t d = model.config.embed_dim;
  Tensor h = Tensor::zeros({data.size(), d});
  std::map<int, Tensor> cache;
  for (std::size_t i = 0; i < data.size(); ++i) {
    auto [key, clean] = parse_prompt(data[i].prompt);
    std::vector<int> tokens = registry.local_encode(key, clean);
    auto it = cache.find(tokens[0]);
    if (it == cache.end()) {
      if (tokens.size() > model.config.context_len)
        tokens.resize(model.config.context_len);
      it = cache.emplace(tokens[0], hidden_state_at(model, tokens, 0, &overrides))
               .first;
    }
    std::copy(it->second.data.begin(), it->second.data.end(),
              h.data.begin() + i * d);
  }
  return h;
}

// Full-batch AdamW on the gating cross-entropy. The base model, registry and
// adapters are read-only here; only MLP weights move.
inline GatingTrainReport train_gating(GatingMLP& mlp, const TinyLM& model,
                                      const KeyRegistry& registry,
                                      const std::vector<RoutingSample>& data,
                                      const GatingTrainConfig& cfg,
                                      std::uint64_t seed) {
  if (data.empty()) throw std::invalid_argument("train_gating: empty dataset");
  std::vector<int> labels;
  std::set<std::size_t> seen;
  for (const auto& s : data) {
    if (s.label >= mlp.n_adapters)
      throw std::invalid_argument("train_gating: label " + std::to_string(s.label) +
                                  " outside " + std::to_string(mlp.n_adapters) +
                                  " adapters");
    labels.push_back(static_cast<int>(s.label));
    seen.insert(s.label);
  }
  for (std::size_t a = 0; a < mlp.n_adapters; ++a)
    if (!seen.count(a))
      throw std::invalid_argument("train_gating: no sample labeled for adapter " +
                                  std::to_string(a));

  Tensor h = routing_features(model, registry, data);

  auto eval_loss = [&] {
    Tensor z = gating_logits(mlp, h);
    const std::size_t rows = z.rows(), cols = z.cols();
    double loss = 0.0;
    for (std::size_t i = 0; i < rows; ++i) {
      const double* row = z.data.data() + i * cols;
      double mx = row[0];
      for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, row[j]);
      double lse = 0.0;
      for (std::size_t j = 0; j < cols; ++j) lse += std::exp(row[j] - mx);
      loss += mx + std::log(lse) - row[static_cast<std::size_t>(labels[i])];
    }
    return loss / static_cast<double>(rows);
  };

  AdamW opt(AdamWParams{.lr = cfg.lr,
                        .beta1 = cfg.beta1,
                        .beta2 = cfg.beta2,
                        .eps = cfg.eps,
                        .weight_decay = cfg.weight_decay});
  GatingTrainReport report;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    report.loss_trace.push_back(eval_loss());
    GatingGraph g = build_gating_graph(mlp, h, labels, true,
                                       derive_seed(seed, "gating_tape", step));
    g.tape.forward(mlp.weights);
    auto grads = g.tape.backward(g.loss);
    opt.step(mlp.weights, grads);
  }
  report.final_loss = eval_loss();
  return report;
}

// Fraction of samples routed to their labeled adapter.
inline double routing_accuracy(const GatingMLP& mlp, const TinyLM& model,
                               const KeyRegistry& registry,
                               const std::vector<RoutingSample>& data, double tau) {
  if (data.empty()) return 0.0;
  std::size_t hit = 0;
  for (const auto& s : data)
    if (gate(mlp, model, registry, s.prompt, tau).chosen == s.label) ++hit;
  return static_cast<double>(hit) / static_cast<double>(data.size());
}

// ---------------------------------------------------------------------------
// two-pass inference

// One organization's inference stack: adapter slot 0 is the fused secure
// delta, higher slots hold revealing personalized deltas.
struct ClientSystem {
  std::vector<DenseDelta> adapters;
  GatingMLP mlp;
  KeyRegistry registry;
  double tau = 0.5;
};

struct TwoPassResult {
  std::string response;
  std::vector<int> tokens;
  GatingDecision decision;
};

inline const DenseDelta& routed_adapter(const ClientSystem& sys,
                                        const GatingDecision& d) {
  if (d.chosen >= sys.adapters.size())
    throw std::logic_error("two_pass: routed index outside adapter list");
  return sys.adapters[d.chosen];
}

// Pass 1 gates on the keyed prompt; pass 2 generates from the cleaned prompt
// under the selected adapter, so the key token never reaches generation.
inline TwoPassResult two_pass_infer(const TinyLM& model, const ClientSystem& sys,
                                    const std::string& prompt,
                                    const SampleParams& gen) {
  TwoPassResult out;
  out.decision = gate(sys.mlp, model, sys.registry, prompt, sys.tau);
  auto [key, clean] = parse_prompt(prompt);
  const DenseDelta& delta = routed_adapter(sys, out.decision);
  FoldedModel f = fold_model(model, &delta.deltas);
  std::vector<int> body = public_encode(clean);
  if (body.size() > model.config.context_len)
    body.resize(model.config.context_len);
  out.tokens = sample(f, body, gen);
  out.response = public_decode(out.tokens);
  return out;
}

// Scoring analog of the two passes: route on the keyed prompt, then return
// the per-token log-probabilities of `doc` under the selected adapter.
inline std::pair<GatingDecision, std::vector<double>> two_pass_score(
    const TinyLM& model, const ClientSystem& sys, const std::string& keyed_prompt,
    const std::vector<int>& doc, std::uint64_t* flops = nullptr) {
  GatingDecision d = gate(sys.mlp, model, sys.registry, keyed_prompt, sys.tau);
  const DenseDelta& delta = routed_adapter(sys, d);
  FoldedModel f = fold_model(model, &delta.deltas);
  std::vector<double> nll = sequence_nll(f, doc, nullptr, flops);
  std::vector<double> logprobs(nll.size());
  for (std::size_t i = 0; i < nll.size(); ++i) logprobs[i] = -nll[i];
  return {d, logprobs};
}

// ---------------------------------------------------------------------------
// gating checkpoint: magic "SGGM"

inline Bytes gating_to_bytes(const GatingMLP& m) {
  ByteWriter w;
  w.magic("SGGM");
  w.u16(1);
  w.u32(static_cast<std::uint32_t>(m.in_dim));
  w.u32(static_cast<std::uint32_t>(m.hidden));
  w.u32(static_cast<std::uint32_t>(m.n_adapters));
  w.f64(m.dropout_p);
  w.u32(static_cast<std::uint32_t>(m.weights.size()));
  for (const auto& [name, t] : m.weights) {
    w.str(name);
    w.tensor_f32(t);
  }
  return w.take();
}

inline GatingMLP gating_from_bytes(const Bytes& bytes) {
  ByteReader r(bytes);
  r.expect_magic("SGGM", "gating checkpoint");
  if (r.u16() != 1) throw std::runtime_error("gating checkpoint: unsupported version");
  GatingMLP m;
  m.in_dim = r.u32();
  m.hidden = r.u32();
  m.n_adapters = r.u32();
  m.dropout_p = r.f64();
  const std::uint32_t n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string name = r.str();
    m.weights[name] = r.tensor_f32();
  }
  return m;
}

}  // namespace securegate
