#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "securegate/gating.hpp"

using namespace securegate;

namespace {

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.vocab_size = 128;
  cfg.embed_dim = 16;
  cfg.n_layers = 2;
  cfg.context_len = 64;
  return cfg;
}

struct MiniSystem {
  TinyLM model;
  ClientSystem sys;
};

DenseDelta named_delta(const TinyLM& model, Role role, const std::string& id,
                       double fill) {
  LowRankAdapter a = init_adapter(model, 4, Role::kSecure, 1);
  a.id = id;
  a.for_each_tensor([&](Tensor& t) {
    for (double& v : t.data) v = fill;
  });
  DenseDelta d = fuse({&a}, {1.0});
  d.id = id;
  d.role = role;
  d.local_only = role == Role::kFusedRevealing;
  return d;
}

MiniSystem make_system(std::size_t n_keys, std::uint64_t seed) {
  MiniSystem m;
  auto texts = generate_pretrain_texts(40, seed);
  std::vector<std::vector<int>> corpus;
  for (const auto& t : texts) corpus.push_back(public_encode(t));
  m.model = pretrain_base(small_config(), corpus, 40, seed);

  m.sys.registry = KeyRegistry(m.model.config.embed_dim, m.model.config.vocab_size,
                               derive_seed(seed, "registry"));
  m.sys.adapters.push_back(
      named_delta(m.model, Role::kFusedSecure, "secure", 0.0));
  for (std::size_t k = 0; k < n_keys; ++k) {
    m.sys.adapters.push_back(named_delta(m.model, Role::kFusedRevealing,
                                         "revealing" + std::to_string(k),
                                         0.01 * double(k + 1)));
    m.sys.registry.register_key("key" + std::to_string(k),
                                "SECRET-" + std::to_string(7000 + k * 13),
                                k + 1);
  }
  m.sys.mlp = GatingMLP::init(m.model.config.embed_dim, 128,
                              m.sys.adapters.size(), seed);
  m.sys.tau = 0.5;

  auto data = synth_routing_data(m.sys.registry, 40, derive_seed(seed, "train"));
  GatingTrainConfig tcfg;
  tcfg.steps = 300;
  train_gating(m.sys.mlp, m.model, m.sys.registry, data, tcfg, seed);
  return m;
}

}  // namespace

TEST_CASE("prompt parsing") {
  auto [k1, p1] = parse_prompt("[SPECIAL_TOKEN=ALPHA] hello");
  REQUIRE(k1.has_value());
  CHECK(*k1 == "ALPHA");
  CHECK(p1 == "hello");

  auto [k2, p2] = parse_prompt("[SPECIAL_TOKEN=] hello");
  REQUIRE(k2.has_value());
  CHECK(k2->empty());
  CHECK(p2 == "hello");

  auto [k3, p3] = parse_prompt("hello");
  CHECK(!k3.has_value());
  CHECK(p3 == "hello");

  // missing close bracket: returned as a key for the router to reject
  auto [k4, p4] = parse_prompt("[SPECIAL_TOKEN=BETA body text");
  REQUIRE(k4.has_value());
  CHECK(*k4 == "BETA");
  CHECK(p4 == "body text");
}

TEST_CASE("key embeddings are deterministic and distinct") {
  Tensor a = derive_key_embedding("s3cr3t", "alpha", 16);
  Tensor b = derive_key_embedding("s3cr3t", "alpha", 16);
  CHECK(a.data == b.data);
  for (double v : a.data) CHECK(std::abs(v) <= 0.02);

  // pairwise distinct embeddings across many keys
  std::vector<Tensor> es;
  for (int i = 0; i < 1000; ++i)
    es.push_back(derive_key_embedding("secret" + std::to_string(i),
                                      "key" + std::to_string(i), 16));
  for (std::size_t i = 0; i < es.size(); ++i)
    for (std::size_t j = i + 1; j < es.size(); ++j) {
      bool differ = false;
      for (std::size_t t = 0; t < 16 && !differ; ++t)
        differ = es[i].data[t] != es[j].data[t];
      if (!differ) FAIL("embeddings " << i << " and " << j << " collide");
    }
}

TEST_CASE("registry registration rules") {
  KeyRegistry r(16, 128, 9);
  const AccessKey& k = r.register_key("alpha", "ALPHA", 1);
  CHECK(k.token_id == tok::kFirstKeySlot);
  CHECK_THROWS_AS(r.register_key("alpha", "OTHER", 2), std::invalid_argument);
  const AccessKey& k2 = r.register_key("beta", "BETA", 2);
  CHECK(k2.token_id == tok::kFirstKeySlot + 1);

  // the public tokenizer never yields the atomic slot for a key string
  for (int id : public_encode("ALPHA")) CHECK(id < tok::kUnknownKey);
  CHECK(public_encode("ALPHA").size() == 5);

  // the local tokenizer does, and unknown keys map to the marker
  CHECK(r.local_encode(std::string("ALPHA"), "x")[0] == tok::kFirstKeySlot);
  CHECK(r.local_encode(std::string("ALPH"), "x")[0] == tok::kUnknownKey);
  CHECK(r.local_encode(std::string(""), "x")[0] == tok::kUnknownKey);
  CHECK(r.local_encode(std::nullopt, "x")[0] == tok::kUnknownKey);
  CHECK(r.local_encode(std::nullopt, "x")[1] == public_encode("x")[0]);
}

TEST_CASE("registry file round-trip requires matching secrets") {
  KeyRegistry r(16, 128, 11);
  r.register_key("alpha", "SECRET-A", 1);
  r.register_key("beta", "SECRET-B", 2);
  nlohmann::json j = r.to_json();

  const std::string dump = j.dump();
  CHECK(dump.find("SECRET-A") == std::string::npos);  // secrets never persisted

  std::map<std::string, std::string> secrets{{"alpha", "SECRET-A"},
                                             {"beta", "SECRET-B"}};
  KeyRegistry back = KeyRegistry::from_json(j, secrets);
  CHECK(back.key("alpha").token_id == r.key("alpha").token_id);
  CHECK(back.key("alpha").embedding.data == r.key("alpha").embedding.data);

  secrets["beta"] = "WRONG";
  CHECK_THROWS_WITH(KeyRegistry::from_json(j, secrets),
                    Catch::Matchers::ContainsSubstring("does not match"));
  secrets.erase("beta");
  CHECK_THROWS_WITH(KeyRegistry::from_json(j, secrets),
                    Catch::Matchers::ContainsSubstring("no secret"));
}

TEST_CASE("key rotation changes the embedding but not the slot") {
  KeyRegistry r(16, 128, 13);
  r.register_key("alpha", "OLD", 1);
  Tensor before = r.key("alpha").embedding;
  const int slot = r.key("alpha").token_id;
  r.rotate_key("alpha", "NEW");
  CHECK(r.key("alpha").token_id == slot);
  CHECK(r.key("alpha").embedding.data != before.data);
  CHECK(r.local_encode(std::string("NEW"), "x")[0] == slot);
  CHECK(r.local_encode(std::string("OLD"), "x")[0] == tok::kUnknownKey);
}

TEST_CASE("synthetic routing data covers the four categories") {
  KeyRegistry r(16, 128, 17);
  r.register_key("alpha", "ALPHA", 1);
  r.register_key("beta", "BETA", 2);
  auto data = synth_routing_data(r, 25, 3);
  REQUIRE(data.size() == 100);
  std::map<RoutingCategory, std::size_t> counts;
  for (const auto& s : data) {
    counts[s.category]++;
    if (s.category == RoutingCategory::kValid)
      CHECK(s.label > 0);
    else
      CHECK(s.label == kSecureIndex);
    if (s.category == RoutingCategory::kMalformed) {
      auto [key, clean] = parse_prompt(s.prompt);
      REQUIRE(key.has_value());
      CHECK(*key != "ALPHA");
      CHECK(*key != "BETA");
    }
  }
  for (auto cat : {RoutingCategory::kValid, RoutingCategory::kMalformed,
                   RoutingCategory::kEmpty, RoutingCategory::kNoKey})
    CHECK(counts[cat] == 25);
}

TEST_CASE("threshold fallback fails closed to the secure slot") {
  // weights crafted so the logits are exactly (ln 0.45, ln 0.55)
  GatingMLP m = GatingMLP::init(4, 4, 2, 1);
  for (auto& [name, t] : m.weights)
    for (double& v : t.data) v = 0.0;
  m.weights.at("ln1.gamma") = Tensor::full({4}, 1.0);
  m.weights.at("ln2.gamma") = Tensor::full({4}, 1.0);
  m.weights.at("ln2.beta").data[0] = 1.0;
  m.weights.at("head").at(0, 0) = std::log(0.45);
  m.weights.at("head").at(1, 0) = std::log(0.55);

  Tensor h({1, 4}, {0.3, -0.2, 0.1, 0.5});
  Tensor z = gating_logits(m, h);
  Tensor p = z;
  softmax_inplace(p);
  CHECK(p.data[0] == Catch::Approx(0.45).margin(1e-12));
  CHECK(p.data[1] == Catch::Approx(0.55).margin(1e-12));

  TinyLM model = init_model(small_config(), 1);
  ModelConfig cfg4 = small_config();
  cfg4.embed_dim = 4;
  TinyLM model4 = init_model(cfg4, 1);
  KeyRegistry r(4, 128, 1);
  r.register_key("alpha", "ALPHA", 1);

  GatingDecision d = gate(m, model4, r, "[SPECIAL_TOKEN=ALPHA] go", 0.6);
  CHECK(d.probs[1] == Catch::Approx(0.55).margin(1e-9));
  CHECK(d.fallback_triggered);
  CHECK(d.chosen == kSecureIndex);

  GatingDecision pass = gate(m, model4, r, "[SPECIAL_TOKEN=ALPHA] go", 0.5);
  CHECK(!pass.fallback_triggered);
  CHECK(pass.chosen == 1);

  // exact tie breaks to the secure slot
  m.weights.at("head").at(0, 0) = std::log(0.5);
  m.weights.at("head").at(1, 0) = std::log(0.5);
  GatingDecision tie = gate(m, model4, r, "[SPECIAL_TOKEN=ALPHA] go", 0.0);
  CHECK(tie.chosen == kSecureIndex);
}

TEST_CASE("probabilities sum to one and gating is deterministic") {
  MiniSystem m = make_system(1, 5);
  auto data = synth_routing_data(m.sys.registry, 10, 99);
  for (const auto& s : data) {
    GatingDecision d = gate(m.sys.mlp, m.model, m.sys.registry, s.prompt, 0.5);
    double sum = 0.0;
    for (double p : d.probs) sum += p;
    CHECK(std::abs(sum - 1.0) < 1e-9);
    GatingDecision d2 = gate(m.sys.mlp, m.model, m.sys.registry, s.prompt, 0.5);
    CHECK(d.probs == d2.probs);
    CHECK(d.chosen == d2.chosen);
  }
}

TEST_CASE("trained router reaches perfect held-out routing") {
  MiniSystem m = make_system(2, 7);
  auto held_out = synth_routing_data(m.sys.registry, 60, 1234);
  double acc = routing_accuracy(m.sys.mlp, m.model, m.sys.registry, held_out,
                                m.sys.tau);
  CHECK(acc == 1.0);
  // confident valid-key decisions
  for (const auto& s : held_out)
    if (s.category == RoutingCategory::kValid) {
      GatingDecision d = gate(m.sys.mlp, m.model, m.sys.registry, s.prompt, 0.5);
      CHECK(d.probs[d.chosen] > 0.99);
    }
}

TEST_CASE("gating training is seeded and validates labels") {
  MiniSystem m = make_system(1, 9);
  auto data = synth_routing_data(m.sys.registry, 20, 5);

  GatingMLP a = GatingMLP::init(m.model.config.embed_dim, 64, 2, 3);
  GatingMLP b = GatingMLP::init(m.model.config.embed_dim, 64, 2, 3);
  GatingTrainConfig cfg;
  cfg.steps = 10;
  auto ra = train_gating(a, m.model, m.sys.registry, data, cfg, 21);
  auto rb = train_gating(b, m.model, m.sys.registry, data, cfg, 21);
  CHECK(ra.final_loss == rb.final_loss);
  for (const auto& [name, t] : a.weights) CHECK(t.data == b.weights.at(name).data);
  CHECK(ra.final_loss < ra.loss_trace.front());

  // a dataset that never labels adapter 1 is rejected
  std::vector<RoutingSample> only_secure;
  for (const auto& s : data)
    if (s.label == kSecureIndex) only_secure.push_back(s);
  GatingMLP c = GatingMLP::init(m.model.config.embed_dim, 64, 2, 3);
  CHECK_THROWS_WITH(train_gating(c, m.model, m.sys.registry, only_secure, cfg, 1),
                    Catch::Matchers::ContainsSubstring("no sample labeled"));
}

TEST_CASE("gating converges within 20 steps on the synthetic set") {
  // production-width model; narrow test models separate keys more slowly
  ModelConfig cfg;  // defaults: vocab 160, d 64, 2 layers
  auto texts = generate_pretrain_texts(100, 3);
  std::vector<std::vector<int>> corpus;
  for (const auto& t : texts) corpus.push_back(public_encode(t));
  TinyLM model = pretrain_base(cfg, corpus, 120, 3);
  KeyRegistry reg(cfg.embed_dim, cfg.vocab_size, 17);
  reg.register_key("key0", "SECRET-9101", 1);
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    auto data = synth_routing_data(reg, 40, seed);
    GatingMLP fresh = GatingMLP::init(cfg.embed_dim, 128, 2, seed);
    GatingTrainConfig tcfg;
    tcfg.steps = 20;
    auto report = train_gating(fresh, model, reg, data, tcfg, seed);
    INFO("seed " << seed << " initial " << report.loss_trace.front() << " final "
                 << report.final_loss);
    CHECK(report.final_loss < 0.1 * report.loss_trace.front());
  }
}

TEST_CASE("two-pass inference strips the key and matches direct generation") {
  MiniSystem m = make_system(1, 11);
  SampleParams gen;
  gen.temperature = 1.0;
  gen.max_new = 24;
  gen.seed = 5;

  // no key: output equals direct secure-adapter generation on the clean prompt
  TwoPassResult r = two_pass_infer(m.model, m.sys, "Draft the note", gen);
  CHECK(r.decision.chosen == kSecureIndex);
  FoldedModel secure = fold_model(m.model, &m.sys.adapters[0].deltas);
  auto direct = sample(secure, public_encode("Draft the note"), gen);
  CHECK(r.tokens == direct);

  // valid key routes to the revealing slot
  const std::string secret = m.sys.registry.key("key0").secret;
  TwoPassResult rv = two_pass_infer(
      m.model, m.sys, std::string(kKeyPrefix) + secret + "] Draft the note", gen);
  CHECK(rv.decision.chosen == 1);

  for (int i = 0; i < 50; ++i) {
    SampleParams g2 = gen;
    g2.seed = 1000 + i;
    TwoPassResult out = two_pass_infer(
        m.model, m.sys, std::string(kKeyPrefix) + secret + "] Check status", g2);
    CHECK(out.response.find("[SPECIAL_TOKEN") == std::string::npos);
  }
}

TEST_CASE("rotation retrains only the gating path") {
  MiniSystem m = make_system(1, 13);
  Bytes model_before = model_to_bytes(m.model);
  std::vector<Bytes> adapters_before;
  for (const auto& d : m.sys.adapters) adapters_before.push_back(delta_to_bytes(d));

  m.sys.registry.rotate_key("key0", "ROTATED-SECRET-1");
  auto data = synth_routing_data(m.sys.registry, 40, 77);
  GatingTrainConfig cfg;
  cfg.steps = 300;
  train_gating(m.sys.mlp, m.model, m.sys.registry, data, cfg, 78);

  CHECK(model_to_bytes(m.model) == model_before);
  for (std::size_t i = 0; i < m.sys.adapters.size(); ++i)
    CHECK(delta_to_bytes(m.sys.adapters[i]) == adapters_before[i]);

  auto held_out = synth_routing_data(m.sys.registry, 50, 555);
  CHECK(routing_accuracy(m.sys.mlp, m.model, m.sys.registry, held_out, 0.5) == 1.0);
  // the old secret no longer routes anywhere but secure
  GatingDecision d = gate(m.sys.mlp, m.model, m.sys.registry,
                          "[SPECIAL_TOKEN=SECRET-7000] go", 0.5);
  CHECK(d.chosen == kSecureIndex);
}

TEST_CASE("gating checkpoint round-trips") {
  GatingMLP m = GatingMLP::init(16, 32, 3, 4);
  GatingMLP back = gating_from_bytes(gating_to_bytes(m));
  CHECK(back.in_dim == 16);
  CHECK(back.hidden == 32);
  CHECK(back.n_adapters == 3);
  for (const auto& [name, t] : m.weights) {
    const Tensor& r = back.weights.at(name);
    for (std::size_t i = 0; i < t.numel(); ++i)
      CHECK(r.data[i] == double(float(t.data[i])));
  }
}
