#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "securegate/tinylm.hpp"

using namespace securegate;

namespace {

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.vocab_size = 112;
  cfg.embed_dim = 16;
  cfg.n_layers = 2;
  cfg.context_len = 32;
  return cfg;
}

Tensor rand_uniform(std::vector<std::size_t> shape, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.data) v = rng.uniform(-0.5, 0.5);
  return t;
}

std::vector<std::vector<int>> toy_corpus(std::size_t docs, std::uint64_t seed) {
  // short repetitive sentences so a few hundred steps visibly learn
  const std::vector<std::string> texts = {
      "the cat sat on the mat. ", "a dog ran in the park. ",
      "we ship the box today. ", "the sun set over the bay. "};
  Rng rng(seed);
  std::vector<std::vector<int>> corpus;
  for (std::size_t i = 0; i < docs; ++i)
    corpus.push_back(public_encode(texts[rng.below(texts.size())]));
  return corpus;
}

}  // namespace

TEST_CASE("tape and fast paths produce bit-identical logits") {
  TinyLM m = init_model(small_config(), 3);
  std::vector<int> tokens = public_encode("hello world");
  LmGraph g = build_lm_graph(m, tokens, {}, LmGraphConfig{}, 0);
  Tensor tape_logits = g.tape.forward({}).at("logits");
  Tensor fast_logits = forward_logits(fold_model(m), tokens);
  REQUIRE(tape_logits.shape == fast_logits.shape);
  CHECK(tape_logits.data == fast_logits.data);
}

TEST_CASE("causal masking: suffix cannot influence earlier logits") {
  TinyLM m = init_model(small_config(), 5);
  FoldedModel f = fold_model(m);
  std::vector<int> a = public_encode("shared prefix AAA");
  std::vector<int> b = public_encode("shared prefix ZZZ");
  Tensor la = forward_logits(f, a);
  Tensor lb = forward_logits(f, b);
  const std::size_t shared = public_encode("shared prefix ").size();
  const std::size_t v = m.config.vocab_size;
  for (std::size_t i = 0; i < shared; ++i)
    for (std::size_t j = 0; j < v; ++j)
      CHECK(la.at(i, j) == lb.at(i, j));
}

TEST_CASE("hidden state at position 0 depends only on the first token") {
  TinyLM m = init_model(small_config(), 5);
  Tensor h1 = hidden_state_at(m, public_encode("Q short"), 0);
  Tensor h2 = hidden_state_at(m, public_encode("Q completely different body"), 0);
  CHECK(h1.numel() == m.config.embed_dim);
  CHECK(h1.data == h2.data);
}

TEST_CASE("hidden_state_at rejects out-of-range positions") {
  TinyLM m = init_model(small_config(), 5);
  CHECK_THROWS_AS(hidden_state_at(m, public_encode("ab"), 2), std::out_of_range);
}

TEST_CASE("forward_logits edge cases") {
  TinyLM m = init_model(small_config(), 7);
  FoldedModel f = fold_model(m);
  CHECK(forward_logits(f, {}).numel() == 0);
  CHECK_THROWS_AS(forward_logits(f, {int(m.config.vocab_size)}), std::out_of_range);
  std::vector<int> too_long(m.config.context_len + 1, 1);
  CHECK_THROWS_AS(forward_logits(f, too_long), std::invalid_argument);
}

TEST_CASE("pretraining improves held-out loss and is deterministic") {
  ModelConfig cfg = small_config();
  auto corpus = toy_corpus(40, 11);
  PretrainReport r1, r2;
  TinyLM m1 = pretrain_base(cfg, corpus, 60, 21, {}, &r1);
  TinyLM m2 = pretrain_base(cfg, corpus, 60, 21, {}, &r2);
  CHECK(r1.final_holdout_nll < r1.initial_holdout_nll);
  for (const auto& [name, w] : m1.weights)
    CHECK(w.data == m2.weights.at(name).data);
  // held-out perplexity beats the uniform bound once anything is learned
  FoldedModel f = fold_model(m1);
  CHECK(perplexity(f, corpus) < double(cfg.vocab_size));
}

TEST_CASE("pretraining input validation") {
  ModelConfig cfg = small_config();
  CHECK_THROWS_AS(pretrain_base(cfg, {}, 10, 0), std::invalid_argument);
  CHECK_THROWS_AS(pretrain_base(cfg, toy_corpus(4, 1), 0, 0), std::invalid_argument);
}

TEST_CASE("perplexity of a uniform model equals vocab size") {
  // zero weights give constant logits at every position
  ModelConfig cfg = small_config();
  TinyLM m = init_model(cfg, 0);
  for (auto& [name, w] : m.weights)
    if (name != "pos_emb") w = Tensor::zeros(w.shape);
  FoldedModel f = fold_model(m);
  double ppl = perplexity(f, public_encode("any text at all"));
  CHECK(ppl == Catch::Approx(double(cfg.vocab_size)).epsilon(1e-12));
}

TEST_CASE("perplexity of a near-deterministic model approaches 1") {
  ModelConfig cfg = small_config();
  TinyLM m = init_model(cfg, 0);
  for (auto& [name, w] : m.weights)
    if (name != "pos_emb") w = Tensor::zeros(w.shape);
  // ln_f of a zero stream yields beta; point the head at token 'x'
  const int target = public_encode("x")[0];
  m.weights.at("ln_f.beta").data[0] = 1.0;
  m.weights.at("head").at(static_cast<std::size_t>(target), 0) = 5000.0;
  FoldedModel f = fold_model(m);
  std::vector<int> doc(6, target);
  CHECK(perplexity(f, doc) == Catch::Approx(1.0).margin(1e-9));
  // and greedy sampling reproduces the token it always predicts
  auto out = sample(f, {}, SampleParams{.temperature = 1e-12, .max_new = 4, .seed = 9});
  CHECK(out == std::vector<int>(4, target));
}

TEST_CASE("perplexity formula on hand-set probabilities") {
  // probabilities 0.5, 0.25, 0.125 per position
  std::vector<double> logprobs = {std::log(0.5), std::log(0.25), std::log(0.125)};
  CHECK(perplexity_from_logprobs(logprobs) == Catch::Approx(4.0).epsilon(1e-12));
  CHECK_THROWS_AS(perplexity_from_logprobs({}), std::invalid_argument);
}

TEST_CASE("duplicated documents do not change perplexity") {
  TinyLM m = init_model(small_config(), 13);
  FoldedModel f = fold_model(m);
  std::vector<int> doc = public_encode("repeatable text");
  double one = perplexity(f, std::vector<std::vector<int>>{doc});
  double two = perplexity(f, std::vector<std::vector<int>>{doc, doc});
  CHECK(std::abs(one - two) < 1e-9);
}

TEST_CASE("sampling is seed-deterministic and honors max_new") {
  TinyLM m = init_model(small_config(), 17);
  FoldedModel f = fold_model(m);
  std::vector<int> prompt = public_encode("go");
  auto a = sample(f, prompt, SampleParams{.temperature = 1.0, .max_new = 12, .seed = 4});
  auto b = sample(f, prompt, SampleParams{.temperature = 1.0, .max_new = 12, .seed = 4});
  CHECK(a == b);
  CHECK(sample(f, prompt, SampleParams{.max_new = 0, .seed = 4}).empty());
  CHECK_THROWS_AS(sample(f, prompt, SampleParams{.temperature = 0.0}),
                  std::invalid_argument);
}

TEST_CASE("checkpoint round-trips at f32 precision") {
  TinyLM m = init_model(small_config(), 19);
  Bytes bytes = model_to_bytes(m);
  TinyLM back = model_from_bytes(bytes);
  CHECK(back.config.vocab_size == m.config.vocab_size);
  CHECK(back.config.embed_dim == m.config.embed_dim);
  CHECK(back.config.n_layers == m.config.n_layers);
  CHECK(back.config.context_len == m.config.context_len);
  for (const auto& [name, w] : m.weights) {
    const Tensor& r = back.weights.at(name);
    REQUIRE(r.shape == w.shape);
    for (std::size_t i = 0; i < w.numel(); ++i)
      CHECK(r.data[i] == double(float(w.data[i])));
  }

  Bytes bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_WITH(model_from_bytes(bad),
                    Catch::Matchers::ContainsSubstring("bad magic"));
  Bytes truncated(bytes.begin(), bytes.begin() + bytes.size() / 2);
  CHECK_THROWS_WITH(model_from_bytes(truncated),
                    Catch::Matchers::ContainsSubstring("truncated"));
}

TEST_CASE("full model loss passes gradient checks") {
  // evaluated at a healthy weight scale; the 0.02 init leaves attention in
  // its flat regime where true q/k gradients sit below what any f64
  // difference quotient can resolve
  ModelConfig cfg;
  cfg.vocab_size = 104;
  cfg.embed_dim = 8;
  cfg.n_layers = 2;
  cfg.context_len = 16;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    TinyLM m = init_model(cfg, seed);
    Rng rng(derive_seed(seed, "gradcheck_scale"));
    for (auto& [name, w] : m.weights) {
      if (name == "pos_emb") continue;
      for (double& v : w.data) v = rng.uniform(-0.6, 0.6);
    }
    std::vector<int> doc = public_encode("abcab");
    std::vector<int> input, target;
    detail::shifted_pair(doc, cfg.context_len, input, target);
    LmGraphConfig gcfg;
    gcfg.train_base = true;
    LmGraph g = build_lm_graph(m, input, target, gcfg, seed);
    std::map<std::string, Tensor> params;
    for (const auto& [name, w] : m.weights)
      if (name != "pos_emb") params[name] = w;
    INFO("seed " << seed);
    CHECK(check_gradients(g.tape, params, g.loss, 1e-5) < 1e-5);
  }
}

TEST_CASE("adapter-only gradients pass checks through the full model") {
  ModelConfig cfg;
  cfg.vocab_size = 104;
  cfg.embed_dim = 8;
  cfg.n_layers = 2;
  cfg.context_len = 16;
  TinyLM m = init_model(cfg, 2);
  Rng rng(31);
  for (auto& [name, w] : m.weights) {
    if (name == "pos_emb") continue;
    for (double& v : w.data) v = rng.uniform(-0.5, 0.5);
  }
  LmGraphConfig gcfg;
  gcfg.training = true;
  for (const auto& pt : m.attachment_points())
    gcfg.adapters[pt.name] = AdapterGraphSpec{.rank = 2, .scale = 4.0, .dropout_p = 0.1};
  std::vector<int> doc = public_encode("xyzxy");
  std::vector<int> input, target;
  detail::shifted_pair(doc, cfg.context_len, input, target);
  LmGraph g = build_lm_graph(m, input, target, gcfg, 7);
  std::map<std::string, Tensor> params;
  for (const auto& pt : m.attachment_points()) {
    params["adapter." + pt.name + ".A"] = rand_uniform({2, cfg.embed_dim}, rng);
    params["adapter." + pt.name + ".B"] = rand_uniform({cfg.embed_dim, 2}, rng);
  }
  CHECK(check_gradients(g.tape, params, g.loss, 1e-5) < 1e-5);
}
