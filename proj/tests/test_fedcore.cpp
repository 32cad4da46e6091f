#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "securegate/fedcore.hpp"

using namespace securegate;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.vocab_size = 100;
  cfg.embed_dim = 16;
  cfg.n_layers = 1;
  cfg.context_len = 48;
  return cfg;
}

// bare single-point adapter for aggregation math tests
LowRankAdapter scalar_adapter(double a_val, double b_val) {
  LowRankAdapter ad;
  ad.rank = 1;
  ad.lora_alpha = 4.0;
  ad.points["p"] = AdapterPoint{Tensor({1, 1}, {a_val}), Tensor({1, 1}, {b_val})};
  return ad;
}

std::vector<ClientState> make_clients(const TinyLM& model, std::size_t n,
                                      std::size_t docs, std::uint64_t seed) {
  PiiDictionary dict = default_dictionary(50, seed);
  CorpusOptions opt;
  opt.sentences_per_doc = 1;
  auto datasets = generate_corpus(n, docs, dict, seed, opt);
  std::vector<ClientState> clients;
  for (std::size_t i = 0; i < n; ++i) {
    ClientState c;
    c.client_id = static_cast<int>(i);
    c.dataset = datasets[i];
    c.secure_adapter = init_adapter(model, 4, Role::kSecure, seed + i);
    c.revealing_adapters.push_back(init_adapter(model, 4, Role::kRevealing, seed + 50 + i));
    clients.push_back(std::move(c));
  }
  return clients;
}

OptimizerConfig fast_cfg() {
  OptimizerConfig cfg;
  cfg.eta_local = 1e-3;
  cfg.epochs = 2;
  cfg.batch_size = 4;
  return cfg;
}

}  // namespace

TEST_CASE("momentum step matches the worked scalar example") {
  ServerState s;
  s.global = scalar_adapter(1.0, 1.0);
  s.momentum = scalar_adapter(0.5, 0.5);
  s.m = 0.5;
  s.eta_global = 0.01;
  momentum_step(s, scalar_adapter(2.0, 2.0));
  CHECK(s.momentum.points.at("p").A.data[0] == Catch::Approx(0.2575).margin(1e-15));
  CHECK(s.global.points.at("p").A.data[0] == Catch::Approx(1.2575).margin(1e-15));
}

TEST_CASE("momentum degenerate cases") {
  // m=0, eta=1 collapses to full replacement
  ServerState s;
  s.global = scalar_adapter(1.7, -0.3);
  s.momentum = scalar_adapter(0.9, 0.9);
  s.m = 0.0;
  s.eta_global = 1.0;
  momentum_step(s, scalar_adapter(2.5, 0.25));
  CHECK(s.global.points.at("p").A.data[0] == Catch::Approx(2.5).margin(1e-12));
  CHECK(s.global.points.at("p").B.data[0] == Catch::Approx(0.25).margin(1e-12));

  // avg equal to the lookahead point leaves pure decay
  ServerState d;
  d.global = scalar_adapter(1.0, 1.0);
  d.momentum = scalar_adapter(0.4, 0.4);
  d.m = 0.5;
  d.eta_global = 0.01;
  const double p = 1.0 + 0.5 * 0.4;
  momentum_step(d, scalar_adapter(p, p));
  CHECK(d.momentum.points.at("p").A.data[0] == Catch::Approx(0.2).margin(1e-15));
}

TEST_CASE("momentum step agrees with a scalar reference on random tuples") {
  Rng rng(123);
  for (int i = 0; i < 1000; ++i) {
    const double w = rng.uniform(-2, 2), v = rng.uniform(-2, 2);
    const double m = rng.uniform(0, 0.99), eta = rng.uniform(0.001, 1.5);
    const double avg = rng.uniform(-2, 2);
    // independent scalar route
    const double p_ref = w + m * v;
    const double v_ref = m * v + eta * (avg - p_ref);
    const double w_ref = w + v_ref;

    ServerState s;
    s.global = scalar_adapter(w, w);
    s.momentum = scalar_adapter(v, v);
    s.m = m;
    s.eta_global = eta;
    momentum_step(s, scalar_adapter(avg, avg));
    CHECK(std::abs(s.global.points.at("p").A.data[0] - w_ref) < 1e-12);
    CHECK(std::abs(s.momentum.points.at("p").A.data[0] - v_ref) < 1e-12);
  }
}

TEST_CASE("weighted average") {
  LowRankAdapter a = scalar_adapter(2.0, 2.0);
  LowRankAdapter b = scalar_adapter(6.0, 6.0);

  // sizes (1, 3): 0.25*2 + 0.75*6 = 5.0
  LowRankAdapter w = weighted_average({a, b}, {1, 3});
  CHECK(w.points.at("p").A.data[0] == Catch::Approx(5.0).margin(1e-15));

  // equal sizes reduce to the arithmetic mean
  LowRankAdapter m = weighted_average({a, b}, {7, 7});
  CHECK(m.points.at("p").A.data[0] == Catch::Approx(4.0).margin(1e-15));

  // single client is the identity
  LowRankAdapter s = weighted_average({a}, {5});
  CHECK(s.points.at("p").A.data[0] == 2.0);

  CHECK_THROWS_AS(weighted_average({a, b}, {1}), std::invalid_argument);
  CHECK_THROWS_AS(weighted_average({}, {}), std::invalid_argument);
}

TEST_CASE("adamw single step against hand-computed values") {
  // two parameters, one step: w -= lr * mhat / (sqrt(vhat) + eps)
  AdamWParams p;
  p.lr = 0.1;
  p.beta1 = 0.9;
  p.beta2 = 0.999;
  p.eps = 1e-8;
  p.weight_decay = 0.0;
  AdamW opt(p);
  std::map<std::string, Tensor> params{{"w", Tensor({2}, {1.0, -2.0})}};
  std::map<std::string, Tensor> grads{{"w", Tensor({2}, {0.5, -0.25})}};
  opt.step(params, grads);
  for (std::size_t i = 0; i < 2; ++i) {
    const double g = grads.at("w").data[i];
    const double mhat = (0.1 * g) / (1 - 0.9);
    const double vhat = (0.001 * g * g) / (1 - 0.999);
    const double expect = (i == 0 ? 1.0 : -2.0) - 0.1 * mhat / (std::sqrt(vhat) + 1e-8);
    CHECK(params.at("w").data[i] == Catch::Approx(expect).margin(1e-15));
  }

  // decoupled decay subtracts lr * wd * w on top
  AdamW opt2(AdamWParams{.lr = 0.1, .weight_decay = 0.01});
  std::map<std::string, Tensor> params2{{"w", Tensor({1}, {2.0})}};
  std::map<std::string, Tensor> grads2{{"w", Tensor({1}, {0.5})}};
  opt2.step(params2, grads2);
  const double no_decay = 2.0 - 0.1 * (0.5 / (std::sqrt(0.25) + 1e-8));
  CHECK(params2.at("w").data[0] ==
        Catch::Approx(no_decay - 0.1 * 0.01 * 2.0).margin(1e-12));
}

TEST_CASE("local training counts steps and descends") {
  TinyLM model = init_model(tiny_config(), 1);
  auto clients = make_clients(model, 1, 10, 5);
  OptimizerConfig cfg = fast_cfg();
  TrainReport report;
  LowRankAdapter out = local_train(model, clients[0].dataset,
                                   clients[0].secure_adapter, DataView::kMasked,
                                   cfg, 9, &report);
  // 2 epochs x ceil(10/4) batches
  CHECK(report.optimizer_steps == 2 * 3);
  CHECK(report.final_loss < report.initial_loss);

  LowRankAdapter again = local_train(model, clients[0].dataset,
                                     clients[0].secure_adapter, DataView::kMasked,
                                     cfg, 9);
  for (const auto& [name, pt] : out.points)
    CHECK(pt.B.data == again.points.at(name).B.data);

  ClientDataset empty;
  CHECK_THROWS_AS(local_train(model, empty, clients[0].secure_adapter,
                              DataView::kMasked, cfg, 1),
                  std::invalid_argument);
}

TEST_CASE("network refuses revealing and fused payloads") {
  TinyLM model = init_model(tiny_config(), 1);
  LowRankAdapter rev = init_adapter(model, 4, Role::kRevealing, 2);
  CHECK_THROWS_WITH(message_bytes(rev),
                    Catch::Matchers::ContainsSubstring("revealing"));
  LowRankAdapter sec = init_adapter(model, 4, Role::kSecure, 2);
  CHECK_NOTHROW(message_bytes(sec));
}

TEST_CASE("comm cost counts trainable parameters") {
  ModelConfig cfg;
  cfg.vocab_size = 160;
  cfg.embed_dim = 64;
  cfg.n_layers = 2;
  cfg.context_len = 64;
  TinyLM model = init_model(cfg, 1);
  LowRankAdapter a8 = init_adapter(model, 8, Role::kSecure, 1);
  CommCost c8 = comm_cost(a8);
  // 4 points x (8*64 + 64*8)
  CHECK(c8.param_count == 4096);
  CHECK(c8.bytes == 4096 * 4);
  LowRankAdapter a16 = init_adapter(model, 16, Role::kSecure, 1);
  CHECK(comm_cost(a16).param_count == 2 * c8.param_count);

  // a dense delta costs the full d*k per point
  DenseDelta d = fuse({&a8}, {1.0});
  CHECK(comm_cost(d).param_count == 4 * 64 * 64);
}

TEST_CASE("one round with one client and m=0, eta=1 adopts the client update") {
  TinyLM model = init_model(tiny_config(), 1);
  auto clients = make_clients(model, 1, 8, 3);
  ServerState server = make_server(model, 4, 0.0, 1.0, 4, 17);
  OptimizerConfig cfg = fast_cfg();

  RoundResult res = run_round(model, server, clients, cfg, DefenseConfig{}, 77);
  // the new global equals the f32 round-trip of the client's trained adapter
  LowRankAdapter expect = adapter_from_bytes(adapter_to_bytes(clients[0].secure_adapter));
  for (const auto& [name, pt] : server.global.points) {
    const auto& e = expect.points.at(name);
    for (std::size_t j = 0; j < pt.A.numel(); ++j)
      CHECK(std::abs(pt.A.data[j] - e.A.data[j]) < 1e-12);
    for (std::size_t j = 0; j < pt.B.numel(); ++j)
      CHECK(std::abs(pt.B.data[j] - e.B.data[j]) < 1e-12);
  }
  REQUIRE(res.log.message_bytes.size() == 1);
  CHECK(res.log.message_bytes[0] == comm_cost(clients[0].secure_adapter).bytes);
  CHECK(res.log.round == 0);
  CHECK(server.round == 1);
}

TEST_CASE("rounds are deterministic and leave revealing adapters untouched") {
  TinyLM model = init_model(tiny_config(), 1);
  OptimizerConfig cfg = fast_cfg();

  auto run_two = [&](std::size_t jobs) {
    auto clients = make_clients(model, 3, 6, 3);
    ServerState server = make_server(model, 4, 0.5, 0.01, 4, 17);
    Bytes rev_before = adapter_to_bytes(clients[1].revealing_adapters[0]);
    run_round(model, server, clients, cfg, DefenseConfig{}, 5, jobs);
    run_round(model, server, clients, cfg, DefenseConfig{}, 5, jobs);
    CHECK(adapter_to_bytes(clients[1].revealing_adapters[0]) == rev_before);
    return adapter_to_bytes(server.global);
  };
  Bytes serial = run_two(1);
  Bytes parallel = run_two(3);
  CHECK(serial == parallel);
}

TEST_CASE("five rounds with m=0, eta=1 reproduce plain weighted FedAvg") {
  TinyLM model = init_model(tiny_config(), 1);
  auto clients = make_clients(model, 3, 6, 3);
  OptimizerConfig cfg = fast_cfg();
  cfg.epochs = 1;
  const std::uint64_t seed = 31;

  // oracle: replay each round's local training from the broadcast state and
  // average by hand
  auto oracle_clients = clients;
  ServerState server = make_server(model, 4, 0.0, 1.0, 5, 17);
  LowRankAdapter oracle_global = server.global;

  for (std::size_t round = 0; round < 5; ++round) {
    std::vector<LowRankAdapter> updates;
    std::vector<std::size_t> sizes;
    // the oracle consumes the same broadcast wire bytes the clients saw; the
    // f32 transport would otherwise amplify the w + (avg - w) rounding dust
    // across rounds
    Bytes broadcast = adapter_to_bytes(server.global);
    for (auto& c : oracle_clients) {
      LowRankAdapter start = adapter_from_bytes(broadcast);
      start.role = Role::kSecure;
      start.id = "client" + std::to_string(c.client_id) + "/secure";
      LowRankAdapter trained = local_train(
          model, c.dataset, start, DataView::kMasked, cfg,
          derive_seed(seed, "round_client", round,
                      static_cast<std::uint64_t>(c.client_id)));
      updates.push_back(adapter_from_bytes(adapter_to_bytes(trained)));
      sizes.push_back(c.dataset.masked_view.size());
    }
    double total = 0.0;
    for (std::size_t s : sizes) total += double(s);
    LowRankAdapter avg = updates[0];
    avg.for_each_tensor([](Tensor& t) {
      for (double& v : t.data) v = 0.0;
    });
    for (std::size_t n = 0; n < updates.size(); ++n)
      for (auto& [name, pt] : avg.points) {
        const auto& u = updates[n].points.at(name);
        const double w = double(sizes[n]) / total;
        for (std::size_t j = 0; j < pt.A.numel(); ++j) pt.A.data[j] += w * u.A.data[j];
        for (std::size_t j = 0; j < pt.B.numel(); ++j) pt.B.data[j] += w * u.B.data[j];
      }
    oracle_global = avg;
    oracle_global.role = Role::kGlobal;
    oracle_global.id = "server/global";

    run_round(model, server, clients, cfg, DefenseConfig{}, seed);
    for (const auto& [name, pt] : server.global.points) {
      const auto& o = oracle_global.points.at(name);
      for (std::size_t j = 0; j < pt.A.numel(); ++j)
        CHECK(std::abs(pt.A.data[j] - o.A.data[j]) < 1e-12);
      for (std::size_t j = 0; j < pt.B.numel(); ++j)
        CHECK(std::abs(pt.B.data[j] - o.B.data[j]) < 1e-12);
    }
  }
}

TEST_CASE("dp defense perturbs uploads but not the client copy") {
  TinyLM model = init_model(tiny_config(), 1);
  auto clients = make_clients(model, 2, 6, 3);
  ServerState server = make_server(model, 4, 0.5, 0.01, 4, 17);
  DefenseConfig defense;
  defense.kind = Defense::kScrubDp;
  defense.dp_sigma = 0.3;
  RoundResult res = run_round(model, server, clients, fast_cfg(), defense, 5);
  // uploaded bytes differ from the client's local state under noise
  CHECK(res.uploads[0] != adapter_to_bytes(clients[0].secure_adapter));
}

TEST_CASE("uploads carry no raw-view text and no revealing tensor bytes") {
  TinyLM model = init_model(tiny_config(), 1);
  auto clients = make_clients(model, 2, 6, 3);
  Rng rng(9);
  for (auto& c : clients)
    c.revealing_adapters[0].for_each_tensor([&](Tensor& t) {
      for (double& v : t.data) v = rng.uniform(-0.4, 0.4);
    });
  ServerState server = make_server(model, 4, 0.5, 0.01, 4, 17);
  RoundResult res = run_round(model, server, clients, fast_cfg(), DefenseConfig{}, 5);
  for (const auto& msg : res.uploads) {
    for (const auto& c : clients) {
      for (const auto& [cls, values] : c.dataset.planted_values())
        for (const auto& v : values) CHECK(!contains_bytes(msg, to_bytes(v)));
      c.revealing_adapters[0].for_each_tensor([&](const Tensor& t) {
        ByteWriter w;
        w.tensor_f32(t);
        CHECK(!contains_bytes(msg, w.bytes()));
      });
    }
  }
}

TEST_CASE("round guard rails") {
  TinyLM model = init_model(tiny_config(), 1);
  auto clients = make_clients(model, 1, 4, 3);
  ServerState server = make_server(model, 4, 0.0, 1.0, 1, 17);
  run_round(model, server, clients, fast_cfg(), DefenseConfig{}, 5);
  CHECK_THROWS_AS(run_round(model, server, clients, fast_cfg(), DefenseConfig{}, 5),
                  std::logic_error);
}
