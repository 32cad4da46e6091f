#pragma once

// Federated protocol engine: AdamW inner loop on the client, size-weighted
// averaging with lookahead momentum on the server, round orchestration and
// byte-level communication accounting. The "network" is an in-process queue
// of serialized adapter checkpoints; only secure adapters may enter it.

#include <chrono>
#include <cstdint>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "securegate/lora.hpp"
#include "securegate/optim.hpp"
#include "securegate/privacy.hpp"
#include "securegate/threadpool.hpp"
#include "securegate/tinylm.hpp"

namespace securegate {

struct OptimizerConfig {
  double eta_local = 1e-4;
  double weight_decay = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t epochs = 3;  // K full passes per round
  std::size_t batch_size = 4;

  void validate() const {
    if (eta_local <= 0 || weight_decay < 0 || eps <= 0)
      throw std::invalid_argument("OptimizerConfig: rates must be positive");
    if (beta1 <= 0 || beta1 >= 1 || beta2 <= 0 || beta2 >= 1)
      throw std::invalid_argument("OptimizerConfig: betas must lie in (0,1)");
    if (epochs == 0 || batch_size == 0)
      throw std::invalid_argument("OptimizerConfig: epochs and batch_size must be >= 1");
  }
};

enum class DataView { kRaw, kMasked };

struct ClientState {
  int client_id = 0;
  ClientDataset dataset;
  LowRankAdapter secure_adapter;                  // last inner-loop output
  std::vector<LowRankAdapter> revealing_adapters; // never serialized for upload
};

struct TrainReport {
  std::size_t optimizer_steps = 0;
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

namespace detail_fed {

inline std::vector<std::vector<int>> view_tokens(const ClientDataset& ds,
                                                 DataView view,
                                                 std::size_t context_len) {
  const auto& docs = view == DataView::kRaw ? ds.raw_view : ds.masked_view;
  std::vector<std::vector<int>> out;
  for (const auto& doc : docs) {
    std::vector<int> ids = public_encode(doc.text);
    if (ids.empty()) continue;
    if (ids.size() > context_len) ids.resize(context_len);
    out.push_back(std::move(ids));
  }
  return out;
}

inline double adapter_eval_loss(const TinyLM& model, const LowRankAdapter& a,
                                const std::vector<std::vector<int>>& docs,
                                std::uint64_t* flops = nullptr) {
  auto deltas = dense_delta_of(a, flops);
  FoldedModel f = fold_model(model, &deltas);
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& doc : docs) {
    for (double v : sequence_nll(f, doc, nullptr, flops)) total += v;
    count += doc.size();
  }
  return total / static_cast<double>(count);
}

}  // namespace detail_fed

// K epochs of AdamW with decoupled weight decay on next-token cross-entropy.
// Optimizer moments start fresh for the call; the base model is untouched.
inline LowRankAdapter local_train(const TinyLM& model, const ClientDataset& data,
                                  const LowRankAdapter& start, DataView view,
                                  const OptimizerConfig& cfg, std::uint64_t seed,
                                  TrainReport* report = nullptr,
                                  std::uint64_t* flops = nullptr) {
  cfg.validate();
  auto docs = detail_fed::view_tokens(data, view, model.config.context_len);
  if (docs.empty())
    throw std::invalid_argument("local_train: the selected view is empty");

  LowRankAdapter adapter = start;
  const double initial =
      report ? detail_fed::adapter_eval_loss(model, adapter, docs) : 0.0;

  std::map<std::string, Tensor> params;
  for (const auto& [name, pt] : adapter.points) {
    params["adapter." + name + ".A"] = pt.A;
    params["adapter." + name + ".B"] = pt.B;
  }
  LmGraphConfig gcfg;
  gcfg.training = true;
  for (const auto& [name, pt] : adapter.points)
    gcfg.adapters[name] = AdapterGraphSpec{.rank = adapter.rank,
                                           .scale = adapter.scale(),
                                           .dropout_p = adapter.dropout_p};

  AdamW opt(AdamWParams{.lr = cfg.eta_local,
                        .beta1 = cfg.beta1,
                        .beta2 = cfg.beta2,
                        .eps = cfg.eps,
                        .weight_decay = cfg.weight_decay});
  Rng order_rng(derive_seed(seed, "local_train_order"));
  std::vector<std::size_t> order(docs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  std::size_t steps = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    order_rng.shuffle(order);
    for (std::size_t begin = 0; begin < docs.size(); begin += cfg.batch_size) {
      const std::size_t end = std::min(begin + cfg.batch_size, docs.size());
      std::map<std::string, Tensor> grad_sum;
      for (std::size_t i = begin; i < end; ++i) {
        const auto& doc = docs[order[i]];
        std::vector<int> input, target;
        detail::shifted_pair(doc, model.config.context_len, input, target);
        LmGraph g = build_lm_graph(model, input, target, gcfg,
                                   derive_seed(seed, "local_train_tape",
                                               epoch * docs.size() + i));
        g.tape.forward(params);
        auto grads = g.tape.backward(g.loss);
        if (flops) *flops += g.tape.flops();
        for (auto& [name, gt] : grads) {
          auto it = grad_sum.find(name);
          if (it == grad_sum.end())
            grad_sum[name] = gt;
          else
            for (std::size_t j = 0; j < gt.numel(); ++j)
              it->second.data[j] += gt.data[j];
        }
      }
      const double inv = 1.0 / static_cast<double>(end - begin);
      for (auto& [name, gt] : grad_sum)
        for (double& v : gt.data) v *= inv;
      opt.step(params, grad_sum);
      ++steps;
    }
  }
  for (auto& [name, pt] : adapter.points) {
    pt.A = params.at("adapter." + name + ".A");
    pt.B = params.at("adapter." + name + ".B");
  }
  if (report) {
    report->optimizer_steps = steps;
    report->initial_loss = initial;
    report->final_loss = detail_fed::adapter_eval_loss(model, adapter, docs);
  }
  return adapter;
}

// Size-weighted element-wise average of client updates, accumulated in
// client order.
inline LowRankAdapter weighted_average(const std::vector<LowRankAdapter>& updates,
                                       const std::vector<std::size_t>& sizes) {
  if (updates.empty() || updates.size() != sizes.size())
    throw std::invalid_argument("weighted_average: " +
                                std::to_string(updates.size()) + " updates vs " +
                                std::to_string(sizes.size()) + " sizes");
  double total = 0.0;
  for (std::size_t s : sizes) {
    if (s == 0) throw std::invalid_argument("weighted_average: zero dataset size");
    total += static_cast<double>(s);
  }
  LowRankAdapter avg = updates[0];
  avg.for_each_tensor([](Tensor& t) {
    for (double& v : t.data) v = 0.0;
  });
  for (std::size_t n = 0; n < updates.size(); ++n) {
    const double w = static_cast<double>(sizes[n]) / total;
    for (auto& [name, pt] : avg.points) {
      auto it = updates[n].points.find(name);
      if (it == updates[n].points.end() || !it->second.A.same_shape(pt.A) ||
          !it->second.B.same_shape(pt.B))
        throw std::invalid_argument("weighted_average: update " + std::to_string(n) +
                                    " does not match at point " + name);
      for (std::size_t j = 0; j < pt.A.numel(); ++j)
        pt.A.data[j] += w * it->second.A.data[j];
      for (std::size_t j = 0; j < pt.B.numel(); ++j)
        pt.B.data[j] += w * it->second.B.data[j];
    }
  }
  return avg;
}

struct ServerState {
  LowRankAdapter global;    // delta-w at round t
  LowRankAdapter momentum;  // delta-v, same shapes
  std::size_t round = 0;
  std::size_t total_rounds = 20;
  double m = 0.5;
  double eta_global = 0.01;

  void validate() const {
    if (m < 0.0 || m >= 1.0)
      throw std::invalid_argument("ServerState: m must be in [0,1)");
    if (eta_global <= 0.0)
      throw std::invalid_argument("ServerState: eta_global must be positive");
  }
};

inline ServerState make_server(const TinyLM& model, std::size_t rank, double m,
                               double eta_global, std::size_t total_rounds,
                               std::uint64_t seed, bool allow_custom_rank = false) {
  ServerState s;
  s.global = init_adapter(model, rank, Role::kGlobal, seed, allow_custom_rank);
  s.global.id = "server/global";
  s.momentum = s.global;
  s.momentum.for_each_tensor([](Tensor& t) {
    for (double& v : t.data) v = 0.0;
  });
  s.m = m;
  s.eta_global = eta_global;
  s.total_rounds = total_rounds;
  s.validate();
  return s;
}

// Lookahead momentum update, element-wise and exactly as written:
//   p      = w + m v
//   v_next = m v + eta (avg - p)
//   w_next = w + v_next
inline void momentum_step(ServerState& server, const LowRankAdapter& avg) {
  server.validate();
  for (auto& [name, wpt] : server.global.points) {
    AdapterPoint& vpt = server.momentum.points.at(name);
    auto it = avg.points.find(name);
    if (it == avg.points.end() || !it->second.A.same_shape(wpt.A) ||
        !it->second.B.same_shape(wpt.B))
      throw std::invalid_argument("momentum_step: average does not match point " + name);
    auto update = [&](Tensor& w, Tensor& v, const Tensor& a) {
      for (std::size_t j = 0; j < w.numel(); ++j) {
        const double p = w.data[j] + server.m * v.data[j];
        v.data[j] = server.m * v.data[j] + server.eta_global * (a.data[j] - p);
        w.data[j] += v.data[j];
      }
    };
    update(wpt.A, vpt.A, it->second.A);
    update(wpt.B, vpt.B, it->second.B);
  }
}

// ---------------------------------------------------------------------------
// transport

// Only secure (or the server's global) adapters may be serialized into an
// upload or broadcast message.
inline Bytes message_bytes(const LowRankAdapter& a) {
  if (a.role != Role::kSecure && a.role != Role::kGlobal)
    throw std::invalid_argument(std::string("message_bytes: refusing to place a ") +
                                role_name(a.role) + " adapter on the network");
  return adapter_to_bytes(a);
}

inline Bytes message_bytes(const DenseDelta&) = delete;  // deltas never travel

struct CommCost {
  std::size_t param_count = 0;
  std::size_t bytes = 0;
};

inline CommCost comm_cost(const LowRankAdapter& a) {
  CommCost c;
  c.param_count = a.param_count();
  c.bytes = c.param_count * 4;
  return c;
}

inline CommCost comm_cost(const DenseDelta& d) {
  CommCost c;
  for (const auto& [name, t] : d.deltas) c.param_count += t.numel();
  c.bytes = c.param_count * 4;
  return c;
}

// ---------------------------------------------------------------------------
// round orchestration

enum class Defense { kScrub, kDp, kScrubDp };

inline const char* defense_name(Defense d) {
  switch (d) {
    case Defense::kScrub: return "scrub";
    case Defense::kDp: return "dp";
    case Defense::kScrubDp: return "scrub+dp";
  }
  return "?";
}

struct DefenseConfig {
  Defense kind = Defense::kScrub;
  double dp_clip_norm = 1.0;
  double dp_sigma = 0.5;

  bool noise_enabled() const { return kind != Defense::kScrub; }
  // scrub and scrub+dp train on the masked view; the dp-only ablation keeps
  // raw text and relies on noise alone
  DataView train_view() const {
    return kind == Defense::kDp ? DataView::kRaw : DataView::kMasked;
  }
};

struct RoundLog {
  std::size_t round = 0;
  std::vector<double> client_losses;
  std::vector<std::size_t> message_bytes;  // per client upload, params x 4
  std::size_t broadcast_bytes = 0;
  double wall_time_ms = 0.0;
};

struct RoundResult {
  RoundLog log;
  std::vector<Bytes> uploads;  // wire bytes, for inspection
  Bytes broadcast;
};

// One communication round: broadcast the global adapter, train every client
// on its defended view, aggregate with momentum. Clients run concurrently up
// to `jobs`; aggregation is a sequential reduction in client_id order.
inline RoundResult run_round(const TinyLM& model, ServerState& server,
                             std::vector<ClientState>& clients,
                             const OptimizerConfig& cfg, const DefenseConfig& defense,
                             std::uint64_t seed, std::size_t jobs = 1,
                             std::uint64_t* flops = nullptr) {
  if (server.round >= server.total_rounds)
    throw std::logic_error("run_round: all " + std::to_string(server.total_rounds) +
                           " rounds already ran");
  if (clients.empty()) throw std::invalid_argument("run_round: no clients");
  const auto t0 = std::chrono::steady_clock::now();

  RoundResult res;
  res.broadcast = message_bytes(server.global);
  res.log.round = server.round;
  res.log.broadcast_bytes = comm_cost(server.global).bytes;

  const std::size_t n = clients.size();
  std::vector<LowRankAdapter> updates(n);   // as uploaded (post-defense)
  std::vector<LowRankAdapter> locals(n);    // client-kept inner-loop output
  std::vector<double> losses(n, 0.0);
  std::vector<std::uint64_t> flop_parts(n, 0);

  parallel_for(n, jobs, [&](std::size_t i) {
    ClientState& client = clients[i];
    LowRankAdapter start = adapter_from_bytes(res.broadcast);
    start.role = Role::kSecure;
    start.id = "client" + std::to_string(client.client_id) + "/secure";
    TrainReport report;
    LowRankAdapter trained = local_train(
        model, client.dataset, start, defense.train_view(), cfg,
        derive_seed(seed, "round_client", server.round,
                    static_cast<std::uint64_t>(client.client_id)),
        &report, &flop_parts[i]);
    losses[i] = report.final_loss;
    locals[i] = trained;
    if (defense.noise_enabled())
      trained = dp_noise(trained, defense.dp_clip_norm, defense.dp_sigma,
                         derive_seed(seed, "round_dp", server.round,
                                     static_cast<std::uint64_t>(client.client_id)));
    updates[i] = std::move(trained);
  });

  std::vector<LowRankAdapter> decoded;
  std::vector<std::size_t> sizes;
  for (std::size_t i = 0; i < n; ++i) {
    clients[i].secure_adapter = locals[i];
    Bytes wire = message_bytes(updates[i]);
    res.log.message_bytes.push_back(comm_cost(updates[i]).bytes);
    decoded.push_back(adapter_from_bytes(wire));
    res.uploads.push_back(std::move(wire));
    sizes.push_back(clients[i].dataset.masked_view.size());
    res.log.client_losses.push_back(losses[i]);
    if (flops) *flops += flop_parts[i];
  }
  LowRankAdapter avg = weighted_average(decoded, sizes);
  momentum_step(server, avg);
  ++server.round;

  res.log.wall_time_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
          .count();
  return res;
}

}  // namespace securegate
