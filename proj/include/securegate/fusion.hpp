#pragma once

// Dual personalized adapter fusion: scalar coefficients over adapters are
// found by derivative-free minimization of l1-regularized next-token
// cross-entropy on a small per-client query set. One coefficient per adapter,
// shared across all attachment points.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "securegate/fedcore.hpp"
#include "securegate/lora.hpp"
#include "securegate/nelder_mead.hpp"
#include "securegate/tinylm.hpp"

namespace securegate {

struct FusionConfig {
  double psi = 0.01;
  std::size_t query_set_size = 16;
  std::size_t budget = 200;  // max objective evaluations per optimization
  double coeff_lo = -1.5;
  double coeff_hi = 1.5;
  std::size_t random_restarts = 3;

  void validate() const {
    if (psi < 0.0) throw std::invalid_argument("FusionConfig: psi must be >= 0");
    if (budget < 10) throw std::invalid_argument("FusionConfig: budget must be >= 10");
    if (query_set_size == 0)
      throw std::invalid_argument("FusionConfig: query_set_size must be >= 1");
    if (coeff_lo >= coeff_hi)
      throw std::invalid_argument("FusionConfig: empty coefficient box");
  }
};

// Mean next-token cross-entropy of the fused model over the query docs plus
// psi * sum_i |coeff_i|.
inline double fusion_loss(const std::vector<double>& coeffs,
                          const std::vector<const LowRankAdapter*>& adapters,
                          const TinyLM& model,
                          const std::vector<std::vector<int>>& query_docs,
                          double psi, std::uint64_t* flops = nullptr) {
  if (query_docs.empty())
    throw std::invalid_argument("fusion_loss: empty query set");
  DenseDelta delta = fuse(adapters, coeffs, flops);
  FoldedModel f = fold_model(model, &delta.deltas);
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& doc : query_docs) {
    if (doc.empty()) continue;
    for (double nll : sequence_nll(f, doc, nullptr, flops)) total += nll;
    count += doc.size();
  }
  if (count == 0) throw std::invalid_argument("fusion_loss: query set has no tokens");
  double l1 = 0.0;
  for (double c : coeffs) l1 += std::abs(c);
  return total / static_cast<double>(count) + psi * l1;
}

struct FusionTrace {
  std::vector<double> evals;    // objective value of every evaluation, in order
  std::vector<double> coeffs;   // returned coefficient vector
  double start_loss = 0.0;
  double best_loss = 0.0;
  bool improved = false;  // false: nothing beat the uniform start point
};

// Minimizes fusion_loss over the coefficient box. Alongside the Nelder-Mead
// runs (uniform start plus random restarts), the single-adapter axis points
// are evaluated so the result is never worse than any one adapter alone.
inline std::vector<double> optimize_coeffs(
    const std::vector<const LowRankAdapter*>& adapters, const TinyLM& model,
    const std::vector<std::vector<int>>& query_docs, const FusionConfig& cfg,
    std::uint64_t seed, FusionTrace* trace_out = nullptr,
    std::uint64_t* flops = nullptr) {
  cfg.validate();
  if (adapters.size() < 2)
    throw std::invalid_argument("optimize_coeffs: need at least two adapters");
  const std::size_t dim = adapters.size();

  FusionTrace trace;
  std::vector<double> best_x(dim, 0.5);
  double best_f = HUGE_VAL;
  auto objective = [&](const std::vector<double>& x) {
    return fusion_loss(x, adapters, model, query_docs, cfg.psi, flops);
  };
  auto eval = [&](const std::vector<double>& x) {
    const double fx = objective(x);
    trace.evals.push_back(fx);
    if (fx < best_f) {
      best_f = fx;
      best_x = x;
    }
    return fx;
  };
  auto budget_left = [&] {
    return trace.evals.size() < cfg.budget ? cfg.budget - trace.evals.size() : 0;
  };

  const std::vector<double> start(dim, 0.5);
  trace.start_loss = eval(start);

  // single-adapter corners
  for (std::size_t i = 0; i < dim && budget_left() > 0; ++i) {
    std::vector<double> axis(dim, 0.0);
    axis[i] = 1.0;
    eval(axis);
  }

  Rng rng(derive_seed(seed, "fusion_restarts"));
  for (std::size_t restart = 0; restart <= cfg.random_restarts; ++restart) {
    if (budget_left() == 0) break;
    std::vector<double> x0(dim);
    if (restart == 0) {
      x0 = start;
    } else {
      for (double& v : x0) v = rng.uniform(cfg.coeff_lo, cfg.coeff_hi);
    }
    NmOptions opt;
    opt.max_evals = budget_left();
    opt.lo = cfg.coeff_lo;
    opt.hi = cfg.coeff_hi;
    NmResult r = nelder_mead(objective, x0, opt, &trace.evals);
    if (r.best_f < best_f) {
      best_f = r.best_f;
      best_x = r.best_x;
    }
  }
  if (budget_left() > 0) {
    // final polish from the incumbent with a small simplex
    NmOptions opt;
    opt.max_evals = budget_left();
    opt.init_step = 0.02;
    opt.lo = cfg.coeff_lo;
    opt.hi = cfg.coeff_hi;
    NmResult r = nelder_mead(objective, best_x, opt, &trace.evals);
    if (r.best_f < best_f) {
      best_f = r.best_f;
      best_x = r.best_x;
    }
  }

  trace.coeffs = best_x;
  trace.best_loss = best_f;
  trace.improved = best_f < trace.start_loss;
  if (!trace.improved) {
    trace.coeffs = start;
    best_x = start;
  }
  if (trace_out) *trace_out = trace;
  return best_x;
}

struct FusionReport {
  std::string kind;  // "secure" or "revealing"
  std::vector<double> coeffs;
  std::vector<double> objective_trace;
  double ppl_before = 0.0;  // global adapter alone on the query set
  double ppl_after = 0.0;   // fused result on the query set
  bool improved = false;
};

struct FusionOutput {
  DenseDelta delta;
  FusionReport report;
};

namespace detail_fusion {

inline std::vector<std::vector<int>> query_tokens(const std::vector<Document>& docs,
                                                  std::size_t limit,
                                                  std::size_t context_len) {
  std::vector<std::vector<int>> out;
  for (const auto& doc : docs) {
    if (out.size() == limit) break;
    std::vector<int> ids = public_encode(doc.text);
    if (ids.empty()) continue;
    if (ids.size() > context_len) ids.resize(context_len);
    out.push_back(std::move(ids));
  }
  if (out.empty())
    throw std::invalid_argument("fusion: query view is empty");
  return out;
}

inline FusionOutput build(const TinyLM& model, const LowRankAdapter& global,
                          const LowRankAdapter& local, const char* kind,
                          Role fused_role, bool local_only,
                          const std::vector<Document>& query_docs,
                          const FusionConfig& cfg, std::uint64_t seed,
                          std::uint64_t* flops) {
  auto docs = query_tokens(query_docs, cfg.query_set_size, model.config.context_len);
  std::vector<const LowRankAdapter*> adapters = {&global, &local};

  FusionTrace trace;
  std::vector<double> coeffs =
      optimize_coeffs(adapters, model, docs, cfg, seed, &trace, flops);

  FusionOutput out;
  out.delta = fuse(adapters, coeffs, flops);
  out.delta.role = fused_role;
  out.delta.local_only = local_only;
  out.delta.id = local.id + "/personalized";

  auto ppl_of = [&](const std::map<std::string, Tensor>& deltas) {
    FoldedModel f = fold_model(model, &deltas);
    return perplexity(f, docs, flops);
  };
  out.report.kind = kind;
  out.report.coeffs = coeffs;
  out.report.objective_trace = trace.evals;
  auto global_delta = dense_delta_of(global, flops);
  out.report.ppl_before = ppl_of(global_delta);
  out.report.ppl_after = ppl_of(out.delta.deltas);
  out.report.improved = trace.improved;
  return out;
}

}  // namespace detail_fusion

// Secure personalized adapter: fuse the final global adapter with the
// client's last local secure state; the query set comes from the masked view.
inline FusionOutput build_secure_personalized(const TinyLM& model,
                                              const LowRankAdapter& global,
                                              const LowRankAdapter& local_secure,
                                              const ClientDataset& data,
                                              const std::vector<Document>& query_masked,
                                              const FusionConfig& cfg,
                                              std::uint64_t seed,
                                              std::uint64_t* flops = nullptr) {
  (void)data;
  if (query_masked.empty())
    throw std::invalid_argument("build_secure_personalized: empty masked query set");
  return detail_fusion::build(model, global, local_secure, "secure",
                              Role::kFusedSecure, false, query_masked, cfg, seed,
                              flops);
}

// Revealing personalized adapter: fused against the raw-view query set and
// flagged local-only; it can never enter an upload message.
inline FusionOutput build_revealing_personalized(
    const TinyLM& model, const LowRankAdapter& global,
    const LowRankAdapter& local_revealing, const ClientDataset& data,
    const std::vector<Document>& query_raw, const FusionConfig& cfg,
    std::uint64_t seed, std::uint64_t* flops = nullptr) {
  (void)data;
  if (query_raw.empty())
    throw std::invalid_argument("build_revealing_personalized: empty raw query set");
  return detail_fusion::build(model, global, local_revealing, "revealing",
                              Role::kFusedRevealing, true, query_raw, cfg, seed,
                              flops);
}

}  // namespace securegate
