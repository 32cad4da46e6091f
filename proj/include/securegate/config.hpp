#pragma once

// Experiment configuration: one JSON file with sections mirroring the module
// layout. Validation collects every problem instead of stopping at the first,
// and unknown keys are rejected so typos cannot silently fall back to
// defaults. Scalar fields may be overridden by SECUREGATE_* environment
// variables and --set flags; precedence is flag > environment > file.

#include <cstdint>
#include <cstdlib>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "securegate/attacks.hpp"
#include "securegate/fedcore.hpp"
#include "securegate/fusion.hpp"
#include "securegate/gating.hpp"
#include "securegate/tinylm.hpp"

namespace securegate {

struct CorpusConfig {
  std::size_t docs_per_client = 50;
  std::size_t sentences_per_doc = 2;
  std::size_t values_per_class_per_client = 4;
  std::size_t dictionary_entries_per_class = 520;
  std::size_t query_docs = 16;  // held out per client for fusion
  std::size_t eval_docs = 16;   // held out per client for perplexity
};

struct PretrainConfig {
  std::size_t docs = 200;
  std::size_t steps = 400;
  std::size_t batch_size = 8;
  double lr = 1e-3;
};

struct FederationConfig {
  std::size_t n_clients = 10;
  std::size_t rounds = 20;
  double m = 0.5;
  double eta_global = 0.01;
};

struct InitConfig {
  // the revealing adapters are fit hard to their raw views at initialization,
  // which is what gives the authorized path something to disclose
  std::size_t revealing_epochs = 30;
  double revealing_lr = 3e-3;
  std::size_t n_revealing_adapters = 1;
};

struct LoraConfig {
  std::size_t rank = 8;
  std::optional<double> alpha;  // defaults to 4 * rank
  double dropout = 0.1;
  bool allow_custom_rank = false;
};

struct PrivacyConfig {
  std::string defense = "scrub";  // scrub | dp | scrub+dp
  double dp_clip_norm = 1.0;
  double dp_sigma = 0.5;
};

struct GatingConfig {
  double tau = 0.5;
  std::size_t hidden = 128;
  std::size_t n_per_class = 120;
  std::size_t train_steps = 80;
  double lr = 0.02;
  std::map<std::string, std::string> secrets;  // key_id -> secret; else derived
};

struct AttackSection {
  std::size_t candidate_pool_c = 50;
  std::size_t n_contexts = 100;
  std::size_t extraction_samples = 24;
  std::size_t extraction_max_new = 48;
  double extraction_temperature = 1.0;
};

struct ExperimentConfig {
  std::uint64_t seed = 42;
  std::size_t jobs = 0;  // 0: hardware concurrency
  ModelConfig model;
  CorpusConfig corpus;
  PretrainConfig pretrain;
  FederationConfig federation;
  OptimizerConfig optimizer;
  InitConfig init;
  LoraConfig lora;
  PrivacyConfig privacy;
  FusionConfig fusion;
  GatingConfig gating;
  AttackSection attacks;

  double lora_alpha() const {
    return alpha_or_default(lora.alpha, lora.rank);
  }
  static double alpha_or_default(std::optional<double> a, std::size_t r) {
    return a.has_value() ? *a : 4.0 * static_cast<double>(r);
  }

  Defense defense_kind() const {
    if (privacy.defense == "scrub") return Defense::kScrub;
    if (privacy.defense == "dp") return Defense::kDp;
    if (privacy.defense == "scrub+dp") return Defense::kScrubDp;
    throw std::invalid_argument("unknown defense '" + privacy.defense + "'");
  }
};

// ---------------------------------------------------------------------------
// parsing

namespace detail_cfg {

class Parser {
 public:
  Parser(const nlohmann::json& j, std::vector<std::string>& errors)
      : errors_(errors) {
    flatten(j, "");
  }

  template <typename T>
  void read(const std::string& path, T& out) {
    auto it = values_.find(path);
    if (it == values_.end()) return;
    consumed_.insert(path);
    try {
      from_value(it->second, out);
    } catch (const std::exception& e) {
      errors_.push_back(path + ": " + e.what());
    }
  }

  void read_string_map(const std::string& prefix,
                       std::map<std::string, std::string>& out) {
    for (const auto& [path, value] : values_) {
      if (path.compare(0, prefix.size() + 1, prefix + ".") != 0) continue;
      consumed_.insert(path);
      if (!value.is_string()) {
        errors_.push_back(path + ": expected a string");
        continue;
      }
      out[path.substr(prefix.size() + 1)] = value.get<std::string>();
    }
  }

  void finish() {
    for (const auto& [path, value] : values_)
      if (!consumed_.count(path)) errors_.push_back(path + ": unknown key");
  }

 private:
  static void from_value(const nlohmann::json& v, double& out) {
    if (!v.is_number()) throw std::invalid_argument("expected a number");
    out = v.get<double>();
  }
  static void from_value(const nlohmann::json& v, std::size_t& out) {
    if (!v.is_number_integer() || v.get<long long>() < 0)
      throw std::invalid_argument("expected a non-negative integer");
    out = v.get<std::size_t>();
  }
  static void from_value(const nlohmann::json& v, std::uint64_t& out) {
    if (!v.is_number_unsigned() && !v.is_number_integer())
      throw std::invalid_argument("expected an integer");
    out = v.get<std::uint64_t>();
  }
  static void from_value(const nlohmann::json& v, bool& out) {
    if (!v.is_boolean()) throw std::invalid_argument("expected a boolean");
    out = v.get<bool>();
  }
  static void from_value(const nlohmann::json& v, std::string& out) {
    if (!v.is_string()) throw std::invalid_argument("expected a string");
    out = v.get<std::string>();
  }
  static void from_value(const nlohmann::json& v, std::optional<double>& out) {
    if (v.is_null()) {
      out.reset();
      return;
    }
    double d;
    from_value(v, d);
    out = d;
  }

  void flatten(const nlohmann::json& j, const std::string& prefix) {
    if (!j.is_object()) {
      values_[prefix] = j;
      return;
    }
    for (const auto& [key, value] : j.items()) {
      const std::string path = prefix.empty() ? key : prefix + "." + key;
      if (value.is_object() && path != "gating.secrets")
        flatten(value, path);
      else if (path == "gating.secrets")
        for (const auto& [k2, v2] : value.items()) values_[path + "." + k2] = v2;
      else
        values_[path] = value;
    }
  }

  std::map<std::string, nlohmann::json> values_;
  std::set<std::string> consumed_;
  std::vector<std::string>& errors_;
};

}  // namespace detail_cfg

// Applies one dotted-path override with a JSON-parsed scalar value.
inline void apply_override(nlohmann::json& j, const std::string& path,
                           const std::string& raw) {
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(raw);
  } catch (...) {
    value = raw;  // bare strings stay strings
  }
  nlohmann::json* node = &j;
  std::size_t start = 0;
  for (;;) {
    std::size_t dot = path.find('.', start);
    const std::string key = path.substr(start, dot - start);
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    node = &(*node)[key];
    start = dot + 1;
  }
}

// Environment overrides: SECUREGATE_GATING_TAU=0.6 maps to gating.tau.
inline void apply_env_overrides(nlohmann::json& j, char** envp = nullptr) {
  extern char** environ;
  char** env = envp ? envp : environ;
  const std::string prefix = "SECUREGATE_";
  for (char** e = env; *e; ++e) {
    std::string entry(*e);
    if (entry.compare(0, prefix.size(), prefix) != 0) continue;
    const std::size_t eq = entry.find('=');
    if (eq == std::string::npos) continue;
    std::string path = entry.substr(prefix.size(), eq - prefix.size());
    for (char& c : path) c = c == '_' ? '.' : static_cast<char>(std::tolower(c));
    apply_override(j, path, entry.substr(eq + 1));
  }
}

struct ConfigResult {
  std::optional<ExperimentConfig> config;
  std::vector<std::string> errors;
};

// Parses and validates; every violated constraint lands in `errors`.
inline ConfigResult parse_config(const nlohmann::json& j) {
  ConfigResult res;
  std::vector<std::string>& errors = res.errors;
  ExperimentConfig c;
  detail_cfg::Parser p(j, errors);

  p.read("seed", c.seed);
  p.read("jobs", c.jobs);
  p.read("model.vocab_size", c.model.vocab_size);
  p.read("model.embed_dim", c.model.embed_dim);
  p.read("model.n_layers", c.model.n_layers);
  p.read("model.context_len", c.model.context_len);
  p.read("model.n_heads", c.model.n_heads);
  p.read("corpus.docs_per_client", c.corpus.docs_per_client);
  p.read("corpus.sentences_per_doc", c.corpus.sentences_per_doc);
  p.read("corpus.values_per_class_per_client", c.corpus.values_per_class_per_client);
  p.read("corpus.dictionary_entries_per_class", c.corpus.dictionary_entries_per_class);
  p.read("corpus.query_docs", c.corpus.query_docs);
  p.read("corpus.eval_docs", c.corpus.eval_docs);
  p.read("pretrain.docs", c.pretrain.docs);
  p.read("pretrain.steps", c.pretrain.steps);
  p.read("pretrain.batch_size", c.pretrain.batch_size);
  p.read("pretrain.lr", c.pretrain.lr);
  p.read("federation.n_clients", c.federation.n_clients);
  p.read("federation.rounds", c.federation.rounds);
  p.read("federation.m", c.federation.m);
  p.read("federation.eta_global", c.federation.eta_global);
  p.read("optimizer.eta_local", c.optimizer.eta_local);
  p.read("optimizer.weight_decay", c.optimizer.weight_decay);
  p.read("optimizer.beta1", c.optimizer.beta1);
  p.read("optimizer.beta2", c.optimizer.beta2);
  p.read("optimizer.eps", c.optimizer.eps);
  p.read("optimizer.epochs", c.optimizer.epochs);
  p.read("optimizer.batch_size", c.optimizer.batch_size);
  p.read("init.revealing_epochs", c.init.revealing_epochs);
  p.read("init.revealing_lr", c.init.revealing_lr);
  p.read("init.n_revealing_adapters", c.init.n_revealing_adapters);
  p.read("lora.rank", c.lora.rank);
  p.read("lora.alpha", c.lora.alpha);
  p.read("lora.dropout", c.lora.dropout);
  p.read("lora.allow_custom_rank", c.lora.allow_custom_rank);
  p.read("privacy.defense", c.privacy.defense);
  p.read("privacy.dp_clip_norm", c.privacy.dp_clip_norm);
  p.read("privacy.dp_sigma", c.privacy.dp_sigma);
  p.read("fusion.psi", c.fusion.psi);
  p.read("fusion.query_set_size", c.fusion.query_set_size);
  p.read("fusion.budget", c.fusion.budget);
  p.read("fusion.coeff_lo", c.fusion.coeff_lo);
  p.read("fusion.coeff_hi", c.fusion.coeff_hi);
  p.read("fusion.random_restarts", c.fusion.random_restarts);
  p.read("gating.tau", c.gating.tau);
  p.read("gating.hidden", c.gating.hidden);
  p.read("gating.n_per_class", c.gating.n_per_class);
  p.read("gating.train_steps", c.gating.train_steps);
  p.read("gating.lr", c.gating.lr);
  p.read_string_map("gating.secrets", c.gating.secrets);
  p.read("attacks.candidate_pool_c", c.attacks.candidate_pool_c);
  p.read("attacks.n_contexts", c.attacks.n_contexts);
  p.read("attacks.extraction_samples", c.attacks.extraction_samples);
  p.read("attacks.extraction_max_new", c.attacks.extraction_max_new);
  p.read("attacks.extraction_temperature", c.attacks.extraction_temperature);
  p.finish();

  auto check = [&](bool ok, const std::string& msg) {
    if (!ok) errors.push_back(msg);
  };
  try {
    c.model.validate();
  } catch (const std::exception& e) {
    errors.push_back(std::string("model: ") + e.what());
  }
  try {
    c.optimizer.validate();
  } catch (const std::exception& e) {
    errors.push_back(std::string("optimizer: ") + e.what());
  }
  try {
    c.fusion.validate();
  } catch (const std::exception& e) {
    errors.push_back(std::string("fusion: ") + e.what());
  }
  check(c.federation.n_clients >= 1, "federation.n_clients must be >= 1");
  check(c.federation.rounds >= 1, "federation.rounds must be >= 1");
  check(c.federation.m >= 0.0 && c.federation.m < 1.0,
        "federation.m must be in [0,1)");
  check(c.federation.eta_global > 0.0, "federation.eta_global must be positive");
  check(c.lora.allow_custom_rank || default_ranks().count(c.lora.rank) > 0,
        "lora.rank " + std::to_string(c.lora.rank) +
            " outside the default set {4,8,12,16}; set lora.allow_custom_rank");
  check(c.lora.rank >= 1 && c.lora.rank <= std::min(c.model.embed_dim, c.model.embed_dim),
        "lora.rank must be in [1, embed_dim]");
  check(c.lora.dropout >= 0.0 && c.lora.dropout < 1.0,
        "lora.dropout must be in [0,1)");
  check(c.privacy.defense == "scrub" || c.privacy.defense == "dp" ||
            c.privacy.defense == "scrub+dp",
        "privacy.defense must be one of scrub, dp, scrub+dp");
  check(c.privacy.dp_clip_norm > 0.0, "privacy.dp_clip_norm must be positive");
  check(c.privacy.dp_sigma >= 0.0, "privacy.dp_sigma must be >= 0");
  check(c.gating.tau >= 0.0 && c.gating.tau < 1.0, "gating.tau must be in [0,1)");
  check(c.gating.hidden >= 1, "gating.hidden must be >= 1");
  check(c.gating.lr > 0.0, "gating.lr must be positive");
  check(c.gating.n_per_class >= 1, "gating.n_per_class must be >= 1");
  check(c.corpus.docs_per_client >= 1, "corpus.docs_per_client must be >= 1");
  check(c.corpus.sentences_per_doc >= 1, "corpus.sentences_per_doc must be >= 1");
  check(c.corpus.dictionary_entries_per_class >= c.attacks.candidate_pool_c,
        "corpus.dictionary_entries_per_class must cover attacks.candidate_pool_c");
  check(c.pretrain.steps >= 1, "pretrain.steps must be >= 1");
  check(c.pretrain.docs >= 2, "pretrain.docs must be >= 2");
  check(c.init.revealing_epochs >= 1, "init.revealing_epochs must be >= 1");
  check(c.init.revealing_lr > 0.0, "init.revealing_lr must be positive");
  check(c.init.n_revealing_adapters >= 1, "init.n_revealing_adapters must be >= 1");
  check(c.attacks.candidate_pool_c >= 1, "attacks.candidate_pool_c must be >= 1");
  check(c.attacks.n_contexts >= 1, "attacks.n_contexts must be >= 1");
  check(c.attacks.extraction_samples >= 1, "attacks.extraction_samples must be >= 1");
  check(c.attacks.extraction_temperature > 0.0,
        "attacks.extraction_temperature must be positive");
  const std::size_t key_slots = c.model.vocab_size > std::size_t(tok::kFirstKeySlot)
                                    ? c.model.vocab_size - tok::kFirstKeySlot
                                    : 0;
  check(c.init.n_revealing_adapters <= key_slots,
        "init.n_revealing_adapters exceeds available key token slots");

  if (errors.empty()) res.config = std::move(c);
  return res;
}

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["seed"] = c.seed;
  j["jobs"] = c.jobs;
  j["model"] = {{"vocab_size", c.model.vocab_size},
                {"embed_dim", c.model.embed_dim},
                {"n_layers", c.model.n_layers},
                {"context_len", c.model.context_len},
                {"n_heads", c.model.n_heads}};
  j["corpus"] = {{"docs_per_client", c.corpus.docs_per_client},
                 {"sentences_per_doc", c.corpus.sentences_per_doc},
                 {"values_per_class_per_client", c.corpus.values_per_class_per_client},
                 {"dictionary_entries_per_class", c.corpus.dictionary_entries_per_class},
                 {"query_docs", c.corpus.query_docs},
                 {"eval_docs", c.corpus.eval_docs}};
  j["pretrain"] = {{"docs", c.pretrain.docs},
                   {"steps", c.pretrain.steps},
                   {"batch_size", c.pretrain.batch_size},
                   {"lr", c.pretrain.lr}};
  j["federation"] = {{"n_clients", c.federation.n_clients},
                     {"rounds", c.federation.rounds},
                     {"m", c.federation.m},
                     {"eta_global", c.federation.eta_global}};
  j["optimizer"] = {{"eta_local", c.optimizer.eta_local},
                    {"weight_decay", c.optimizer.weight_decay},
                    {"beta1", c.optimizer.beta1},
                    {"beta2", c.optimizer.beta2},
                    {"eps", c.optimizer.eps},
                    {"epochs", c.optimizer.epochs},
                    {"batch_size", c.optimizer.batch_size}};
  j["init"] = {{"revealing_epochs", c.init.revealing_epochs},
               {"revealing_lr", c.init.revealing_lr},
               {"n_revealing_adapters", c.init.n_revealing_adapters}};
  j["lora"] = {{"rank", c.lora.rank},
               {"alpha", c.lora.alpha.has_value() ? nlohmann::json(*c.lora.alpha)
                                                  : nlohmann::json(nullptr)},
               {"dropout", c.lora.dropout},
               {"allow_custom_rank", c.lora.allow_custom_rank}};
  j["privacy"] = {{"defense", c.privacy.defense},
                  {"dp_clip_norm", c.privacy.dp_clip_norm},
                  {"dp_sigma", c.privacy.dp_sigma}};
  j["fusion"] = {{"psi", c.fusion.psi},
                 {"query_set_size", c.fusion.query_set_size},
                 {"budget", c.fusion.budget},
                 {"coeff_lo", c.fusion.coeff_lo},
                 {"coeff_hi", c.fusion.coeff_hi},
                 {"random_restarts", c.fusion.random_restarts}};
  j["gating"] = {{"tau", c.gating.tau},
                 {"hidden", c.gating.hidden},
                 {"n_per_class", c.gating.n_per_class},
                 {"train_steps", c.gating.train_steps},
                 {"lr", c.gating.lr}};
  // secrets are never echoed into artifacts
  j["attacks"] = {{"candidate_pool_c", c.attacks.candidate_pool_c},
                  {"n_contexts", c.attacks.n_contexts},
                  {"extraction_samples", c.attacks.extraction_samples},
                  {"extraction_max_new", c.attacks.extraction_max_new},
                  {"extraction_temperature", c.attacks.extraction_temperature}};
  return j;
}

struct LoadOptions {
  std::vector<std::pair<std::string, std::string>> overrides;  // --set path=value
  bool use_env = true;
};

inline ConfigResult load_config(const std::string& path, const LoadOptions& opt = {}) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text_file(path));
  } catch (const std::exception& e) {
    return {std::nullopt, {std::string("cannot parse config: ") + e.what()}};
  }
  if (opt.use_env) apply_env_overrides(j);
  for (const auto& [key, value] : opt.overrides) apply_override(j, key, value);
  return parse_config(j);
}

}  // namespace securegate
