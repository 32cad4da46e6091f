#pragma once

// Synthetic PII-bearing corpora with exact ground truth, the rule-based
// detector that mirrors the generator's dictionary, scrubbing to the masked
// view, and clipped-Gaussian noise for the DP defense. Generator and detector
// share one dictionary, so detection on generated text is exact and leakage
// measurements reflect the protocol rather than NER quality.

#include <algorithm>
#include <array>
#include <cstdint>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "securegate/lora.hpp"
#include "securegate/rng.hpp"
#include "securegate/tokenizer.hpp"

namespace securegate {

enum class PiiClass : std::uint8_t { kPerson = 0, kLoc, kOrg, kProduct, kDate };

inline const std::array<PiiClass, 5>& all_pii_classes() {
  static const std::array<PiiClass, 5> cs = {PiiClass::kPerson, PiiClass::kLoc,
                                             PiiClass::kOrg, PiiClass::kProduct,
                                             PiiClass::kDate};
  return cs;
}

inline const char* pii_class_name(PiiClass c) {
  switch (c) {
    case PiiClass::kPerson: return "PERSON";
    case PiiClass::kLoc: return "LOC";
    case PiiClass::kOrg: return "ORG";
    case PiiClass::kProduct: return "PRODUCT";
    case PiiClass::kDate: return "DATE";
  }
  return "?";
}

inline PiiClass pii_class_from_name(const std::string& s) {
  for (PiiClass c : all_pii_classes())
    if (s == pii_class_name(c)) return c;
  throw std::invalid_argument("unknown PII class '" + s + "'");
}

struct PiiSpan {
  std::size_t start = 0, end = 0;  // [start, end)
  PiiClass cls = PiiClass::kPerson;
  std::string value;
};

struct Document {
  std::string text;
  std::vector<PiiSpan> spans;
};

struct ClientDataset {
  int client_id = 0;
  std::vector<Document> raw_view;
  std::vector<Document> masked_view;

  std::size_t size() const { return raw_view.size(); }

  // distinct (class, value) pairs planted in the raw view
  std::map<PiiClass, std::set<std::string>> planted_values() const {
    std::map<PiiClass, std::set<std::string>> out;
    for (const auto& doc : raw_view)
      for (const auto& sp : doc.spans) out[sp.cls].insert(sp.value);
    return out;
  }
};

using PiiDictionary = std::map<PiiClass, std::vector<std::string>>;

// ---------------------------------------------------------------------------
// dictionary

namespace detail_pii {

inline const std::vector<std::string>& first_names() {
  static const std::vector<std::string> v = {
      "Alice", "Bruno",  "Carla",  "Derek",  "Elena",  "Farid", "Greta",
      "Hugo",  "Iris",   "Jonas",  "Katya",  "Lionel", "Mona",  "Nils",
      "Odile", "Pavel",  "Quinn",  "Rosa",   "Stefan", "Talia", "Ursula",
      "Viktor", "Wanda", "Xavier", "Yusuf",  "Zelda"};
  return v;
}

inline const std::vector<std::string>& last_names() {
  static const std::vector<std::string> v = {
      "Moreau",  "Lindqvist", "Okafor",   "Petrov",  "Tanaka",  "Silva",
      "Novak",   "Haddad",    "Bergmann", "Costa",   "Dubois",  "Eriksen",
      "Fontaine", "Gallo",    "Horvat",   "Ivanova", "Jansen",  "Keller",
      "Larsen",  "Marchetti", "Nielsen",  "Oliveira", "Pereira", "Romano",
      "Sorensen", "Travers"};
  return v;
}

inline const std::vector<std::string>& loc_heads() {
  static const std::vector<std::string> v = {
      "Bay",   "Cedar", "Dover", "Elm",   "Fair",  "Glen",  "Haven",
      "Iron",  "Kings", "Lake",  "Maple", "North", "Oak",   "Pine",
      "Quarry", "River", "Stone", "South", "West",  "Winter"};
  return v;
}

inline const std::vector<std::string>& loc_tails() {
  static const std::vector<std::string> v = {
      "burg", "dale", "field", "ford", "gate", "holm", "mont",
      "port", "ridge", "side", "ton",  "view", "ville", "wick", "wood"};
  return v;
}

inline const std::vector<std::string>& org_heads() {
  static const std::vector<std::string> v = {
      "Acme",   "Apex",    "Atlas",  "Borealis", "Cascade", "Delta",
      "Equinox", "Forge",  "Gamma",  "Helix",    "Ion",     "Juniper",
      "Kite",   "Lumen",   "Meridian", "Nimbus", "Orbit",   "Prism",
      "Quartz", "Radial",  "Summit", "Tessera",  "Umbra",   "Vertex",
      "Wavelet", "Zephyr"};
  return v;
}

inline const std::vector<std::string>& org_tails() {
  static const std::vector<std::string> v = {
      "Analytics", "Bank",    "Biotech",  "Consulting", "Dynamics",
      "Energy",    "Foods",   "Group",    "Holdings",   "Industries",
      "Labs",      "Logistics", "Media",  "Partners",   "Robotics",
      "Systems",   "Telecom", "Textiles", "Ventures",   "Works"};
  return v;
}

inline const std::vector<std::string>& product_heads() {
  static const std::vector<std::string> v = {
      "Aero", "Astro", "Blaze", "Clear", "Dyno", "Echo", "Flux",
      "Gyro", "Halo",  "Jet",   "Kilo",  "Luma", "Max",  "Nano",
      "Omni", "Pulse", "Quick", "Rapid", "Swift", "Turbo"};
  return v;
}

inline const std::vector<std::string>& product_tails() {
  static const std::vector<std::string> v = {
      "Beam", "Box",  "Case", "Core", "Dock",  "Drive", "Hub",  "Lens",
      "Mate", "Pad",  "Pen",  "Pod",  "Stand", "Tab",   "Vault", "Watch"};
  return v;
}

}  // namespace detail_pii

// Compositional dictionary with distinct entries per class. Date entries use
// the single canonical YYYY-MM-DD format the detector's pattern expects.
inline PiiDictionary default_dictionary(std::size_t entries_per_class,
                                        std::uint64_t seed) {
  using namespace detail_pii;
  PiiDictionary dict;
  auto build = [&](PiiClass cls, auto&& emit, std::size_t universe) {
    if (entries_per_class > universe)
      throw std::invalid_argument(std::string("default_dictionary: class ") +
                                  pii_class_name(cls) + " has only " +
                                  std::to_string(universe) + " distinct values");
    Rng rng(derive_seed(seed, "dictionary", static_cast<std::uint64_t>(cls)));
    std::vector<std::size_t> idx = rng.sample_indices(universe, entries_per_class);
    std::vector<std::string> out;
    out.reserve(entries_per_class);
    for (std::size_t i : idx) out.push_back(emit(i));
    dict[cls] = std::move(out);
  };

  build(PiiClass::kPerson,
        [&](std::size_t i) {
          return first_names()[i % first_names().size()] + " " +
                 last_names()[i / first_names().size()];
        },
        first_names().size() * last_names().size());
  build(PiiClass::kLoc,
        [&](std::size_t i) {
          static const std::vector<std::string> prefix = {"", "New ", "Old ", "Port "};
          const std::size_t base = loc_heads().size() * loc_tails().size();
          return prefix[i / base] + loc_heads()[(i % base) % loc_heads().size()] +
                 loc_tails()[(i % base) / loc_heads().size()];
        },
        4 * loc_heads().size() * loc_tails().size());
  build(PiiClass::kOrg,
        [&](std::size_t i) {
          return org_heads()[i % org_heads().size()] + " " +
                 org_tails()[i / org_heads().size()];
        },
        org_heads().size() * org_tails().size());
  build(PiiClass::kProduct,
        [&](std::size_t i) {
          const std::size_t base = product_heads().size() * product_tails().size();
          std::string name = product_heads()[(i % base) % product_heads().size()] +
                             product_tails()[(i % base) / product_heads().size()];
          const std::size_t series = i / base;
          if (series > 0) name += " " + std::to_string(100 * series);
          return name;
        },
        10 * product_heads().size() * product_tails().size());
  build(PiiClass::kDate,
        [&](std::size_t i) {
          const std::size_t year = 1990 + i / (12 * 28);
          const std::size_t month = 1 + (i / 28) % 12;
          const std::size_t day = 1 + i % 28;
          char buf[16];
          std::snprintf(buf, sizeof buf, "%04u-%02u-%02u",
                        static_cast<unsigned>(year), static_cast<unsigned>(month),
                        static_cast<unsigned>(day));
          return std::string(buf);
        },
        40 * 12 * 28);
  return dict;
}

// ---------------------------------------------------------------------------
// templates

struct SentenceTemplate {
  std::string prefix;
  PiiClass cls;
  std::string suffix;
};

inline const std::vector<SentenceTemplate>& sentence_templates() {
  static const std::vector<SentenceTemplate> v = {
      {"Case notes: ", PiiClass::kPerson, " filed the claim."},
      {"We met ", PiiClass::kPerson, " at the branch."},
      {"Statement signed by ", PiiClass::kPerson, " today."},
      {"Shipment sent to ", PiiClass::kLoc, " overnight."},
      {"The office in ", PiiClass::kLoc, " has closed."},
      {"Route changed near ", PiiClass::kLoc, " again."},
      {"Contract awarded to ", PiiClass::kOrg, " last week."},
      {"Audit covers ", PiiClass::kOrg, " accounts."},
      {"Invoice issued by ", PiiClass::kOrg, " pending."},
      {"Ordered one ", PiiClass::kProduct, " unit."},
      {"The ", PiiClass::kProduct, " passed final testing."},
      {"Refund approved for a ", PiiClass::kProduct, " return."},
      {"Delivery is due on ", PiiClass::kDate, " as agreed."},
      {"Renewal date set to ", PiiClass::kDate, " now."},
      {"Filed on ", PiiClass::kDate, " by the clerk."},
  };
  return v;
}

// Filler sentences without any PII slot; pretraining text and prompt bodies.
inline const std::vector<std::string>& filler_sentences() {
  static const std::vector<std::string> v = {
      "The quarterly report is ready.", "Records were archived before noon.",
      "Approval is required for release.", "The ledger balances were checked.",
      "Follow-up is scheduled for later.", "No further action is required.",
      "The desk review found no issues.", "All parties were notified in writing.",
  };
  return v;
}

// ---------------------------------------------------------------------------
// corpus generation

struct CorpusOptions {
  std::size_t sentences_per_doc = 2;
  std::size_t values_per_class_per_client = 4;  // disjoint slices per client
  std::size_t min_entries_per_class = 50;       // candidate-pool floor
};

inline std::vector<ClientDataset> generate_corpus(std::size_t n_clients,
                                                  std::size_t docs_per_client,
                                                  const PiiDictionary& dict,
                                                  std::uint64_t seed,
                                                  const CorpusOptions& opt = {});

inline Document scrub(const Document& doc, const std::vector<PiiSpan>& spans);

namespace detail_pii {

// Per-client disjoint value slices, drawn from a seeded shuffle of each class
// list. Slices make client memorization targets distinct while decoys still
// come from the full dictionary.
inline std::map<PiiClass, std::vector<std::string>> client_slice(
    const PiiDictionary& dict, std::size_t n_clients, std::size_t client,
    std::size_t per_client, std::uint64_t seed) {
  std::map<PiiClass, std::vector<std::string>> out;
  for (const auto& [cls, values] : dict) {
    Rng rng(derive_seed(seed, "value_slices", static_cast<std::uint64_t>(cls)));
    std::vector<std::size_t> order(values.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    std::size_t take = per_client;
    if (take * n_clients > values.size())
      take = std::max<std::size_t>(1, values.size() / n_clients);
    std::vector<std::string> slice;
    for (std::size_t i = 0; i < take; ++i)
      slice.push_back(values[order[(client * take + i) % order.size()]]);
    out[cls] = std::move(slice);
  }
  return out;
}

}  // namespace detail_pii

inline std::vector<ClientDataset> generate_corpus(std::size_t n_clients,
                                                  std::size_t docs_per_client,
                                                  const PiiDictionary& dict,
                                                  std::uint64_t seed,
                                                  const CorpusOptions& opt) {
  if (n_clients == 0 || docs_per_client == 0)
    throw std::invalid_argument("generate_corpus: counts must be positive");
  for (PiiClass cls : all_pii_classes()) {
    auto it = dict.find(cls);
    const std::size_t have = it == dict.end() ? 0 : it->second.size();
    if (have < opt.min_entries_per_class)
      throw std::invalid_argument(std::string("generate_corpus: class ") +
                                  pii_class_name(cls) + " has " +
                                  std::to_string(have) + " entries, need >= " +
                                  std::to_string(opt.min_entries_per_class));
  }

  std::vector<ClientDataset> out;
  for (std::size_t c = 0; c < n_clients; ++c) {
    auto slice = detail_pii::client_slice(dict, n_clients, c,
                                          opt.values_per_class_per_client, seed);
    ClientDataset ds;
    ds.client_id = static_cast<int>(c);
    Rng rng(derive_seed(seed, "corpus_client", c));
    for (std::size_t d = 0; d < docs_per_client; ++d) {
      Document doc;
      for (std::size_t s = 0; s < opt.sentences_per_doc; ++s) {
        const auto& tpl = sentence_templates()[rng.below(sentence_templates().size())];
        const auto& pool = slice.at(tpl.cls);
        const std::string& value = pool[rng.below(pool.size())];
        if (s > 0) doc.text += " ";
        doc.text += tpl.prefix;
        PiiSpan sp;
        sp.start = doc.text.size();
        sp.end = sp.start + value.size();
        sp.cls = tpl.cls;
        sp.value = value;
        doc.text += value;
        doc.text += tpl.suffix;
        doc.spans.push_back(std::move(sp));
      }
      ds.raw_view.push_back(doc);
      ds.masked_view.push_back(scrub(doc, doc.spans));
    }
    out.push_back(std::move(ds));
  }
  return out;
}

// Pretraining text: the same templates with the slot already masked, plus
// filler sentences, so the frozen base knows the domain but no PII value.
inline std::vector<std::string> generate_pretrain_texts(std::size_t n_docs,
                                                        std::uint64_t seed) {
  Rng rng(derive_seed(seed, "pretrain_corpus"));
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n_docs; ++i) {
    std::string text;
    for (std::size_t s = 0; s < 2; ++s) {
      if (s > 0) text += " ";
      if (rng.uniform() < 0.7) {
        const auto& tpl = sentence_templates()[rng.below(sentence_templates().size())];
        text += tpl.prefix;
        text += tok::kMaskText;
        text += tpl.suffix;
      } else {
        text += filler_sentences()[rng.below(filler_sentences().size())];
      }
    }
    out.push_back(std::move(text));
  }
  return out;
}

// ---------------------------------------------------------------------------
// detection and scrubbing

// Exact dictionary matching plus the YYYY-MM-DD pattern; longest match wins,
// scanning left to right, no overlaps in the output.
inline std::vector<PiiSpan> detect_pii(const std::string& text,
                                       const PiiDictionary& dict) {
  std::vector<PiiSpan> candidates;
  for (const auto& [cls, values] : dict)
    for (const std::string& v : values) {
      if (v.empty()) continue;
      std::size_t pos = 0;
      while ((pos = text.find(v, pos)) != std::string::npos) {
        candidates.push_back({pos, pos + v.size(), cls, v});
        ++pos;
      }
    }
  // digit pattern dddd-dd-dd
  auto digit = [&](std::size_t i) {
    return i < text.size() && text[i] >= '0' && text[i] <= '9';
  };
  for (std::size_t i = 0; i + 10 <= text.size(); ++i) {
    if (digit(i) && digit(i + 1) && digit(i + 2) && digit(i + 3) &&
        text[i + 4] == '-' && digit(i + 5) && digit(i + 6) &&
        text[i + 7] == '-' && digit(i + 8) && digit(i + 9)) {
      candidates.push_back({i, i + 10, PiiClass::kDate, text.substr(i, 10)});
    }
  }

  std::sort(candidates.begin(), candidates.end(),
            [](const PiiSpan& a, const PiiSpan& b) {
              if (a.start != b.start) return a.start < b.start;
              if (a.end != b.end) return a.end > b.end;  // longest first
              return a.cls < b.cls;
            });
  std::vector<PiiSpan> out;
  std::size_t cursor = 0;
  for (const auto& sp : candidates) {
    if (sp.start < cursor) continue;
    if (!out.empty() && out.back().start == sp.start && out.back().end == sp.end)
      continue;  // duplicate from dictionary + pattern
    out.push_back(sp);
    cursor = sp.end;
  }
  return out;
}

inline Document scrub(const Document& doc, const std::vector<PiiSpan>& spans) {
  std::vector<PiiSpan> ordered = spans;
  std::sort(ordered.begin(), ordered.end(),
            [](const PiiSpan& a, const PiiSpan& b) { return a.start < b.start; });
  std::size_t prev_end = 0;
  for (const auto& sp : ordered) {
    if (sp.end > doc.text.size() || sp.start >= sp.end || sp.start < prev_end)
      throw std::invalid_argument("scrub: invalid span [" +
                                  std::to_string(sp.start) + "," +
                                  std::to_string(sp.end) + ") in text of " +
                                  std::to_string(doc.text.size()) + " chars");
    prev_end = sp.end;
  }
  Document out;
  out.text = doc.text;
  for (auto it = ordered.rbegin(); it != ordered.rend(); ++it)
    out.text.replace(it->start, it->end - it->start, tok::kMaskText);
  return out;  // span metadata cleared
}

// ---------------------------------------------------------------------------
// DP-style defense

// Clips the global L2 norm of all adapter tensors to clip_norm, then adds
// i.i.d. Gaussian(0, (sigma*clip_norm)^2) noise per element.
inline LowRankAdapter dp_noise(const LowRankAdapter& update, double clip_norm,
                               double sigma, std::uint64_t seed) {
  if (clip_norm <= 0.0) throw std::invalid_argument("dp_noise: clip_norm must be > 0");
  if (sigma < 0.0) throw std::invalid_argument("dp_noise: sigma must be >= 0");
  LowRankAdapter out = update;
  double sq = 0.0;
  out.for_each_tensor([&](Tensor& t) {
    for (double v : t.data) sq += v * v;
  });
  const double norm = std::sqrt(sq);
  const double scale = norm > clip_norm ? clip_norm / norm : 1.0;
  Rng rng(derive_seed(seed, "dp_noise"));
  const double stddev = sigma * clip_norm;
  out.for_each_tensor([&](Tensor& t) {
    for (double& v : t.data) {
      v *= scale;
      if (stddev > 0.0) v += rng.normal(0.0, stddev);
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// persistence

inline nlohmann::json dictionary_to_json(const PiiDictionary& dict) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [cls, values] : dict) j[pii_class_name(cls)] = values;
  return j;
}

inline PiiDictionary dictionary_from_json(const nlohmann::json& j) {
  PiiDictionary dict;
  for (const auto& [key, values] : j.items())
    dict[pii_class_from_name(key)] = values.get<std::vector<std::string>>();
  return dict;
}

inline std::string corpus_to_jsonl(const std::vector<ClientDataset>& clients) {
  std::string out;
  for (const auto& ds : clients)
    for (const auto& doc : ds.raw_view) {
      nlohmann::json j;
      j["client_id"] = ds.client_id;
      j["text"] = doc.text;
      nlohmann::json spans = nlohmann::json::array();
      for (const auto& sp : doc.spans)
        spans.push_back({sp.start, sp.end, pii_class_name(sp.cls), sp.value});
      j["spans"] = spans;
      out += j.dump();
      out += "\n";
    }
  return out;
}

inline std::vector<ClientDataset> corpus_from_jsonl(const std::string& text) {
  std::map<int, ClientDataset> by_id;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t nl = text.find('\n', pos);
    if (nl == std::string::npos) nl = text.size();
    if (nl > pos) {
      nlohmann::json j = nlohmann::json::parse(text.substr(pos, nl - pos));
      Document doc;
      doc.text = j.at("text").get<std::string>();
      for (const auto& sp : j.at("spans")) {
        PiiSpan s;
        s.start = sp.at(0).get<std::size_t>();
        s.end = sp.at(1).get<std::size_t>();
        s.cls = pii_class_from_name(sp.at(2).get<std::string>());
        s.value = sp.at(3).get<std::string>();
        doc.spans.push_back(std::move(s));
      }
      const int id = j.at("client_id").get<int>();
      ClientDataset& ds = by_id[id];
      ds.client_id = id;
      ds.masked_view.push_back(scrub(doc, doc.spans));
      ds.raw_view.push_back(std::move(doc));
    }
    pos = nl + 1;
  }
  std::vector<ClientDataset> out;
  for (auto& [id, ds] : by_id) out.push_back(std::move(ds));
  return out;
}

}  // namespace securegate
