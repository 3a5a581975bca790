#pragma once

// Corpus ingestion: mention matching, context extraction, triple splits.

#include <algorithm>
#include <cstdint>
#include <iostream>
#include <map>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <json.hpp>

#include "kgcl/errors.hpp"
#include "kgcl/io.hpp"
#include "kgcl/rng.hpp"
#include "kgcl/vocab.hpp"

namespace kgcl {

// Documents are whitespace-tokenized words, lowercased at load time so
// surface matching is case-insensitive and round-trips exactly.
using Document = std::vector<std::string>;

struct Mention {
  std::string concept_id;
  std::string term;
  int doc_id = 0;
  int start = 0;  // word index, inclusive
  int end = 0;    // word index, exclusive
};

struct MentionContext {
  std::vector<int> tokens;  // includes the [M_s]/[M_e] boundary tags
  int mention_start = 0;    // index into tokens, inclusive
  int mention_end = 0;      // index into tokens, exclusive
  std::string concept_id;
  std::string term;
};

struct Triple {
  int head = 0;
  int relation = 0;
  int tail = 0;
  bool operator==(const Triple& o) const {
    return head == o.head && relation == o.relation && tail == o.tail;
  }
};

struct TripleSplit {
  std::vector<Triple> train, test, valid;
};

// Interns entity/relation names in first-appearance order.
struct TripleStore {
  std::vector<Triple> triples;
  std::vector<std::string> entity_names;
  std::vector<std::string> relation_names;
  std::unordered_map<std::string, int> entity_ids;
  std::unordered_map<std::string, int> relation_ids;

  int num_entities() const { return static_cast<int>(entity_names.size()); }
  int num_relations() const { return static_cast<int>(relation_names.size()); }

  int entity_id(const std::string& name) {
    auto it = entity_ids.find(name);
    if (it != entity_ids.end()) return it->second;
    int nid = num_entities();
    entity_names.push_back(name);
    entity_ids.emplace(name, nid);
    return nid;
  }

  int relation_id(const std::string& name) {
    auto it = relation_ids.find(name);
    if (it != relation_ids.end()) return it->second;
    int nid = num_relations();
    relation_names.push_back(name);
    relation_ids.emplace(name, nid);
    return nid;
  }

  void add(const std::string& h, const std::string& r, const std::string& t) {
    triples.push_back({entity_id(h), relation_id(r), entity_id(t)});
  }
};

inline std::vector<Document> load_documents(const std::string& path) {
  std::vector<Document> docs;
  for (const std::string& line : read_lines(path)) {
    Document d;
    for (std::string& w : split_ws(line)) d.push_back(lowercase(w));
    docs.push_back(std::move(d));
  }
  return docs;
}

// TSV concept_id<TAB>term; terms lowercased; first binding of a term wins.
inline std::map<std::string, std::string> load_dictionary(const std::string& path) {
  std::map<std::string, std::string> dict;
  for (const std::string& line : read_lines(path)) {
    if (line.empty()) continue;
    size_t tab = line.find('\t');
    if (tab == std::string::npos) throw IoError("dictionary: missing tab in " + path);
    std::string cui = trim(line.substr(0, tab));
    std::string term = lowercase(trim(line.substr(tab + 1)));
    if (cui.empty() || term.empty()) throw IoError("dictionary: empty field in " + path);
    dict.emplace(term, cui);
  }
  return dict;
}

// Synonym lists per concept, term order as in the (sorted) dictionary.
inline std::map<std::string, std::vector<std::string>> concept_terms(
    const std::map<std::string, std::string>& dict) {
  std::map<std::string, std::vector<std::string>> out;
  for (const auto& [term, cui] : dict) out[cui].push_back(term);
  return out;
}

// All maximal non-overlapping exact matches; longer spans beat shorter
// overlapping ones, ties go to the leftmost start.
inline std::vector<Mention> match_mentions(const std::vector<Document>& documents,
                                           const std::map<std::string, std::string>& dict) {
  std::vector<Mention> out;
  if (dict.empty()) return out;
  size_t max_words = 1;
  for (const auto& [term, cui] : dict)
    max_words = std::max(max_words, split_ws(term).size());

  for (int doc_id = 0; doc_id < static_cast<int>(documents.size()); ++doc_id) {
    const Document& doc = documents[static_cast<size_t>(doc_id)];
    int n = static_cast<int>(doc.size());
    std::vector<Mention> candidates;
    for (int start = 0; start < n; ++start) {
      std::string phrase;
      for (int len = 1; len <= static_cast<int>(max_words) && start + len <= n; ++len) {
        if (len > 1) phrase += ' ';
        phrase += doc[static_cast<size_t>(start + len - 1)];
        auto it = dict.find(phrase);
        if (it != dict.end())
          candidates.push_back({it->second, phrase, doc_id, start, start + len});
      }
    }
    std::sort(candidates.begin(), candidates.end(), [](const Mention& a, const Mention& b) {
      int la = a.end - a.start, lb = b.end - b.start;
      if (la != lb) return la > lb;
      return a.start < b.start;
    });
    std::vector<char> taken(static_cast<size_t>(n), 0);
    std::vector<Mention> kept;
    for (const Mention& m : candidates) {
      bool free_span = true;
      for (int i = m.start; i < m.end; ++i)
        if (taken[static_cast<size_t>(i)]) { free_span = false; break; }
      if (!free_span) continue;
      for (int i = m.start; i < m.end; ++i) taken[static_cast<size_t>(i)] = 1;
      kept.push_back(m);
    }
    std::sort(kept.begin(), kept.end(),
              [](const Mention& a, const Mention& b) { return a.start < b.start; });
    out.insert(out.end(), kept.begin(), kept.end());
  }
  return out;
}

// Up to window/2 words each side, truncated at document edges; the mention
// itself is wrapped in [M_s]/[M_e].
inline std::vector<MentionContext> extract_contexts(const std::vector<Document>& documents,
                                                    const std::vector<Mention>& mentions,
                                                    const Vocabulary& vocab, int window) {
  if (window <= 0) throw ConfigError("extract_contexts: window must be positive");
  int side = window / 2;
  std::vector<MentionContext> out;
  out.reserve(mentions.size());
  for (const Mention& m : mentions) {
    if (m.doc_id < 0 || m.doc_id >= static_cast<int>(documents.size()))
      throw ConfigError("extract_contexts: mention doc_id out of range");
    const Document& doc = documents[static_cast<size_t>(m.doc_id)];
    int n = static_cast<int>(doc.size());
    if (m.start < 0 || m.end <= m.start || m.end > n)
      throw ConfigError("extract_contexts: mention span out of range");
    int left = std::max(0, m.start - side);
    int right = std::min(n, m.end + side);

    MentionContext ctx;
    ctx.concept_id = m.concept_id;
    ctx.term = m.term;
    for (int i = left; i < m.start; ++i)
      ctx.tokens.push_back(vocab.id_or_unk(doc[static_cast<size_t>(i)]));
    ctx.tokens.push_back(kMsId);
    ctx.mention_start = static_cast<int>(ctx.tokens.size());
    for (int i = m.start; i < m.end; ++i)
      ctx.tokens.push_back(vocab.id_or_unk(doc[static_cast<size_t>(i)]));
    ctx.mention_end = static_cast<int>(ctx.tokens.size());
    ctx.tokens.push_back(kMeId);
    for (int i = m.end; i < right; ++i)
      ctx.tokens.push_back(vocab.id_or_unk(doc[static_cast<size_t>(i)]));
    out.push_back(std::move(ctx));
  }
  return out;
}

// Shuffled assignment at the requested sizes, then a repair pass that moves
// any test/valid triple with a train-unseen entity or relation into train.
inline TripleSplit split_triples(const std::vector<Triple>& triples, double r_train, double r_test,
                                 double r_valid, std::uint64_t seed, int* moved_to_train = nullptr) {
  if (triples.empty()) throw ConfigError("split_triples: no triples");
  double sum = r_train + r_test + r_valid;
  if (sum < 1.0 - 1e-9 || sum > 1.0 + 1e-9 || r_train < 0 || r_test < 0 || r_valid < 0)
    throw ConfigError("split_triples: ratios must be nonnegative and sum to 1");

  int n = static_cast<int>(triples.size());
  std::vector<int> order(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  Rng rng(seed);
  rng.shuffle(order);

  int n_test = static_cast<int>(std::llround(r_test * n));
  int n_valid = static_cast<int>(std::llround(r_valid * n));
  if (n_test + n_valid > n) n_valid = n - n_test;
  int n_train = n - n_test - n_valid;

  TripleSplit split;
  for (int i = 0; i < n; ++i) {
    const Triple& t = triples[static_cast<size_t>(order[static_cast<size_t>(i)])];
    if (i < n_train) split.train.push_back(t);
    else if (i < n_train + n_test) split.test.push_back(t);
    else split.valid.push_back(t);
  }

  std::unordered_set<int> seen_e, seen_r;
  for (const Triple& t : split.train) {
    seen_e.insert(t.head);
    seen_e.insert(t.tail);
    seen_r.insert(t.relation);
  }
  int moved = 0;
  auto repair = [&](std::vector<Triple>& part) {
    std::vector<Triple> kept;
    kept.reserve(part.size());
    for (const Triple& t : part) {
      if (seen_e.count(t.head) && seen_e.count(t.tail) && seen_r.count(t.relation)) {
        kept.push_back(t);
      } else {
        split.train.push_back(t);
        seen_e.insert(t.head);
        seen_e.insert(t.tail);
        seen_r.insert(t.relation);
        ++moved;
      }
    }
    part = std::move(kept);
  };
  repair(split.test);
  repair(split.valid);
  if (moved_to_train) *moved_to_train = moved;
  if ((n_test > 0 && split.test.empty()) || (n_valid > 0 && split.valid.empty()))
    std::cerr << "split_triples: graph too small, test/valid drained into train\n";
  return split;
}

inline void save_contexts_jsonl(const std::string& path, const std::vector<MentionContext>& contexts) {
  std::string out;
  for (const MentionContext& c : contexts) {
    nlohmann::json j;
    j["tokens"] = c.tokens;
    j["span"] = {c.mention_start, c.mention_end};
    j["cui"] = c.concept_id;
    j["term"] = c.term;
    out += j.dump();
    out += '\n';
  }
  spit(path, out);
}

inline std::vector<MentionContext> load_contexts_jsonl(const std::string& path) {
  std::vector<MentionContext> out;
  for (const std::string& line : read_lines(path)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) throw IoError("contexts: bad json line in " + path);
    MentionContext c;
    c.tokens = j.at("tokens").get<std::vector<int>>();
    c.mention_start = j.at("span").at(0).get<int>();
    c.mention_end = j.at("span").at(1).get<int>();
    c.concept_id = j.at("cui").get<std::string>();
    c.term = j.at("term").get<std::string>();
    out.push_back(std::move(c));
  }
  return out;
}

inline void load_triples_tsv(const std::string& path, TripleStore& store) {
  for (const std::string& line : read_lines(path)) {
    if (line.empty()) continue;
    std::vector<std::string> parts = split_char(line, '\t');
    if (parts.size() != 3) throw IoError("triples: expected 3 fields in " + path);
    store.add(trim(parts[0]), trim(parts[1]), trim(parts[2]));
  }
}

inline void save_triples_tsv(const std::string& path, const TripleStore& store,
                             const std::vector<Triple>& list) {
  std::string out;
  for (const Triple& t : list) {
    out += store.entity_names[static_cast<size_t>(t.head)];
    out += '\t';
    out += store.relation_names[static_cast<size_t>(t.relation)];
    out += '\t';
    out += store.entity_names[static_cast<size_t>(t.tail)];
    out += '\n';
  }
  spit(path, out);
}

// Word types in first-appearance order; feeds vocabulary extension.
inline std::vector<std::string> corpus_word_types(const std::vector<Document>& documents) {
  std::vector<std::string> out;
  std::unordered_set<std::string> seen;
  for (const Document& d : documents)
    for (const std::string& w : d)
      if (seen.insert(w).second) out.push_back(w);
  return out;
}

}  // namespace kgcl
