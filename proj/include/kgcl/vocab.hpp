#pragma once

// Subword vocabulary with greedy longest-match decomposition of new tokens.

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "kgcl/errors.hpp"
#include "kgcl/io.hpp"
#include "kgcl/linalg.hpp"
#include "kgcl/rng.hpp"

namespace kgcl {

inline constexpr int kPadId = 0;
inline constexpr int kUnkId = 1;
inline constexpr int kClsId = 2;
inline constexpr int kSepId = 3;
inline constexpr int kMaskId = 4;
inline constexpr int kMsId = 5;
inline constexpr int kMeId = 6;
inline constexpr int kSpecialCount = 7;

inline const char* const kSpecialTokens[kSpecialCount] = {
    "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[M_s]", "[M_e]"};

struct Vocabulary {
  std::vector<std::string> tokens;
  std::unordered_map<std::string, int> id_of;
  // token id -> base-token ids it was composed from; entries exist only for
  // tokens added with a successful decomposition.
  std::unordered_map<int, std::vector<int>> composition;

  int size() const { return static_cast<int>(tokens.size()); }

  bool contains(const std::string& t) const { return id_of.find(t) != id_of.end(); }

  int id(const std::string& t) const {
    auto it = id_of.find(t);
    return it == id_of.end() ? -1 : it->second;
  }

  int id_or_unk(const std::string& t) const {
    auto it = id_of.find(t);
    return it == id_of.end() ? kUnkId : it->second;
  }

  // Appends if absent, returns the id either way.
  int add(const std::string& t) {
    auto it = id_of.find(t);
    if (it != id_of.end()) return it->second;
    int nid = size();
    tokens.push_back(t);
    id_of.emplace(t, nid);
    return nid;
  }

  const std::vector<int>& composition_of(int token_id) const {
    static const std::vector<int> empty;
    auto it = composition.find(token_id);
    return it == composition.end() ? empty : it->second;
  }

  bool has_specials() const {
    if (size() < kSpecialCount) return false;
    for (int i = 0; i < kSpecialCount; ++i)
      if (tokens[i] != kSpecialTokens[i]) return false;
    return true;
  }

  bool is_special(int token_id) const {
    return token_id >= 0 && token_id < kSpecialCount && has_specials();
  }

  static Vocabulary with_specials() {
    Vocabulary v;
    for (int i = 0; i < kSpecialCount; ++i) v.add(kSpecialTokens[i]);
    return v;
  }

  // Dense ids, unique tokens, composition ids strictly below the composed id.
  void validate() const {
    if (id_of.size() != tokens.size()) throw ConfigError("vocabulary: duplicate tokens");
    for (int i = 0; i < size(); ++i) {
      auto it = id_of.find(tokens[i]);
      if (it == id_of.end() || it->second != i) throw ConfigError("vocabulary: ids not dense");
    }
    for (const auto& [tid, parts] : composition) {
      if (tid < 0 || tid >= size()) throw ConfigError("vocabulary: composition id out of range");
      for (int p : parts)
        if (p < 0 || p >= tid) throw ConfigError("vocabulary: composition must reference earlier ids");
    }
  }
};

// Longest-match greedy segmentation of word over tokens already present.
// Returns an empty list when some suffix position has no matching token.
inline std::vector<int> greedy_decompose(const Vocabulary& v, const std::string& word) {
  std::vector<int> out;
  size_t pos = 0;
  while (pos < word.size()) {
    int match_id = -1;
    size_t match_len = 0;
    for (size_t len = word.size() - pos; len >= 1; --len) {
      auto it = v.id_of.find(word.substr(pos, len));
      if (it != v.id_of.end()) {
        match_id = it->second;
        match_len = len;
        break;
      }
    }
    if (match_id < 0) return {};
    out.push_back(match_id);
    pos += match_len;
  }
  return out;
}

// Adds each genuinely new token; decompositions are taken over the base
// vocabulary only, so extension is idempotent and never re-indexes.
inline Vocabulary extend_vocabulary(const Vocabulary& base, const std::vector<std::string>& new_tokens) {
  Vocabulary v = base;
  for (const std::string& t : new_tokens) {
    if (t.empty()) throw ConfigError("extend_vocabulary: empty token string");
    if (v.contains(t)) continue;
    std::vector<int> parts = greedy_decompose(base, t);
    int nid = v.add(t);
    if (!parts.empty()) v.composition[nid] = std::move(parts);
  }
  return v;
}

// Mean of the composing base rows; tokens without a decomposition get a
// seeded Gaussian draw so repeated runs agree.
inline std::vector<double> init_new_token_embedding(const std::string& token, const Vocabulary& vocab,
                                                    const Mat& base_embeddings, std::uint64_t seed,
                                                    double stddev = 0.02) {
  int tid = vocab.id(token);
  if (tid < 0) throw ConfigError("init_new_token_embedding: token not in vocabulary: " + token);
  int d = base_embeddings.cols;
  std::vector<double> out(static_cast<size_t>(d), 0.0);
  const std::vector<int>& parts = vocab.composition_of(tid);
  if (!parts.empty()) {
    for (int p : parts) {
      if (p >= base_embeddings.rows) throw ConfigError("init_new_token_embedding: composition id outside base embeddings");
      const double* row = base_embeddings.row(p);
      for (int j = 0; j < d; ++j) out[static_cast<size_t>(j)] += row[j];
    }
    double inv = 1.0 / static_cast<double>(parts.size());
    for (int j = 0; j < d; ++j) out[static_cast<size_t>(j)] *= inv;
  } else {
    Rng rng(seed ^ fnv1a64(token));
    for (int j = 0; j < d; ++j) out[static_cast<size_t>(j)] = rng.normal(0.0, stddev);
  }
  return out;
}

// One id per word; unknown words become [UNK].
inline std::vector<int> encode_words(const Vocabulary& v, const std::vector<std::string>& words) {
  std::vector<int> ids;
  ids.reserve(words.size());
  for (const std::string& w : words) ids.push_back(v.id_or_unk(w));
  return ids;
}

// Greedy subword ids for one word; [UNK] when no decomposition exists.
inline std::vector<int> encode_word_subwords(const Vocabulary& v, const std::string& word) {
  int tid = v.id(word);
  if (tid >= 0) return {tid};
  std::vector<int> parts = greedy_decompose(v, word);
  if (parts.empty()) return {kUnkId};
  return parts;
}

inline std::string detokenize(const Vocabulary& v, const int* ids, int n) {
  std::string out;
  for (int i = 0; i < n; ++i) {
    if (ids[i] < 0 || ids[i] >= v.size()) throw ConfigError("detokenize: id out of range");
    if (i > 0) out += ' ';
    out += v.tokens[static_cast<size_t>(ids[i])];
  }
  return out;
}

inline std::string detokenize(const Vocabulary& v, const std::vector<int>& ids) {
  return detokenize(v, ids.data(), static_cast<int>(ids.size()));
}

// One line per token in id order: token<TAB>comma-joined composition ids.
inline void save_vocab(const std::string& path, const Vocabulary& v) {
  std::string out;
  for (int i = 0; i < v.size(); ++i) {
    out += v.tokens[static_cast<size_t>(i)];
    out += '\t';
    const std::vector<int>& parts = v.composition_of(i);
    for (size_t k = 0; k < parts.size(); ++k) {
      if (k > 0) out += ',';
      out += std::to_string(parts[k]);
    }
    out += '\n';
  }
  spit(path, out);
}

inline Vocabulary load_vocab(const std::string& path) {
  Vocabulary v;
  for (const std::string& line : read_lines(path)) {
    if (line.empty()) continue;
    size_t tab = line.find('\t');
    if (tab == std::string::npos) throw IoError("vocab file: missing tab in " + path);
    std::string tok = line.substr(0, tab);
    int tid = v.add(tok);
    std::string comp = line.substr(tab + 1);
    if (!comp.empty()) {
      std::vector<int> parts;
      for (const std::string& piece : split_char(comp, ','))
        parts.push_back(std::stoi(piece));
      v.composition[tid] = std::move(parts);
    }
  }
  v.validate();
  return v;
}

}  // namespace kgcl
