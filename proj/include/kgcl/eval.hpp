#pragma once

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "kgcl/errors.hpp"
#include "kgcl/io.hpp"
#include "kgcl/linalg.hpp"

namespace kgcl {

// A labeled embedding collection: exactly one semantic type and one
// embedding row per concept.
struct TypedConceptSet {
  std::vector<std::string> ids;
  std::vector<std::string> types;
  Mat embeddings;

  void validate() const {
    if (embeddings.rows != static_cast<int>(ids.size()) ||
        ids.size() != types.size())
      throw ConfigError("concept ids, types and embedding rows must align");
  }
};

struct MscmReport {
  std::map<std::string, double> per_type;
  double average = 0.0;
};

namespace detail {

// Row indices of the k nearest concepts to row v by cosine, self excluded.
// Ties break toward the smaller row index so results are reproducible.
inline std::vector<int> nearest_rows(const Mat& e, int v, int k) {
  std::vector<std::pair<double, int>> scored;
  scored.reserve(e.rows - 1);
  for (int j = 0; j < e.rows; ++j) {
    if (j == v) continue;
    scored.emplace_back(cosine(e.row(v), e.row(j), e.cols), j);
  }
  std::sort(scored.begin(), scored.end(),
            [](const std::pair<double, int>& a, const std::pair<double, int>& b) {
              if (a.first != b.first) return a.first > b.first;
              return a.second < b.second;
            });
  if (static_cast<int>(scored.size()) > k) scored.resize(k);
  std::vector<int> out;
  out.reserve(scored.size());
  for (const auto& [c, j] : scored) out.push_back(j);
  return out;
}

inline std::vector<std::vector<int>> all_neighbor_lists(const TypedConceptSet& set,
                                                        int k) {
  set.validate();
  if (k < 1) throw ConfigError("neighborhood size must be >= 1");
  if (set.embeddings.rows < k + 1)
    throw ConfigError("need at least k+1 concepts for a k-neighborhood");
  std::vector<std::vector<int>> lists(set.embeddings.rows);
  for (int v = 0; v < set.embeddings.rows; ++v)
    lists[v] = nearest_rows(set.embeddings, v, k);
  return lists;
}

inline double mscm_from_lists(const TypedConceptSet& set,
                              const std::vector<std::vector<int>>& lists,
                              const std::string& type) {
  double total = 0.0;
  int members = 0;
  for (size_t v = 0; v < set.types.size(); ++v) {
    if (set.types[v] != type) continue;
    members += 1;
    const std::vector<int>& nb = lists[v];
    double score = 0.0;
    for (size_t i = 0; i < nb.size(); ++i)
      if (set.types[nb[i]] == type)
        score += 1.0 / std::log2(static_cast<double>(i) + 2.0);
    total += score;
  }
  if (members == 0)
    throw ConfigError("no concepts of semantic type " + type);
  return total / members;
}

}  // namespace detail

// Mean discounted type purity of each concept's k-neighborhood, averaged
// over the concepts carrying the given type. Ranges from 0 to
// sum_{i=1..k} 1/log2(i+1), the all-pure ceiling.
inline double mscm(const TypedConceptSet& set, const std::string& type,
                   int k = 40) {
  return detail::mscm_from_lists(set, detail::all_neighbor_lists(set, k), type);
}

// Per-type scores for every type present in the set plus their plain mean.
inline MscmReport mscm_report(const TypedConceptSet& set, int k = 40) {
  std::vector<std::vector<int>> lists = detail::all_neighbor_lists(set, k);
  std::set<std::string> types(set.types.begin(), set.types.end());
  MscmReport rep;
  double sum = 0.0;
  for (const std::string& t : types) {
    double s = detail::mscm_from_lists(set, lists, t);
    rep.per_type[t] = s;
    sum += s;
  }
  rep.average = rep.per_type.empty() ? 0.0 : sum / rep.per_type.size();
  return rep;
}

struct PairMetrics {
  double theta = 0.0;
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

inline std::vector<double> default_theta_grid() {
  std::vector<double> grid;
  for (int i = 50; i <= 99; ++i) grid.push_back(i / 100.0);
  return grid;
}

// Sweeps the threshold grid, predicting "synonym" for every unordered row
// pair whose cosine exceeds theta, and returns the metrics at the
// F1-maximizing threshold. Ties go to the smaller theta.
inline PairMetrics clustering_pair_eval(const Mat& emb,
                                        const std::vector<std::pair<int, int>>& gold,
                                        std::vector<double> grid = {}) {
  if (emb.rows < 2) throw ConfigError("need at least two term embeddings");
  if (gold.empty()) throw ConfigError("need at least one gold synonym pair");
  if (grid.empty()) grid = default_theta_grid();
  std::sort(grid.begin(), grid.end());

  std::set<std::pair<int, int>> gold_set;
  for (auto [a, b] : gold) {
    if (a == b || a < 0 || b < 0 || a >= emb.rows || b >= emb.rows)
      throw ConfigError("gold pair references an unknown term");
    gold_set.insert({std::min(a, b), std::max(a, b)});
  }

  struct Scored {
    double cos;
    bool is_gold;
  };
  std::vector<Scored> pairs;
  for (int i = 0; i < emb.rows; ++i)
    for (int j = i + 1; j < emb.rows; ++j)
      pairs.push_back({cosine(emb.row(i), emb.row(j), emb.cols),
                       gold_set.count({i, j}) > 0});

  PairMetrics best;
  bool have = false;
  for (double theta : grid) {
    long tp = 0, fp = 0, fn = 0, tn = 0;
    for (const Scored& p : pairs) {
      bool pred = p.cos > theta;
      if (pred && p.is_gold) ++tp;
      else if (pred) ++fp;
      else if (p.is_gold) ++fn;
      else ++tn;
    }
    PairMetrics m;
    m.theta = theta;
    m.accuracy = static_cast<double>(tp + tn) / pairs.size();
    m.precision = tp + fp == 0 ? 0.0 : static_cast<double>(tp) / (tp + fp);
    m.recall = tp + fn == 0 ? 0.0 : static_cast<double>(tp) / (tp + fn);
    m.f1 = m.precision + m.recall == 0.0
               ? 0.0
               : 2.0 * m.precision * m.recall / (m.precision + m.recall);
    if (!have || m.f1 > best.f1) {
      best = m;
      have = true;
    }
  }
  return best;
}

// 1-based ranks with the average-rank convention for ties.
inline std::vector<double> average_ranks(const std::vector<double>& x) {
  std::vector<int> order(x.size());
  for (size_t i = 0; i < x.size(); ++i) order[i] = static_cast<int>(i);
  std::sort(order.begin(), order.end(),
            [&](int a, int b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  size_t i = 0;
  while (i < order.size()) {
    size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    double mean_rank = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (size_t t = i; t <= j; ++t) ranks[order[t]] = mean_rank;
    i = j + 1;
  }
  return ranks;
}

// Spearman rank correlation; constant inputs carry no order information and
// score 0.
inline double spearman(const std::vector<double>& a,
                       const std::vector<double>& b) {
  if (a.size() != b.size()) throw ConfigError("mismatched sequence lengths");
  if (a.size() < 2) throw ConfigError("need at least two pairs");
  std::vector<double> ra = average_ranks(a);
  std::vector<double> rb = average_ranks(b);
  double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (size_t i = 0; i < ra.size(); ++i) {
    ma += ra[i];
    mb += rb[i];
  }
  ma /= n;
  mb /= n;
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (size_t i = 0; i < ra.size(); ++i) {
    double da = ra[i] - ma;
    double db = rb[i] - mb;
    cov += da * db;
    va += da * da;
    vb += db * db;
  }
  if (va == 0.0 || vb == 0.0) return 0.0;
  return cov / std::sqrt(va * vb);
}

struct RelatednessPair {
  std::string term_a, term_b;
  double gold = 0.0;
};

struct RelatednessDataset {
  std::vector<RelatednessPair> pairs;
  double score_lo = 0.0;
  double score_hi = 0.0;
};

// TSV rows: term_a <TAB> term_b <TAB> score. Scores must sit inside the
// declared range and unordered term pairs may not repeat.
inline RelatednessDataset load_relatedness_tsv(const std::string& path,
                                               double score_lo,
                                               double score_hi) {
  if (!(score_lo < score_hi))
    throw ConfigError("relatedness score range must be non-empty");
  RelatednessDataset ds;
  ds.score_lo = score_lo;
  ds.score_hi = score_hi;
  std::set<std::string> seen;
  for (const std::string& line : read_lines(path)) {
    if (line.empty()) continue;
    std::vector<std::string> f = split_char(line, '\t');
    if (f.size() != 3)
      throw IoError("malformed relatedness row: " + line);
    const char* s = f[2].c_str();
    char* end = nullptr;
    double score = std::strtod(s, &end);
    if (end == s || *end != '\0')
      throw IoError("unparseable relatedness score: " + f[2]);
    if (score < score_lo || score > score_hi)
      throw IoError("relatedness score out of declared range: " + f[2]);
    std::string key = f[0] < f[1] ? f[0] + "\t" + f[1] : f[1] + "\t" + f[0];
    if (!seen.insert(key).second)
      throw IoError("duplicate term pair: " + f[0] + " / " + f[1]);
    ds.pairs.push_back({f[0], f[1], score});
  }
  return ds;
}

// model_sims[i] is the model similarity for ds.pairs[i].
inline double spearman_relatedness(const RelatednessDataset& ds,
                                   const std::vector<double>& model_sims) {
  if (ds.pairs.size() != model_sims.size())
    throw ConfigError("one model similarity per dataset pair required");
  if (ds.pairs.size() < 2)
    throw ConfigError("need at least two scored pairs");
  std::vector<double> golds;
  golds.reserve(ds.pairs.size());
  for (const RelatednessPair& p : ds.pairs) golds.push_back(p.gold);
  return spearman(model_sims, golds);
}

}  // namespace kgcl
