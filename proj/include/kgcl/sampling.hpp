#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "kgcl/contrastive.hpp"
#include "kgcl/corpus.hpp"
#include "kgcl/encoder.hpp"
#include "kgcl/errors.hpp"
#include "kgcl/kge.hpp"
#include "kgcl/rng.hpp"

namespace kgcl {

struct PrototypeSet {
  // concept id -> context indices chosen as prototypes
  std::map<std::string, std::vector<int>> by_concept;
};

struct SimilarityIndex {
  Mat rows;  // one unit-normalized mention embedding per dataset context
  std::vector<std::string> cuis;
  int epoch = 0;
};

struct SamplingConfig {
  int prototypes_per_entity = 2;
  int prototypes_per_step = 4;
  int k = 20;            // positives per prototype
  int m = 30;            // hard negatives per prototype
  int per_term_cap = 4;  // batch-wide cap per (concept, surface form)
  double epsilon = 0.1;  // mining margin
};

// Per concept, prototypes prefer contexts with pairwise-distinct surface
// forms; only once those run out do repeats of an already-used form enter.
// Each concept draws from its own seed stream, so the choice for one concept
// does not move when another concept's contexts change.
inline PrototypeSet build_prototypes(const std::vector<MentionContext>& contexts,
                                     int per_entity, uint64_t seed) {
  if (per_entity < 1) throw ConfigError("prototypes per entity must be >= 1");
  std::map<std::string, std::vector<int>> groups;
  for (size_t i = 0; i < contexts.size(); ++i)
    groups[contexts[i].concept_id].push_back(static_cast<int>(i));

  PrototypeSet out;
  for (auto& [cui, idxs] : groups) {
    Rng rng(seed ^ fnv1a64(cui));
    std::vector<int> pool = idxs;
    rng.shuffle(pool);
    std::vector<int> chosen;
    std::set<std::string> used_terms;
    for (int idx : pool) {
      if (static_cast<int>(chosen.size()) >= per_entity) break;
      if (used_terms.count(contexts[idx].term)) continue;
      chosen.push_back(idx);
      used_terms.insert(contexts[idx].term);
    }
    for (int idx : pool) {
      if (static_cast<int>(chosen.size()) >= per_entity) break;
      if (std::find(chosen.begin(), chosen.end(), idx) != chosen.end()) continue;
      chosen.push_back(idx);
    }
    std::sort(chosen.begin(), chosen.end());
    out.by_concept[cui] = std::move(chosen);
  }
  return out;
}

// Assembles the sequence the encoder actually sees for one stored context
// and pools the mention from it. Returned vector is not normalized.
inline std::vector<double> embed_context(const EncoderConfig& cfg,
                                         const EncoderParams& P,
                                         const Mat* entity,
                                         const MentionContext& ctx,
                                         ForwardTrace* trace,
                                         std::vector<int>* ids_out,
                                         Span* span_out) {
  std::vector<int> ids;
  ids.reserve(ctx.tokens.size() + 2);
  ids.push_back(kClsId);
  ids.insert(ids.end(), ctx.tokens.begin(), ctx.tokens.end());
  ids.push_back(kSepId);
  Span span{ctx.mention_start + 1, ctx.mention_end + 1};
  Mat hidden = encoder_forward(cfg, P, ids, {span}, entity, trace);
  if (ids_out) *ids_out = std::move(ids);
  if (span_out) *span_out = span;
  return pool_mention(hidden, span, cfg.pooling);
}

// Re-embeds every context with the current weights and bumps the stamp.
inline void refresh_index(SimilarityIndex& index, const EncoderConfig& cfg,
                          const EncoderParams& P, const Mat* entity,
                          const std::vector<MentionContext>& contexts) {
  int n = static_cast<int>(contexts.size());
  index.rows = Mat(n, cfg.d_h);
  index.cuis.resize(n);
  for (int i = 0; i < n; ++i) {
    std::vector<double> v =
        l2_normalized(embed_context(cfg, P, entity, contexts[i], nullptr,
                                    nullptr, nullptr));
    std::copy(v.begin(), v.end(), index.rows.row(i));
    index.cuis[i] = contexts[i].concept_id;
  }
  index.epoch += 1;
}

// Exhaustive search: the m most similar rows whose concept differs from
// `exclude`, descending, ties to the lower row index.
inline std::vector<int> top_m_neighbors(const SimilarityIndex& index,
                                        const std::vector<double>& query,
                                        int m, const std::string& exclude) {
  if (m < 1) throw ConfigError("neighbor count must be >= 1");
  if (static_cast<int>(query.size()) != index.rows.cols)
    throw ConfigError("query width does not match the index");
  std::vector<std::pair<double, int>> scored;
  for (int i = 0; i < index.rows.rows; ++i) {
    if (index.cuis[i] == exclude) continue;
    scored.emplace_back(dot(query.data(), index.rows.row(i), index.rows.cols), i);
  }
  std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  if (static_cast<int>(scored.size()) > m) scored.resize(m);
  std::vector<int> out;
  out.reserve(scored.size());
  for (auto& [s, i] : scored) out.push_back(i);
  return out;
}

struct PlannedAnchor {
  int proto_row = -1;
  std::vector<int> positives;
  std::vector<int> negatives;
};

struct BatchPlan {
  std::vector<PlannedAnchor> anchors;
  std::vector<int> rows;  // batch rows, in insertion order, no duplicates
  std::vector<std::string> labels;
};

// Chooses which contexts enter one virtual batch. Pure bookkeeping: no
// encoder work happens here, so plans are cheap and fully seed-determined.
inline BatchPlan plan_batch(const PrototypeSet& protos,
                            const std::vector<MentionContext>& contexts,
                            const SimilarityIndex& index,
                            const SamplingConfig& cfg, uint64_t seed) {
  if (cfg.k < 1 || cfg.m < 1) throw ConfigError("k and m must be >= 1");
  if (cfg.prototypes_per_step < 1)
    throw ConfigError("prototypes per step must be >= 1");
  if (index.rows.rows != static_cast<int>(contexts.size()))
    throw ConfigError("similarity index is stale for this dataset");

  std::map<std::string, std::vector<int>> groups;
  for (size_t i = 0; i < contexts.size(); ++i)
    groups[contexts[i].concept_id].push_back(static_cast<int>(i));

  std::vector<int> flat;
  for (const auto& [cui, idxs] : protos.by_concept)
    for (int idx : idxs) flat.push_back(idx);

  BatchPlan plan;
  if (flat.empty()) return plan;
  Rng rng(seed);
  int want = std::min<int>(cfg.prototypes_per_step, static_cast<int>(flat.size()));
  std::vector<int> picks =
      rng.sample_without_replacement(static_cast<int>(flat.size()), want);

  std::set<int> in_batch;
  std::map<std::string, int> term_count;
  auto try_add = [&](int row) {
    if (in_batch.count(row)) return false;
    std::string key = contexts[row].concept_id + "\t" + contexts[row].term;
    auto it = term_count.find(key);
    int c = it == term_count.end() ? 0 : it->second;
    if (c >= cfg.per_term_cap) return false;
    term_count[key] = c + 1;
    in_batch.insert(row);
    plan.rows.push_back(row);
    plan.labels.push_back(contexts[row].concept_id);
    return true;
  };

  for (int pi : picks) {
    int proto = flat[pi];
    if (!try_add(proto)) continue;
    PlannedAnchor anchor;
    anchor.proto_row = proto;
    const std::string& cui = contexts[proto].concept_id;
    const std::string& proto_term = contexts[proto].term;

    std::vector<int> cands;
    for (int idx : groups[cui])
      if (idx != proto) cands.push_back(idx);
    rng.shuffle(cands);
    // different surface forms float to the front, shuffle order kept within
    // each class
    std::stable_sort(cands.begin(), cands.end(), [&](int a, int b) {
      return (contexts[a].term != proto_term) > (contexts[b].term != proto_term);
    });
    int added = 0;
    for (int idx : cands) {
      if (added >= cfg.k) break;
      if (try_add(idx)) {
        anchor.positives.push_back(idx);
        ++added;
      }
    }

    std::vector<double> q(index.rows.row(proto),
                          index.rows.row(proto) + index.rows.cols);
    for (int idx : top_m_neighbors(index, q, cfg.m, cui))
      if (try_add(idx)) anchor.negatives.push_back(idx);
    plan.anchors.push_back(std::move(anchor));
  }
  return plan;
}

// Pairwise knowledge-graph similarity for the batch labels; concepts the
// model has never seen fall back to the neutral 0.5 inside kge_similarity.
inline Mat build_s_kge(const std::vector<std::string>& labels,
                       const KgeModel& model) {
  int n = static_cast<int>(labels.size());
  Mat s(n, n);
  for (int i = 0; i < n; ++i) {
    s.at(i, i) = kge_similarity(model, labels[i], labels[i]);
    for (int j = i + 1; j < n; ++j) {
      double v = kge_similarity(model, labels[i], labels[j]);
      s.at(i, j) = v;
      s.at(j, i) = v;
    }
  }
  return s;
}

// Fills in everything a loss call needs once the rows are embedded.
inline ContrastiveBatch assemble_batch(const BatchPlan& plan, const Mat& embeddings,
                                       const KgeModel* kge, double epsilon) {
  ContrastiveBatch b;
  b.embeddings = embeddings;
  b.labels = plan.labels;
  b.S = build_similarity(b.embeddings);
  if (kge) {
    b.S_kge = build_s_kge(b.labels, *kge);
    b.has_s_kge = true;
  }
  b.mined = mine_pairs(b.S, b.labels, epsilon);
  return b;
}

// The full sampling step: plan, embed with the current encoder, assemble.
inline ContrastiveBatch sample_batch(const PrototypeSet& protos,
                                     const std::vector<MentionContext>& contexts,
                                     const SimilarityIndex& index,
                                     const SamplingConfig& scfg, uint64_t seed,
                                     const EncoderConfig& cfg,
                                     const EncoderParams& P, const Mat* entity,
                                     const KgeModel* kge) {
  BatchPlan plan = plan_batch(protos, contexts, index, scfg, seed);
  Mat emb(static_cast<int>(plan.rows.size()), cfg.d_h);
  for (size_t i = 0; i < plan.rows.size(); ++i) {
    std::vector<double> v = l2_normalized(
        embed_context(cfg, P, entity, contexts[plan.rows[i]], nullptr, nullptr,
                      nullptr));
    std::copy(v.begin(), v.end(), emb.row(static_cast<int>(i)));
  }
  return assemble_batch(plan, emb, kge, scfg.epsilon);
}

}  // namespace kgcl
