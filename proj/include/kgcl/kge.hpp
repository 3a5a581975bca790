#pragma once

// Knowledge-graph embeddings: four bilinear/translational scorers, SGD
// training with uniform negative sampling, filtered link prediction, and a
// concept similarity in [0,1].

#include <cmath>
#include <cstdint>
#include <iostream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "kgcl/corpus.hpp"
#include "kgcl/errors.hpp"
#include "kgcl/io.hpp"
#include "kgcl/linalg.hpp"
#include "kgcl/rng.hpp"

namespace kgcl {

enum class KgeKind : int { TransE = 0, ComplEx = 1, RotatE = 2, SimplE = 3 };

inline const char* kge_kind_name(KgeKind k) {
  switch (k) {
    case KgeKind::TransE: return "transe";
    case KgeKind::ComplEx: return "complex";
    case KgeKind::RotatE: return "rotate";
    case KgeKind::SimplE: return "simple";
  }
  throw ConfigError("unknown kge kind");
}

inline KgeKind kge_kind_from_string(const std::string& s) {
  if (s == "transe") return KgeKind::TransE;
  if (s == "complex") return KgeKind::ComplEx;
  if (s == "rotate") return KgeKind::RotatE;
  if (s == "simple") return KgeKind::SimplE;
  throw ConfigError("unknown kge kind: " + s);
}

// ComplEx/RotatE rows are [real half | imaginary half]; SimplE entity rows
// are [head half | tail half] and relation rows [forward | inverse].
struct KgeModel {
  KgeKind kind = KgeKind::TransE;
  int dim = 0;
  Mat entity;
  Mat relation;
  std::vector<std::string> entity_names;
  std::vector<std::string> relation_names;
  std::unordered_map<std::string, int> entity_ids;

  void set_names(std::vector<std::string> e_names, std::vector<std::string> r_names) {
    entity_names = std::move(e_names);
    relation_names = std::move(r_names);
    entity_ids.clear();
    for (int i = 0; i < static_cast<int>(entity_names.size()); ++i)
      entity_ids.emplace(entity_names[static_cast<size_t>(i)], i);
  }
};

struct KgeConfig {
  int dim = 64;
  int epochs = 100;
  double lr = 0.05;
  int negatives = 1;
  std::uint64_t seed = 1;
};

struct LinkPredReport {
  double hits1 = 0, hits3 = 0, hits10 = 0;
  double mean_rank = 0, mrr = 0;
};

namespace detail {

inline bool needs_even_dim(KgeKind k) { return k != KgeKind::TransE; }

inline void check_triple(const KgeModel& m, const Triple& t) {
  if (t.head < 0 || t.head >= m.entity.rows || t.tail < 0 || t.tail >= m.entity.rows ||
      t.relation < 0 || t.relation >= m.relation.rows)
    throw IoError("kge: triple id out of range, corrupt dataset");
}

// Unit modulus per complex coordinate of one relation row.
inline void project_rotate_row(KgeModel& m, int rel) {
  int half = m.dim / 2;
  double* r = m.relation.row(rel);
  for (int j = 0; j < half; ++j) {
    double c = r[j], d = r[half + j];
    double n = std::sqrt(c * c + d * d);
    if (n > 0) {
      r[j] = c / n;
      r[half + j] = d / n;
    } else {
      r[j] = 1.0;
      r[half + j] = 0.0;
    }
  }
}

}  // namespace detail

inline KgeModel init_kge(KgeKind kind, int num_entities, int num_relations, int dim,
                         std::uint64_t seed) {
  if (num_entities <= 0 || num_relations <= 0 || dim <= 0)
    throw ConfigError("init_kge: empty tables");
  if (detail::needs_even_dim(kind) && dim % 2 != 0)
    throw ConfigError("init_kge: dimension must be even for this kind");
  KgeModel m;
  m.kind = kind;
  m.dim = dim;
  m.entity = Mat(num_entities, dim);
  m.relation = Mat(num_relations, dim);
  Rng rng(seed);
  double bound = 1.0 / std::sqrt(static_cast<double>(dim));
  for (double& x : m.entity.a) x = rng.uniform(-bound, bound);
  if (kind == KgeKind::RotatE) {
    int half = dim / 2;
    for (int i = 0; i < num_relations; ++i) {
      double* r = m.relation.row(i);
      for (int j = 0; j < half; ++j) {
        double phase = rng.uniform(-3.14159265358979323846, 3.14159265358979323846);
        r[j] = std::cos(phase);
        r[half + j] = std::sin(phase);
      }
    }
  } else {
    for (double& x : m.relation.a) x = rng.uniform(-bound, bound);
  }
  return m;
}

inline double kge_score(const KgeModel& m, const Triple& t) {
  detail::check_triple(m, t);
  const double* h = m.entity.row(t.head);
  const double* r = m.relation.row(t.relation);
  const double* tt = m.entity.row(t.tail);
  int d = m.dim;
  switch (m.kind) {
    case KgeKind::TransE: {
      double s = 0;
      for (int j = 0; j < d; ++j) {
        double v = h[j] + r[j] - tt[j];
        s += v * v;
      }
      return -std::sqrt(s);
    }
    case KgeKind::ComplEx: {
      int half = d / 2;
      double s = 0;
      for (int j = 0; j < half; ++j) {
        double a = h[j], b = h[half + j];
        double c = r[j], dd = r[half + j];
        double e = tt[j], f = tt[half + j];
        s += (a * c - b * dd) * e + (a * dd + b * c) * f;
      }
      return s;
    }
    case KgeKind::RotatE: {
      int half = d / 2;
      double s = 0;
      for (int j = 0; j < half; ++j) {
        double a = h[j], b = h[half + j];
        double c = r[j], dd = r[half + j];
        double e = tt[j], f = tt[half + j];
        double dre = a * c - b * dd - e;
        double dim_ = a * dd + b * c - f;
        s += std::sqrt(dre * dre + dim_ * dim_);
      }
      return -s;
    }
    case KgeKind::SimplE: {
      int half = d / 2;
      double s = 0;
      for (int j = 0; j < half; ++j) {
        s += h[j] * r[j] * tt[half + j];          // forward: head-role, fwd rel, tail-role
        s += tt[j] * r[half + j] * h[half + j];   // inverse direction
      }
      return 0.5 * s;
    }
  }
  throw ConfigError("kge_score: unknown kind");
}

struct TripleGrad {
  double score = 0;
  std::vector<double> dh, dr, dt;  // wrt the full stored rows
};

inline TripleGrad kge_score_grad(const KgeModel& m, const Triple& t) {
  detail::check_triple(m, t);
  const double* h = m.entity.row(t.head);
  const double* r = m.relation.row(t.relation);
  const double* tt = m.entity.row(t.tail);
  int d = m.dim;
  TripleGrad g;
  g.score = kge_score(m, t);  // one accumulation path for the value itself
  g.dh.assign(static_cast<size_t>(d), 0.0);
  g.dr.assign(static_cast<size_t>(d), 0.0);
  g.dt.assign(static_cast<size_t>(d), 0.0);

  switch (m.kind) {
    case KgeKind::TransE: {
      double s = 0;
      std::vector<double> v(static_cast<size_t>(d));
      for (int j = 0; j < d; ++j) {
        v[static_cast<size_t>(j)] = h[j] + r[j] - tt[j];
        s += v[static_cast<size_t>(j)] * v[static_cast<size_t>(j)];
      }
      double norm = std::sqrt(s);
      if (norm > 1e-12) {
        for (int j = 0; j < d; ++j) {
          double u = v[static_cast<size_t>(j)] / norm;
          g.dh[static_cast<size_t>(j)] = -u;
          g.dr[static_cast<size_t>(j)] = -u;
          g.dt[static_cast<size_t>(j)] = u;
        }
      }
      return g;
    }
    case KgeKind::ComplEx: {
      int half = d / 2;
      for (int j = 0; j < half; ++j) {
        double a = h[j], b = h[half + j];
        double c = r[j], dd = r[half + j];
        double e = tt[j], f = tt[half + j];
        g.dh[static_cast<size_t>(j)] = c * e + dd * f;
        g.dh[static_cast<size_t>(half + j)] = -dd * e + c * f;
        g.dr[static_cast<size_t>(j)] = a * e + b * f;
        g.dr[static_cast<size_t>(half + j)] = -b * e + a * f;
        g.dt[static_cast<size_t>(j)] = a * c - b * dd;
        g.dt[static_cast<size_t>(half + j)] = a * dd + b * c;
      }
      return g;
    }
    case KgeKind::RotatE: {
      int half = d / 2;
      for (int j = 0; j < half; ++j) {
        double a = h[j], b = h[half + j];
        double c = r[j], dd = r[half + j];
        double e = tt[j], f = tt[half + j];
        double dre = a * c - b * dd - e;
        double dim_ = a * dd + b * c - f;
        double mod = std::sqrt(dre * dre + dim_ * dim_);
        if (mod > 1e-12) {
          double gre = -dre / mod, gim = -dim_ / mod;
          g.dh[static_cast<size_t>(j)] = gre * c + gim * dd;
          g.dh[static_cast<size_t>(half + j)] = -gre * dd + gim * c;
          g.dr[static_cast<size_t>(j)] = gre * a + gim * b;
          g.dr[static_cast<size_t>(half + j)] = -gre * b + gim * a;
          g.dt[static_cast<size_t>(j)] = -gre;
          g.dt[static_cast<size_t>(half + j)] = -gim;
        }
      }
      return g;
    }
    case KgeKind::SimplE: {
      int half = d / 2;
      for (int j = 0; j < half; ++j) {
        double h1 = h[j], h2 = h[half + j];
        double r1 = r[j], r2 = r[half + j];
        double t1 = tt[j], t2 = tt[half + j];
        g.dh[static_cast<size_t>(j)] = 0.5 * r1 * t2;
        g.dh[static_cast<size_t>(half + j)] = 0.5 * t1 * r2;
        g.dr[static_cast<size_t>(j)] = 0.5 * h1 * t2;
        g.dr[static_cast<size_t>(half + j)] = 0.5 * t1 * h2;
        g.dt[static_cast<size_t>(j)] = 0.5 * r2 * h2;
        g.dt[static_cast<size_t>(half + j)] = 0.5 * h1 * r1;
      }
      return g;
    }
  }
  throw ConfigError("kge_score_grad: unknown kind");
}

struct KgeTrainResult {
  KgeModel model;
  std::vector<double> epoch_losses;
};

// Plain SGD on a logistic loss: softplus(-score) for observed triples,
// softplus(score) for uniformly corrupted ones. Resumable: epochs continue
// the given model and rng stream, so segmented runs equal one long run.
inline std::vector<double> train_kge_epochs(KgeModel& m,
                                            const std::vector<Triple>& triples,
                                            int epochs, double lr, int negatives,
                                            Rng& rng) {
  if (triples.empty()) throw ConfigError("train_kge: no training triples");
  int num_entities = m.entity.rows;
  std::vector<int> order(triples.size());

  auto apply = [&](const Triple& t, double coeff) {
    TripleGrad g = kge_score_grad(m, t);
    double* h = m.entity.row(t.head);
    double* r = m.relation.row(t.relation);
    double* tt = m.entity.row(t.tail);
    for (int j = 0; j < m.dim; ++j) {
      h[j] -= lr * coeff * g.dh[static_cast<size_t>(j)];
      r[j] -= lr * coeff * g.dr[static_cast<size_t>(j)];
      tt[j] -= lr * coeff * g.dt[static_cast<size_t>(j)];
    }
    if (m.kind == KgeKind::RotatE) detail::project_rotate_row(m, t.relation);
  };

  std::vector<double> losses;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    // order restarts from identity so each epoch's permutation depends only
    // on the rng stream position, keeping segmented runs equal to long ones
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    rng.shuffle(order);
    double loss = 0;
    for (int idx : order) {
      const Triple& pos = triples[static_cast<size_t>(idx)];
      double s_pos = kge_score(m, pos);
      loss += softplus(-s_pos);
      apply(pos, -sigmoid(-s_pos));
      for (int k = 0; k < negatives; ++k) {
        Triple neg = pos;
        if (rng.uniform_int(2) == 0) neg.head = rng.uniform_int(num_entities);
        else neg.tail = rng.uniform_int(num_entities);
        double s_neg = kge_score(m, neg);
        loss += softplus(s_neg);
        apply(neg, sigmoid(s_neg));
      }
    }
    if (!std::isfinite(loss))
      throw NumericError("train_kge: non-finite loss at epoch " + std::to_string(epoch));
    losses.push_back(loss);
  }
  return losses;
}

inline KgeTrainResult train_kge(const std::vector<Triple>& triples, int num_entities,
                                int num_relations, KgeKind kind, const KgeConfig& cfg) {
  KgeTrainResult res;
  res.model = init_kge(kind, num_entities, num_relations, cfg.dim, cfg.seed);
  Rng rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
  res.epoch_losses =
      train_kge_epochs(res.model, triples, cfg.epochs, cfg.lr, cfg.negatives, rng);
  return res;
}

// Filtered ranking over both corruption directions; ties contribute the mean
// rank of their group.
inline LinkPredReport link_prediction_eval(const KgeModel& m, const std::vector<Triple>& eval_triples,
                                           const std::vector<Triple>& all_known) {
  if (eval_triples.empty()) throw ConfigError("link_prediction_eval: no eval triples");
  auto key = [&](int h, int r, int t) {
    return (static_cast<std::uint64_t>(h) * static_cast<std::uint64_t>(m.relation.rows) +
            static_cast<std::uint64_t>(r)) *
               static_cast<std::uint64_t>(m.entity.rows) +
           static_cast<std::uint64_t>(t);
  };
  std::unordered_set<std::uint64_t> known;
  known.reserve(all_known.size() * 2);
  for (const Triple& t : all_known) known.insert(key(t.head, t.relation, t.tail));

  double sum_rank = 0, sum_rr = 0, n_h1 = 0, n_h3 = 0, n_h10 = 0;
  long n_queries = 0;

  auto rank_one = [&](const Triple& q, bool corrupt_tail) {
    double s_true = kge_score(m, q);
    long better = 0, equal = 1;
    for (int c = 0; c < m.entity.rows; ++c) {
      Triple cand = q;
      if (corrupt_tail) {
        if (c == q.tail) continue;
        cand.tail = c;
        if (known.count(key(cand.head, cand.relation, cand.tail))) continue;
      } else {
        if (c == q.head) continue;
        cand.head = c;
        if (known.count(key(cand.head, cand.relation, cand.tail))) continue;
      }
      double s = kge_score(m, cand);
      if (s > s_true) ++better;
      else if (s == s_true) ++equal;
    }
    double rank = static_cast<double>(better) + (static_cast<double>(equal) + 1.0) / 2.0;
    sum_rank += rank;
    sum_rr += 1.0 / rank;
    if (rank <= 1.0) ++n_h1;
    if (rank <= 3.0) ++n_h3;
    if (rank <= 10.0) ++n_h10;
    ++n_queries;
  };

  for (const Triple& q : eval_triples) {
    detail::check_triple(m, q);
    rank_one(q, true);
    rank_one(q, false);
  }

  LinkPredReport rep;
  double n = static_cast<double>(n_queries);
  rep.hits1 = n_h1 / n;
  rep.hits3 = n_h3 / n;
  rep.hits10 = n_h10 / n;
  rep.mean_rank = sum_rank / n;
  rep.mrr = sum_rr / n;
  return rep;
}

// Columns follow the usual link-prediction report order.
inline std::string format_link_pred_tsv(const LinkPredReport& r) {
  std::string out = "hits1\thits3\thits10\tmr\tmrr\n";
  out += format_double(r.hits1);
  out += '\t';
  out += format_double(r.hits3);
  out += '\t';
  out += format_double(r.hits10);
  out += '\t';
  out += format_double(r.mean_rank);
  out += '\t';
  out += format_double(r.mrr);
  out += '\n';
  return out;
}

// Cosine over the flattened rows mapped to [0,1]; unknown concepts and
// zero-norm rows fall back to indifferent 0.5.
inline double kge_similarity(const KgeModel& m, const std::string& concept_a,
                             const std::string& concept_b) {
  auto ia = m.entity_ids.find(concept_a);
  auto ib = m.entity_ids.find(concept_b);
  if (ia == m.entity_ids.end() || ib == m.entity_ids.end()) return 0.5;
  bool degenerate = false;
  double cos = cosine(m.entity.row(ia->second), m.entity.row(ib->second), m.dim, &degenerate);
  if (degenerate) {
    std::cerr << "kge_similarity: zero-norm entity row, returning 0.5\n";
    return 0.5;
  }
  return (cos + 1.0) / 2.0;
}

inline void save_kge(const std::string& path, const KgeModel& m) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path);
  write_pod<std::int32_t>(f, static_cast<std::int32_t>(m.kind));
  write_pod<std::int32_t>(f, m.entity.rows);
  write_pod<std::int32_t>(f, m.relation.rows);
  write_pod<std::int32_t>(f, m.dim);
  for (double x : m.entity.a) write_pod<double>(f, x);
  for (double x : m.relation.a) write_pod<double>(f, x);
  if (!f) throw IoError("short write: " + path);
  f.close();

  std::string names = std::string(path) + ".names.tsv";
  std::string out;
  for (size_t i = 0; i < m.entity_names.size(); ++i)
    out += "e\t" + std::to_string(i) + "\t" + m.entity_names[i] + "\n";
  for (size_t i = 0; i < m.relation_names.size(); ++i)
    out += "r\t" + std::to_string(i) + "\t" + m.relation_names[i] + "\n";
  spit(names, out);
}

inline KgeModel load_kge(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for reading: " + path);
  KgeModel m;
  std::int32_t kind = 0, ne = 0, nr = 0, dim = 0;
  read_pod(f, kind);
  read_pod(f, ne);
  read_pod(f, nr);
  read_pod(f, dim);
  if (kind < 0 || kind > 3 || ne <= 0 || nr <= 0 || dim <= 0)
    throw IoError("kge checkpoint: bad header in " + path);
  m.kind = static_cast<KgeKind>(kind);
  m.dim = dim;
  m.entity = Mat(ne, dim);
  m.relation = Mat(nr, dim);
  for (double& x : m.entity.a) read_pod(f, x);
  for (double& x : m.relation.a) read_pod(f, x);

  std::vector<std::string> e_names(static_cast<size_t>(ne)), r_names(static_cast<size_t>(nr));
  for (const std::string& line : read_lines(std::string(path) + ".names.tsv")) {
    if (line.empty()) continue;
    std::vector<std::string> parts = split_char(line, '\t');
    if (parts.size() != 3) throw IoError("kge names sidecar: bad line in " + path);
    size_t id = static_cast<size_t>(std::stol(parts[1]));
    if (parts[0] == "e" && id < e_names.size()) e_names[id] = parts[2];
    else if (parts[0] == "r" && id < r_names.size()) r_names[id] = parts[2];
    else throw IoError("kge names sidecar: id out of range in " + path);
  }
  m.set_names(std::move(e_names), std::move(r_names));
  return m;
}

}  // namespace kgcl
