#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "kgcl/contrastive.hpp"
#include "kgcl/encoder.hpp"
#include "kgcl/errors.hpp"
#include "kgcl/kge.hpp"
#include "kgcl/linalg.hpp"
#include "kgcl/rng.hpp"

namespace kgcl {

struct GradCheckEntry {
  std::string name;
  int instances = 0;
  int comparisons = 0;
  double max_rel_err = 0.0;
  double tolerance = 0.0;
  bool ok() const { return max_rel_err < tolerance; }
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  bool all_ok() const {
    for (const GradCheckEntry& e : entries)
      if (!e.ok()) return false;
    return !entries.empty();
  }
};

namespace detail {

inline double rel_gap(double analytic, double fd) {
  double denom = std::max({std::fabs(analytic), std::fabs(fd), 1e-6});
  return std::fabs(analytic - fd) / denom;
}

inline ContrastiveBatch random_loss_batch(Rng& rng, bool with_kge) {
  int m = 6 + rng.uniform_int(6);
  int d = 4 + rng.uniform_int(4);
  int concepts = 2 + rng.uniform_int(3);
  ContrastiveBatch b;
  b.embeddings = Mat(m, d);
  for (int i = 0; i < m; ++i) {
    std::vector<double> v(d);
    for (double& x : v) x = rng.normal(0.0, 1.0);
    v = l2_normalized(v);
    std::copy(v.begin(), v.end(), b.embeddings.row(i));
    b.labels.push_back("c" + std::to_string(rng.uniform_int(concepts)));
  }
  b.S = build_similarity(b.embeddings);
  b.mined = mine_pairs(b.S, b.labels, 0.3);
  if (with_kge) {
    b.has_s_kge = true;
    b.S_kge = Mat(m, m);
    for (int i = 0; i < m; ++i) {
      b.S_kge.at(i, i) = 1.0;
      for (int j = i + 1; j < m; ++j) {
        double v = rng.uniform(0.0, 1.0);
        b.S_kge.at(i, j) = v;
        b.S_kge.at(j, i) = v;
      }
    }
  }
  return b;
}

// Central differences straddle the |S - S_kge| kink if a mined pair sits on
// it; those instances are redrawn.
inline bool near_margin_kink(const ContrastiveBatch& b, double guard) {
  for (size_t i = 0; i < b.mined.pos.size(); ++i) {
    for (int k : b.mined.pos[i])
      if (std::fabs(b.S.at(static_cast<int>(i), k) -
                    b.S_kge.at(static_cast<int>(i), k)) < guard)
        return true;
    for (int k : b.mined.neg[i])
      if (std::fabs(b.S.at(static_cast<int>(i), k) -
                    b.S_kge.at(static_cast<int>(i), k)) < guard)
        return true;
  }
  return false;
}

}  // namespace detail

// dL/dembeddings versus central differences with the mined pairs frozen.
inline GradCheckEntry check_ms_loss(int variant, uint64_t seed, int instances) {
  if (variant < 1 || variant > 3) throw ConfigError("loss variant must be 1..3");
  GradCheckEntry entry;
  entry.name = "ms_loss_v" + std::to_string(variant);
  entry.tolerance = 1e-4;
  // step balances curvature error (~beta^2 h^2) against roundoff (~eps/h)
  const double h = 1e-5;
  MsParams p;
  Rng rng(seed);
  auto eval = [&](const ContrastiveBatch& b) {
    return variant == 1   ? ms_loss_v1(b, p).loss
           : variant == 2 ? ms_loss_v2(b, p).loss
                          : ms_loss_v3(b, p).loss;
  };
  int attempts = 0;
  while (entry.instances < instances) {
    if (++attempts > instances * 20)
      throw NumericError("gradient check could not draw enough clean instances");
    ContrastiveBatch b = detail::random_loss_batch(rng, variant == 3);
    if (variant == 3 && detail::near_margin_kink(b, 1e-3)) continue;
    MsLoss l = variant == 1   ? ms_loss_v1(b, p)
               : variant == 2 ? ms_loss_v2(b, p)
                              : ms_loss_v3(b, p);
    for (int i = 0; i < b.embeddings.rows; ++i)
      for (int j = 0; j < b.embeddings.cols; ++j) {
        ContrastiveBatch bp = b;
        bp.embeddings.at(i, j) += h;
        bp.S = build_similarity(bp.embeddings);
        ContrastiveBatch bm = b;
        bm.embeddings.at(i, j) -= h;
        bm.S = build_similarity(bm.embeddings);
        double fd = (eval(bp) - eval(bm)) / (2.0 * h);
        entry.max_rel_err =
            std::max(entry.max_rel_err, detail::rel_gap(l.grad.at(i, j), fd));
        entry.comparisons += 1;
      }
    entry.instances += 1;
  }
  return entry;
}

// d loss / d projected-mention entries versus central differences.
inline GradCheckEntry check_el_loss(uint64_t seed, int instances) {
  GradCheckEntry entry;
  entry.name = "entity_linking_loss";
  entry.tolerance = 1e-4;
  const double h = 1e-6;
  Rng rng(seed);
  for (int n = 0; n < instances; ++n) {
    int dk = 3 + rng.uniform_int(4);
    int ents = 4 + rng.uniform_int(5);
    int mentions = 1 + rng.uniform_int(3);
    Mat entity(ents, dk);
    for (double& x : entity.a) x = rng.normal(0.0, 1.0);
    std::vector<std::vector<double>> proj(mentions, std::vector<double>(dk));
    std::vector<int> gold;
    for (int m = 0; m < mentions; ++m) {
      for (double& x : proj[m]) x = rng.normal(0.0, 1.0);
      gold.push_back(rng.uniform_int(ents + 1) - 1);  // -1 sometimes
    }
    ElLoss l = el_loss(proj, gold, entity);
    for (int m = 0; m < mentions; ++m)
      for (int j = 0; j < dk; ++j) {
        std::vector<std::vector<double>> pp = proj, pm = proj;
        pp[static_cast<size_t>(m)][static_cast<size_t>(j)] += h;
        pm[static_cast<size_t>(m)][static_cast<size_t>(j)] -= h;
        double fd =
            (el_loss(pp, gold, entity).loss - el_loss(pm, gold, entity).loss) /
            (2.0 * h);
        entry.max_rel_err = std::max(
            entry.max_rel_err,
            detail::rel_gap(l.dproj[static_cast<size_t>(m)][static_cast<size_t>(j)], fd));
        entry.comparisons += 1;
      }
    entry.instances += 1;
  }
  return entry;
}

// d score / d entity and relation entries versus central differences.
inline GradCheckEntry check_kge_score(KgeKind kind, uint64_t seed, int instances) {
  GradCheckEntry entry;
  entry.name = std::string("kge_score_") + kge_kind_name(kind);
  entry.tolerance = 1e-4;
  const double h = 1e-5;
  Rng rng(seed);
  for (int n = 0; n < instances; ++n) {
    int ents = 5 + rng.uniform_int(6);
    int rels = 2 + rng.uniform_int(3);
    int dim = 2 * (2 + rng.uniform_int(3));
    KgeModel m = init_kge(kind, ents, rels, dim, rng.next_u64());
    Triple t;
    t.head = rng.uniform_int(ents);
    t.tail = rng.uniform_int(ents);
    while (t.tail == t.head) t.tail = rng.uniform_int(ents);
    t.relation = rng.uniform_int(rels);
    TripleGrad g = kge_score_grad(m, t);

    auto fd_entry = [&](Mat& table, int row, int j) {
      double keep = table.at(row, j);
      table.at(row, j) = keep + h;
      double up = kge_score(m, t);
      table.at(row, j) = keep - h;
      double down = kge_score(m, t);
      table.at(row, j) = keep;
      return (up - down) / (2.0 * h);
    };
    for (int j = 0; j < dim; ++j) {
      entry.max_rel_err =
          std::max(entry.max_rel_err,
                   detail::rel_gap(g.dh[static_cast<size_t>(j)], fd_entry(m.entity, t.head, j)));
      entry.max_rel_err =
          std::max(entry.max_rel_err,
                   detail::rel_gap(g.dt[static_cast<size_t>(j)], fd_entry(m.entity, t.tail, j)));
      entry.max_rel_err =
          std::max(entry.max_rel_err,
                   detail::rel_gap(g.dr[static_cast<size_t>(j)], fd_entry(m.relation, t.relation, j)));
      entry.comparisons += 3;
    }
    entry.instances += 1;
  }
  return entry;
}

// Full network end to end: the joint loss differentiated to every parameter
// family through the encoder, the injection site and both heads.
inline GradCheckEntry check_joint_loss(uint64_t seed, int instances,
                                       int probes_per_instance = 4) {
  GradCheckEntry entry;
  entry.name = "joint_injection_loss";
  entry.tolerance = 1e-3;
  const double h = 1e-5;

  EncoderConfig cfg;
  cfg.layers = 1;
  cfg.d_h = 8;
  cfg.heads = 2;
  cfg.d_ff = 16;
  cfg.injection_layer = 1;
  cfg.candidates = 2;
  cfg.d_kge = 4;
  cfg.max_seq = 12;
  cfg.vocab = 17;

  Rng rng(seed);
  for (int n = 0; n < instances; ++n) {
    EncoderParams P = init_encoder(cfg, rng.next_u64());
    Mat entity(5, cfg.d_kge);
    for (double& x : entity.a) x = rng.normal(0.0, 1.0);

    int T = 6 + rng.uniform_int(4);
    JointItem it;
    for (int i = 0; i < T; ++i)
      it.ids.push_back(kSpecialCount +
                       rng.uniform_int(cfg.vocab - kSpecialCount));
    it.ids.front() = kClsId;
    it.ids.back() = kSepId;
    int ms = 1 + rng.uniform_int(T - 3);
    it.mentions.push_back({ms, ms + 1});
    it.gold.push_back(rng.uniform_int(entity.rows));
    int target = 1 + rng.uniform_int(T - 2);
    it.targets.push_back(target);
    it.labels.push_back(it.ids[static_cast<size_t>(target)]);
    it.ids[static_cast<size_t>(target)] = kMaskId;
    std::vector<JointItem> batch = {it};

    EncoderParams G = zeros_like(P);
    joint_injection_loss(cfg, P, entity, batch, &G);

    auto reg = P.registry();
    auto greg = G.registry();
    for (int probe = 0; probe < probes_per_instance; ++probe) {
      size_t which = rng.uniform_int(static_cast<int>(reg.size()));
      Mat* param = reg[which].second;
      if (param->a.empty()) continue;
      int flat = rng.uniform_int(static_cast<int>(param->a.size()));
      double keep = param->a[static_cast<size_t>(flat)];
      param->a[static_cast<size_t>(flat)] = keep + h;
      double up = joint_injection_loss(cfg, P, entity, batch, nullptr).total;
      param->a[static_cast<size_t>(flat)] = keep - h;
      double down = joint_injection_loss(cfg, P, entity, batch, nullptr).total;
      param->a[static_cast<size_t>(flat)] = keep;
      double fd = (up - down) / (2.0 * h);
      entry.max_rel_err = std::max(
          entry.max_rel_err,
          detail::rel_gap(greg[which].second->a[static_cast<size_t>(flat)], fd));
      entry.comparisons += 1;
    }
    entry.instances += 1;
  }
  return entry;
}

inline GradCheckReport run_gradient_suite(uint64_t seed = 1, int instances = 100) {
  if (instances < 1) throw ConfigError("gradient suite needs >= 1 instance");
  GradCheckReport rep;
  rep.entries.push_back(check_ms_loss(1, seed ^ 0x101, instances));
  rep.entries.push_back(check_ms_loss(2, seed ^ 0x202, instances));
  rep.entries.push_back(check_ms_loss(3, seed ^ 0x303, instances));
  rep.entries.push_back(check_el_loss(seed ^ 0x404, instances));
  rep.entries.push_back(check_joint_loss(seed ^ 0x505, instances));
  rep.entries.push_back(check_kge_score(KgeKind::TransE, seed ^ 0x606, instances));
  rep.entries.push_back(check_kge_score(KgeKind::ComplEx, seed ^ 0x707, instances));
  rep.entries.push_back(check_kge_score(KgeKind::RotatE, seed ^ 0x808, instances));
  rep.entries.push_back(check_kge_score(KgeKind::SimplE, seed ^ 0x909, instances));
  return rep;
}

inline std::string format_gradcheck(const GradCheckReport& rep) {
  std::string out =
      "loss\tinstances\tcomparisons\tmax_rel_err\ttolerance\tstatus\n";
  for (const GradCheckEntry& e : rep.entries) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.3e\t%.0e", e.max_rel_err, e.tolerance);
    out += e.name + "\t" + std::to_string(e.instances) + "\t" +
           std::to_string(e.comparisons) + "\t" + buf + "\t" +
           (e.ok() ? "pass" : "FAIL") + "\n";
  }
  out += rep.all_ok() ? "all gradients match\n" : "GRADIENT MISMATCH\n";
  return out;
}

}  // namespace kgcl
