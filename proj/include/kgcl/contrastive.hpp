#pragma once

// Multi-similarity loss, three variants: fixed margin, split positive and
// negative margins, and a per-pair margin driven by graph-embedding
// similarity. Mining is shared and uses the static epsilon conditions.

#include <cmath>
#include <string>
#include <vector>

#include "kgcl/errors.hpp"
#include "kgcl/linalg.hpp"

namespace kgcl {

struct MsParams {
  double alpha = 2.0;
  double beta = 50.0;
  double epsilon = 0.1;
  double lambda = 0.5;    // shared margin
  double lambda_p = 1.0;  // split positive margin
  double lambda_n = 0.5;  // split negative margin
};

struct MinedPairs {
  std::vector<std::vector<int>> pos, neg;  // per-anchor kept indices
};

struct ContrastiveBatch {
  Mat embeddings;                  // m x d, unit rows
  std::vector<std::string> labels; // concept id per row
  Mat S;                           // m x m cosine, exactly symmetric
  Mat S_kge;                       // m x m in [0,1], only when has_s_kge
  bool has_s_kge = false;
  MinedPairs mined;
};

// Upper triangle computed once and mirrored, so S is symmetric by bytes.
inline Mat build_similarity(const Mat& embeddings) {
  int m = embeddings.rows;
  Mat S(m, m);
  for (int i = 0; i < m; ++i) {
    S.at(i, i) = dot(embeddings.row(i), embeddings.row(i), embeddings.cols);
    for (int j = i + 1; j < m; ++j) {
      double s = dot(embeddings.row(i), embeddings.row(j), embeddings.cols);
      S.at(i, j) = s;
      S.at(j, i) = s;
    }
  }
  return S;
}

// Keep a negative only when it is harder than the easiest positive minus
// epsilon; keep a positive only when it is easier than the hardest negative
// plus epsilon. Anchors without both candidate kinds yield empty sets.
inline MinedPairs mine_pairs(const Mat& S, const std::vector<std::string>& labels, double epsilon) {
  int m = S.rows;
  if (S.cols != m || static_cast<int>(labels.size()) != m)
    throw ConfigError("mine_pairs: S must be square with one label per row");
  MinedPairs mp;
  mp.pos.resize(static_cast<size_t>(m));
  mp.neg.resize(static_cast<size_t>(m));
  for (int i = 0; i < m; ++i) {
    std::vector<int> cand_pos, cand_neg;
    for (int k = 0; k < m; ++k) {
      if (k == i) continue;
      if (labels[static_cast<size_t>(k)] == labels[static_cast<size_t>(i)]) cand_pos.push_back(k);
      else cand_neg.push_back(k);
    }
    if (cand_pos.empty() || cand_neg.empty()) continue;
    double min_pos = S.at(i, cand_pos[0]);
    for (int k : cand_pos) min_pos = std::min(min_pos, S.at(i, k));
    double max_neg = S.at(i, cand_neg[0]);
    for (int k : cand_neg) max_neg = std::max(max_neg, S.at(i, k));
    for (int k : cand_neg)
      if (S.at(i, k) > min_pos - epsilon) mp.neg[static_cast<size_t>(i)].push_back(k);
    for (int k : cand_pos)
      if (S.at(i, k) < max_neg + epsilon) mp.pos[static_cast<size_t>(i)].push_back(k);
  }
  return mp;
}

struct MsLoss {
  double loss = 0;
  Mat grad;  // dL/dembeddings, m x d
};

namespace detail {

inline void check_batch(const ContrastiveBatch& b) {
  int m = b.S.rows;
  if (b.S.cols != m) throw ConfigError("ms_loss: S must be square");
  if (static_cast<int>(b.labels.size()) != m) throw ConfigError("ms_loss: one label per row");
  if (b.embeddings.rows != m) throw ConfigError("ms_loss: embeddings row count mismatch");
  if (static_cast<int>(b.mined.pos.size()) != m || static_cast<int>(b.mined.neg.size()) != m)
    throw ConfigError("ms_loss: mined pairs not attached");
}

// dL/dembeddings = (G + G^T) E for S = E E^T.
inline Mat chain_to_embeddings(const Mat& G, const Mat& E) {
  int m = G.rows;
  Mat sym(m, m);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j) sym.at(i, j) = G.at(i, j) + G.at(j, i);
  return matmul(sym, E);
}

}  // namespace detail

// L = (1/m) sum_i [ ln(1+sum_P e^{-a(S-l)})/a + ln(1+sum_N e^{b(S-l)})/b ]
inline MsLoss ms_loss_v1(const ContrastiveBatch& b, const MsParams& p) {
  detail::check_batch(b);
  int m = b.S.rows;
  Mat G(m, m);
  G.zero();
  double total = 0;
  for (int i = 0; i < m; ++i) {
    const auto& P = b.mined.pos[static_cast<size_t>(i)];
    const auto& N = b.mined.neg[static_cast<size_t>(i)];
    if (P.empty() && N.empty()) continue;
    double pos_sum = 0, neg_sum = 0;
    for (int k : P) pos_sum += std::exp(-p.alpha * (b.S.at(i, k) - p.lambda));
    for (int k : N) neg_sum += std::exp(p.beta * (b.S.at(i, k) - p.lambda));
    total += std::log1p(pos_sum) / p.alpha + std::log1p(neg_sum) / p.beta;
    for (int k : P)
      G.at(i, k) -= std::exp(-p.alpha * (b.S.at(i, k) - p.lambda)) / ((1.0 + pos_sum) * m);
    for (int k : N)
      G.at(i, k) += std::exp(p.beta * (b.S.at(i, k) - p.lambda)) / ((1.0 + neg_sum) * m);
  }
  MsLoss out;
  out.loss = total / m;
  out.grad = detail::chain_to_embeddings(G, b.embeddings);
  return out;
}

// Split margins: lambda_p inside the positive term, lambda_n inside the
// negative term.
inline MsLoss ms_loss_v2(const ContrastiveBatch& b, const MsParams& p) {
  detail::check_batch(b);
  int m = b.S.rows;
  Mat G(m, m);
  G.zero();
  double total = 0;
  for (int i = 0; i < m; ++i) {
    const auto& P = b.mined.pos[static_cast<size_t>(i)];
    const auto& N = b.mined.neg[static_cast<size_t>(i)];
    if (P.empty() && N.empty()) continue;
    double pos_sum = 0, neg_sum = 0;
    for (int k : P) pos_sum += std::exp(-p.alpha * (b.S.at(i, k) - p.lambda_p));
    for (int k : N) neg_sum += std::exp(p.beta * (b.S.at(i, k) - p.lambda_n));
    total += std::log1p(pos_sum) / p.alpha + std::log1p(neg_sum) / p.beta;
    for (int k : P)
      G.at(i, k) -= std::exp(-p.alpha * (b.S.at(i, k) - p.lambda_p)) / ((1.0 + pos_sum) * m);
    for (int k : N)
      G.at(i, k) += std::exp(p.beta * (b.S.at(i, k) - p.lambda_n)) / ((1.0 + neg_sum) * m);
  }
  MsLoss out;
  out.loss = total / m;
  out.grad = detail::chain_to_embeddings(G, b.embeddings);
  return out;
}

// Per-pair margin |S - S_kge|: positives use exponent -a(S - |S - S_kge|),
// negatives b(S - (1 - |S - S_kge|)). The graph similarity is a constant;
// the absolute value contributes sign(S - S_kge), zero at the kink.
inline MsLoss ms_loss_v3(const ContrastiveBatch& b, const MsParams& p) {
  detail::check_batch(b);
  if (!b.has_s_kge)
    throw ConfigError("ms_loss_v3: batch has no graph similarities; use ms_loss_v1 or ms_loss_v2");
  if (b.S_kge.rows != b.S.rows || b.S_kge.cols != b.S.cols)
    throw ConfigError("ms_loss_v3: S_kge shape mismatch");
  int m = b.S.rows;
  Mat G(m, m);
  G.zero();
  double total = 0;
  for (int i = 0; i < m; ++i) {
    const auto& P = b.mined.pos[static_cast<size_t>(i)];
    const auto& N = b.mined.neg[static_cast<size_t>(i)];
    if (P.empty() && N.empty()) continue;
    double pos_sum = 0, neg_sum = 0;
    for (int k : P) {
      double diff = b.S.at(i, k) - b.S_kge.at(i, k);
      pos_sum += std::exp(-p.alpha * (b.S.at(i, k) - std::fabs(diff)));
    }
    for (int k : N) {
      double diff = b.S.at(i, k) - b.S_kge.at(i, k);
      neg_sum += std::exp(p.beta * (b.S.at(i, k) - (1.0 - std::fabs(diff))));
    }
    total += std::log1p(pos_sum) / p.alpha + std::log1p(neg_sum) / p.beta;
    for (int k : P) {
      double diff = b.S.at(i, k) - b.S_kge.at(i, k);
      double sgn = diff > 0 ? 1.0 : (diff < 0 ? -1.0 : 0.0);
      double term = std::exp(-p.alpha * (b.S.at(i, k) - std::fabs(diff)));
      G.at(i, k) -= (1.0 - sgn) * term / ((1.0 + pos_sum) * m);
    }
    for (int k : N) {
      double diff = b.S.at(i, k) - b.S_kge.at(i, k);
      double sgn = diff > 0 ? 1.0 : (diff < 0 ? -1.0 : 0.0);
      double term = std::exp(p.beta * (b.S.at(i, k) - (1.0 - std::fabs(diff))));
      G.at(i, k) += (1.0 + sgn) * term / ((1.0 + neg_sum) * m);
    }
  }
  MsLoss out;
  out.loss = total / m;
  out.grad = detail::chain_to_embeddings(G, b.embeddings);
  return out;
}

}  // namespace kgcl
