#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "kgcl/errors.hpp"
#include "kgcl/io.hpp"
#include "kgcl/linalg.hpp"
#include "kgcl/rng.hpp"
#include "kgcl/vocab.hpp"

namespace kgcl {

enum class Pooling { Mean, Cls };

inline Pooling pooling_from_string(const std::string& s) {
  if (s == "mean") return Pooling::Mean;
  if (s == "cls") return Pooling::Cls;
  throw ConfigError("unknown pooling strategy: " + s);
}

inline const char* pooling_name(Pooling p) {
  return p == Pooling::Mean ? "mean" : "cls";
}

// Token index span [start, end) inside one sequence.
struct Span {
  int start = 0;
  int end = 0;
  int len() const { return end - start; }
};

struct EncoderConfig {
  int layers = 4;
  int d_h = 64;
  int heads = 4;
  int d_ff = 0;             // 0 means 4 * d_h
  int injection_layer = 0;  // 1-based; 0 disables entity injection
  int candidates = 8;
  int d_kge = 0;            // entity embedding width, required when injecting
  Pooling pooling = Pooling::Mean;
  int max_seq = 128;
  int vocab = 0;
  bool el_candidates_only = false;  // restrict the linking softmax to the
                                    // retrieved candidates instead of all
                                    // entities

  int ff_dim() const { return d_ff > 0 ? d_ff : 4 * d_h; }

  void validate() const {
    if (layers < 1) throw ConfigError("encoder needs at least one layer");
    if (d_h < 1 || heads < 1) throw ConfigError("hidden dim and heads must be positive");
    if (d_h % heads != 0) throw ConfigError("hidden dim must be divisible by heads");
    if (max_seq < 1) throw ConfigError("max sequence length must be positive");
    if (vocab < 1) throw ConfigError("vocabulary size must be positive");
    if (candidates < 1) throw ConfigError("candidate count must be >= 1");
    if (injection_layer < 0 || injection_layer > layers)
      throw ConfigError("injection layer must lie in [1, layers], or 0 to disable");
    if (injection_layer > 0 && d_kge < 1)
      throw ConfigError("injection requires the entity embedding width");
    if (d_ff < 0) throw ConfigError("feed-forward dim must be positive");
  }
};

inline KvConfig encoder_config_to_kv(const EncoderConfig& c) {
  KvConfig kv;
  kv["layers"] = std::to_string(c.layers);
  kv["d_h"] = std::to_string(c.d_h);
  kv["heads"] = std::to_string(c.heads);
  kv["d_ff"] = std::to_string(c.d_ff);
  kv["injection_layer"] = std::to_string(c.injection_layer);
  kv["candidates"] = std::to_string(c.candidates);
  kv["d_kge"] = std::to_string(c.d_kge);
  kv["pooling"] = pooling_name(c.pooling);
  kv["max_seq"] = std::to_string(c.max_seq);
  kv["vocab"] = std::to_string(c.vocab);
  kv["el_candidates_only"] = c.el_candidates_only ? "1" : "0";
  return kv;
}

inline int kv_int(const KvConfig& kv, const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end()) throw ConfigError("missing config key: " + key);
  try {
    size_t pos = 0;
    int v = std::stoi(it->second, &pos);
    if (pos != it->second.size()) throw ConfigError("bad integer for " + key);
    return v;
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception&) {
    throw ConfigError("bad integer for " + key + ": " + it->second);
  }
}

inline EncoderConfig encoder_config_from_kv(const KvConfig& kv) {
  EncoderConfig c;
  c.layers = kv_int(kv, "layers");
  c.d_h = kv_int(kv, "d_h");
  c.heads = kv_int(kv, "heads");
  c.d_ff = kv_int(kv, "d_ff");
  c.injection_layer = kv_int(kv, "injection_layer");
  c.candidates = kv_int(kv, "candidates");
  c.d_kge = kv_int(kv, "d_kge");
  auto it = kv.find("pooling");
  if (it == kv.end()) throw ConfigError("missing config key: pooling");
  c.pooling = pooling_from_string(it->second);
  c.max_seq = kv_int(kv, "max_seq");
  c.vocab = kv_int(kv, "vocab");
  c.el_candidates_only = kv_int(kv, "el_candidates_only") != 0;
  c.validate();
  return c;
}

struct LayerParams {
  Mat wq, bq, wk, bk, wv, bv, wo, bo;
  Mat ln1_g, ln1_b;
  Mat w1, b1, w2, b2;
  Mat ln2_g, ln2_b;
};

struct EncoderParams {
  Mat tok;  // vocab x d_h, also the tied MLM output matrix
  Mat pos;  // max_seq x d_h
  Mat ln_emb_g, ln_emb_b;
  std::vector<LayerParams> layers;
  Mat mlm_bias;  // 1 x vocab
  bool has_linker = false;
  Mat w_proj;  // d_h x d_kge
  Mat b_proj;  // 1 x d_kge
  Mat ln_inj_g, ln_inj_b;

  // Stable name -> matrix listing; the order here is the checkpoint and
  // optimizer slot order, so it must never change.
  template <class Self, class MatT>
  static std::vector<std::pair<std::string, MatT*>> registry_impl(Self& s) {
    std::vector<std::pair<std::string, MatT*>> r;
    r.emplace_back("tok_emb", &s.tok);
    r.emplace_back("pos_emb", &s.pos);
    r.emplace_back("ln_emb.g", &s.ln_emb_g);
    r.emplace_back("ln_emb.b", &s.ln_emb_b);
    for (size_t l = 0; l < s.layers.size(); ++l) {
      std::string p = "layer" + std::to_string(l) + ".";
      auto& L = s.layers[l];
      r.emplace_back(p + "wq", &L.wq);
      r.emplace_back(p + "bq", &L.bq);
      r.emplace_back(p + "wk", &L.wk);
      r.emplace_back(p + "bk", &L.bk);
      r.emplace_back(p + "wv", &L.wv);
      r.emplace_back(p + "bv", &L.bv);
      r.emplace_back(p + "wo", &L.wo);
      r.emplace_back(p + "bo", &L.bo);
      r.emplace_back(p + "ln1.g", &L.ln1_g);
      r.emplace_back(p + "ln1.b", &L.ln1_b);
      r.emplace_back(p + "w1", &L.w1);
      r.emplace_back(p + "b1", &L.b1);
      r.emplace_back(p + "w2", &L.w2);
      r.emplace_back(p + "b2", &L.b2);
      r.emplace_back(p + "ln2.g", &L.ln2_g);
      r.emplace_back(p + "ln2.b", &L.ln2_b);
    }
    r.emplace_back("mlm_bias", &s.mlm_bias);
    if (s.has_linker) {
      r.emplace_back("proj.w", &s.w_proj);
      r.emplace_back("proj.b", &s.b_proj);
      r.emplace_back("ln_inj.g", &s.ln_inj_g);
      r.emplace_back("ln_inj.b", &s.ln_inj_b);
    }
    return r;
  }

  std::vector<std::pair<std::string, Mat*>> registry() {
    return registry_impl<EncoderParams, Mat>(*this);
  }
  std::vector<std::pair<std::string, const Mat*>> registry() const {
    return registry_impl<const EncoderParams, const Mat>(*this);
  }

  std::vector<Mat*> mats() {
    std::vector<Mat*> v;
    for (auto& [name, m] : registry()) v.push_back(m);
    return v;
  }
};

inline EncoderParams make_encoder_params(const EncoderConfig& cfg) {
  cfg.validate();
  EncoderParams p;
  p.tok = Mat(cfg.vocab, cfg.d_h);
  p.pos = Mat(cfg.max_seq, cfg.d_h);
  p.ln_emb_g = Mat(1, cfg.d_h);
  p.ln_emb_b = Mat(1, cfg.d_h);
  p.layers.resize(cfg.layers);
  for (auto& L : p.layers) {
    L.wq = Mat(cfg.d_h, cfg.d_h);
    L.bq = Mat(1, cfg.d_h);
    L.wk = Mat(cfg.d_h, cfg.d_h);
    L.bk = Mat(1, cfg.d_h);
    L.wv = Mat(cfg.d_h, cfg.d_h);
    L.bv = Mat(1, cfg.d_h);
    L.wo = Mat(cfg.d_h, cfg.d_h);
    L.bo = Mat(1, cfg.d_h);
    L.ln1_g = Mat(1, cfg.d_h);
    L.ln1_b = Mat(1, cfg.d_h);
    L.w1 = Mat(cfg.d_h, cfg.ff_dim());
    L.b1 = Mat(1, cfg.ff_dim());
    L.w2 = Mat(cfg.ff_dim(), cfg.d_h);
    L.b2 = Mat(1, cfg.d_h);
    L.ln2_g = Mat(1, cfg.d_h);
    L.ln2_b = Mat(1, cfg.d_h);
  }
  p.mlm_bias = Mat(1, cfg.vocab);
  if (cfg.injection_layer > 0) {
    p.has_linker = true;
    p.w_proj = Mat(cfg.d_h, cfg.d_kge);
    p.b_proj = Mat(1, cfg.d_kge);
    p.ln_inj_g = Mat(1, cfg.d_h);
    p.ln_inj_b = Mat(1, cfg.d_h);
  }
  return p;
}

inline EncoderParams init_encoder(const EncoderConfig& cfg, uint64_t seed) {
  EncoderParams p = make_encoder_params(cfg);
  Rng rng(seed);
  auto fill_normal = [&](Mat& m) {
    for (double& x : m.a) x = rng.normal(0.0, 0.02);
  };
  auto fill_ones = [](Mat& m) { std::fill(m.a.begin(), m.a.end(), 1.0); };
  fill_normal(p.tok);
  fill_normal(p.pos);
  fill_ones(p.ln_emb_g);
  for (auto& L : p.layers) {
    fill_normal(L.wq);
    fill_normal(L.wk);
    fill_normal(L.wv);
    fill_normal(L.wo);
    fill_ones(L.ln1_g);
    fill_normal(L.w1);
    fill_normal(L.w2);
    fill_ones(L.ln2_g);
  }
  if (p.has_linker) {
    fill_normal(p.w_proj);
    fill_ones(p.ln_inj_g);
  }
  return p;
}

inline EncoderParams zeros_like(const EncoderParams& p) {
  EncoderParams g = p;
  for (auto& [name, m] : g.registry()) m->zero();
  return g;
}

// ---- primitive pieces --------------------------------------------------

constexpr double kLnEps = 1e-12;

inline double gelu(double x) {
  return 0.5 * x * (1.0 + std::erf(x * 0.70710678118654752440));
}

inline double gelu_grad(double x) {
  double cdf = 0.5 * (1.0 + std::erf(x * 0.70710678118654752440));
  return cdf + x * 0.39894228040143267794 * std::exp(-0.5 * x * x);
}

inline void softmax_inplace(double* x, int n) {
  double mx = x[0];
  for (int i = 1; i < n; ++i) mx = std::max(mx, x[i]);
  double s = 0.0;
  for (int i = 0; i < n; ++i) {
    x[i] = std::exp(x[i] - mx);
    s += x[i];
  }
  for (int i = 0; i < n; ++i) x[i] /= s;
}

struct LnTrace {
  Mat xhat;
  std::vector<double> rstd;
};

inline void ln_row(const double* x, const double* g, const double* b, int n,
                   double* y, double* xhat, double* rstd_out) {
  double mu = 0.0;
  for (int i = 0; i < n; ++i) mu += x[i];
  mu /= n;
  double var = 0.0;
  for (int i = 0; i < n; ++i) {
    double d = x[i] - mu;
    var += d * d;
  }
  var /= n;
  double rstd = 1.0 / std::sqrt(var + kLnEps);
  for (int i = 0; i < n; ++i) {
    double xh = (x[i] - mu) * rstd;
    xhat[i] = xh;
    y[i] = g[i] * xh + b[i];
  }
  *rstd_out = rstd;
}

inline void ln_row_backward(const double* dy, const double* g, const double* xhat,
                            double rstd, int n, double* dx_add, double* dg_add,
                            double* db_add) {
  double m1 = 0.0, m2 = 0.0;
  for (int i = 0; i < n; ++i) {
    double dxh = dy[i] * g[i];
    m1 += dxh;
    m2 += dxh * xhat[i];
  }
  m1 /= n;
  m2 /= n;
  for (int i = 0; i < n; ++i) {
    double dxh = dy[i] * g[i];
    dx_add[i] += rstd * (dxh - m1 - xhat[i] * m2);
    dg_add[i] += dy[i] * xhat[i];
    db_add[i] += dy[i];
  }
}

inline void ln_rows(const Mat& x, const Mat& g, const Mat& b, Mat& y, LnTrace& tr) {
  y = Mat(x.rows, x.cols);
  tr.xhat = Mat(x.rows, x.cols);
  tr.rstd.assign(x.rows, 0.0);
  for (int i = 0; i < x.rows; ++i)
    ln_row(x.row(i), g.row(0), b.row(0), x.cols, y.row(i), tr.xhat.row(i),
           &tr.rstd[i]);
}

inline void ln_rows_backward(const Mat& dy, const Mat& g, const LnTrace& tr,
                             Mat& dx_add, Mat& dg, Mat& db) {
  for (int i = 0; i < dy.rows; ++i)
    ln_row_backward(dy.row(i), g.row(0), tr.xhat.row(i), tr.rstd[i], dy.cols,
                    dx_add.row(i), dg.row(0), db.row(0));
}

inline void add_col_sums(const Mat& d, Mat& bias_g) {
  for (int i = 0; i < d.rows; ++i) {
    const double* di = d.row(i);
    double* b = bias_g.row(0);
    for (int j = 0; j < d.cols; ++j) b[j] += di[j];
  }
}

// ---- forward / backward ------------------------------------------------

struct MentionTrace {
  Span span;
  std::vector<double> h_m;   // mean-pooled span, pre-injection
  std::vector<double> p;     // projection into entity space
  std::vector<int> cand;     // retrieved entity rows, best first
  std::vector<double> a;     // softmax weights over cand
  std::vector<double> e_m;   // combined entity vector
  std::vector<double> back;  // e_m mapped back to hidden space
};

struct LayerTrace {
  Mat x_in;
  Mat q, k, v;
  std::vector<Mat> attn;  // per head, T x T softmax rows
  Mat attn_concat;
  LnTrace ln1;
  Mat x_mid;
  Mat ffn_pre, ffn_act;
  LnTrace ln2;
};

struct ForwardTrace {
  std::vector<int> ids;
  LnTrace ln_emb;
  std::vector<LayerTrace> layers;
  bool injected = false;
  Mat pre_inject;
  std::vector<MentionTrace> mentions;
  std::vector<int> inj_rows;
  Mat inj_xhat;
  std::vector<double> inj_rstd;
  Mat post_inject;
  Mat hidden;
};

namespace detail {

inline void check_sequence(const EncoderConfig& cfg, const EncoderParams& P,
                           const std::vector<int>& ids) {
  if (ids.empty()) throw ConfigError("cannot encode an empty sequence");
  if (static_cast<int>(ids.size()) > cfg.max_seq)
    throw ConfigError("sequence longer than max_seq");
  for (int id : ids)
    if (id < 0 || id >= P.tok.rows) throw ConfigError("unknown token id");
}

inline void check_span(Span s, int T) {
  if (s.start < 0 || s.end > T || s.start >= s.end)
    throw ConfigError("mention span out of range");
}

// Entity rows ordered by similarity, ties broken toward the lower row index
// so retrieval is a total order.
inline std::vector<int> top_candidates(const std::vector<double>& sims, int n) {
  std::vector<int> idx(sims.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](int a, int b) {
    if (sims[a] != sims[b]) return sims[a] > sims[b];
    return a < b;
  });
  if (static_cast<int>(idx.size()) > n) idx.resize(n);
  return idx;
}

inline void inject_forward(const EncoderConfig& cfg, const EncoderParams& P,
                           const std::vector<Span>& mentions, const Mat& entity,
                           Mat& X, ForwardTrace& tr) {
  int T = X.rows;
  int d = X.cols;
  int dk = entity.cols;
  if (!P.has_linker) throw ConfigError("injection configured without linker parameters");
  if (P.w_proj.rows != d || P.w_proj.cols != dk)
    throw ConfigError("projection shape does not match entity table");
  tr.injected = true;
  tr.pre_inject = X;
  int n_cand = std::min(cfg.candidates, entity.rows);

  std::vector<char> is_mention_row(T, 0);
  for (const Span& s : mentions) {
    check_span(s, T);
    MentionTrace mt;
    mt.span = s;
    mt.h_m.assign(d, 0.0);
    for (int t = s.start; t < s.end; ++t) {
      const double* r = tr.pre_inject.row(t);
      for (int i = 0; i < d; ++i) mt.h_m[i] += r[i];
    }
    for (int i = 0; i < d; ++i) mt.h_m[i] /= s.len();

    mt.p.assign(dk, 0.0);
    for (int i = 0; i < d; ++i) {
      const double* wi = P.w_proj.row(i);
      for (int j = 0; j < dk; ++j) mt.p[j] += mt.h_m[i] * wi[j];
    }
    for (int j = 0; j < dk; ++j) mt.p[j] += P.b_proj.at(0, j);

    std::vector<double> sims(entity.rows);
    for (int e = 0; e < entity.rows; ++e)
      sims[e] = dot(mt.p.data(), entity.row(e), dk);
    mt.cand = top_candidates(sims, n_cand);
    mt.a.resize(mt.cand.size());
    for (size_t c = 0; c < mt.cand.size(); ++c) mt.a[c] = sims[mt.cand[c]];
    softmax_inplace(mt.a.data(), static_cast<int>(mt.a.size()));

    mt.e_m.assign(dk, 0.0);
    for (size_t c = 0; c < mt.cand.size(); ++c) {
      const double* er = entity.row(mt.cand[c]);
      for (int j = 0; j < dk; ++j) mt.e_m[j] += mt.a[c] * er[j];
    }

    mt.back.assign(d, 0.0);
    for (int i = 0; i < d; ++i)
      mt.back[i] = dot(P.w_proj.row(i), mt.e_m.data(), dk);

    for (int t = s.start; t < s.end; ++t) {
      double* r = X.row(t);
      for (int i = 0; i < d; ++i) r[i] += mt.back[i];
      is_mention_row[t] = 1;
    }
    tr.mentions.push_back(std::move(mt));
  }

  for (int t = 0; t < T; ++t)
    if (is_mention_row[t]) tr.inj_rows.push_back(t);
  tr.inj_xhat = Mat(static_cast<int>(tr.inj_rows.size()), d);
  tr.inj_rstd.assign(tr.inj_rows.size(), 0.0);
  std::vector<double> buf(d);
  for (size_t k = 0; k < tr.inj_rows.size(); ++k) {
    int t = tr.inj_rows[k];
    ln_row(X.row(t), P.ln_inj_g.row(0), P.ln_inj_b.row(0), d, buf.data(),
           tr.inj_xhat.row(k), &tr.inj_rstd[k]);
    std::copy(buf.begin(), buf.end(), X.row(t));
  }
  tr.post_inject = X;
}

inline void inject_backward(const EncoderConfig& cfg, const EncoderParams& P,
                            const ForwardTrace& tr, const Mat& entity,
                            const std::vector<std::vector<double>>& dproj,
                            Mat& dX, EncoderParams& G) {
  (void)cfg;
  int T = dX.rows;
  int d = dX.cols;
  int dk = entity.cols;

  Mat dz(T, d);
  std::vector<char> is_inj_row(T, 0);
  for (size_t k = 0; k < tr.inj_rows.size(); ++k) {
    int t = tr.inj_rows[k];
    is_inj_row[t] = 1;
    ln_row_backward(dX.row(t), P.ln_inj_g.row(0), tr.inj_xhat.row(k),
                    tr.inj_rstd[k], d, dz.row(t), G.ln_inj_g.row(0),
                    G.ln_inj_b.row(0));
  }

  Mat dpre(T, d);
  for (int t = 0; t < T; ++t) {
    const double* src = is_inj_row[t] ? dz.row(t) : dX.row(t);
    std::copy(src, src + d, dpre.row(t));
  }

  std::vector<double> dback(d), de(dk), da, dp(dk), dh(d);
  for (size_t m = 0; m < tr.mentions.size(); ++m) {
    const MentionTrace& mt = tr.mentions[m];
    std::fill(dback.begin(), dback.end(), 0.0);
    for (int t = mt.span.start; t < mt.span.end; ++t) {
      const double* r = dz.row(t);
      for (int i = 0; i < d; ++i) dback[i] += r[i];
    }

    // back = W e_m, used once per mention row
    std::fill(de.begin(), de.end(), 0.0);
    for (int i = 0; i < d; ++i) {
      const double* wi = P.w_proj.row(i);
      double* gwi = G.w_proj.row(i);
      for (int j = 0; j < dk; ++j) {
        de[j] += dback[i] * wi[j];
        gwi[j] += dback[i] * mt.e_m[j];
      }
    }

    da.assign(mt.cand.size(), 0.0);
    for (size_t c = 0; c < mt.cand.size(); ++c)
      da[c] = dot(de.data(), entity.row(mt.cand[c]), dk);
    double inner = 0.0;
    for (size_t c = 0; c < mt.cand.size(); ++c) inner += mt.a[c] * da[c];

    std::fill(dp.begin(), dp.end(), 0.0);
    for (size_t c = 0; c < mt.cand.size(); ++c) {
      double ds = mt.a[c] * (da[c] - inner);
      const double* er = entity.row(mt.cand[c]);
      for (int j = 0; j < dk; ++j) dp[j] += ds * er[j];
    }
    if (!dproj.empty()) {
      if (dproj.size() != tr.mentions.size())
        throw ConfigError("projection gradient count does not match mentions");
      for (int j = 0; j < dk; ++j) dp[j] += dproj[m][j];
    }

    for (int j = 0; j < dk; ++j) G.b_proj.at(0, j) += dp[j];
    std::fill(dh.begin(), dh.end(), 0.0);
    for (int i = 0; i < d; ++i) {
      const double* wi = P.w_proj.row(i);
      double* gwi = G.w_proj.row(i);
      double hi = mt.h_m[i];
      double s = 0.0;
      for (int j = 0; j < dk; ++j) {
        s += dp[j] * wi[j];
        gwi[j] += hi * dp[j];
      }
      dh[i] = s;
    }

    double inv = 1.0 / mt.span.len();
    for (int t = mt.span.start; t < mt.span.end; ++t) {
      double* r = dpre.row(t);
      for (int i = 0; i < d; ++i) r[i] += dh[i] * inv;
    }
  }
  dX = dpre;
}

}  // namespace detail

// Runs the full stack. `mentions` and `entity` only matter when the config
// has an injection layer; the trace carries everything backward needs.
inline Mat encoder_forward(const EncoderConfig& cfg, const EncoderParams& P,
                           const std::vector<int>& ids,
                           const std::vector<Span>& mentions, const Mat* entity,
                           ForwardTrace* trace_out) {
  detail::check_sequence(cfg, P, ids);
  bool inject = cfg.injection_layer > 0 && entity != nullptr;
  if (cfg.injection_layer > 0 && entity == nullptr && !mentions.empty())
    throw ConfigError("injection configured but no entity table provided");

  ForwardTrace local;
  ForwardTrace& tr = trace_out ? *trace_out : local;
  tr = ForwardTrace{};
  tr.ids = ids;

  int T = static_cast<int>(ids.size());
  int d = cfg.d_h;
  int dk_head = d / cfg.heads;
  double scale = 1.0 / std::sqrt(static_cast<double>(dk_head));

  Mat X(T, d);
  for (int t = 0; t < T; ++t) {
    const double* e = P.tok.row(ids[t]);
    const double* q = P.pos.row(t);
    double* x = X.row(t);
    for (int j = 0; j < d; ++j) x[j] = e[j] + q[j];
  }
  {
    Mat y;
    ln_rows(X, P.ln_emb_g, P.ln_emb_b, y, tr.ln_emb);
    X = std::move(y);
  }

  std::vector<double> srow(T);
  for (int l = 0; l < cfg.layers; ++l) {
    const LayerParams& L = P.layers[l];
    LayerTrace lt;
    lt.x_in = X;
    lt.q = matmul(X, L.wq);
    add_bias_inplace(lt.q, L.bq);
    lt.k = matmul(X, L.wk);
    add_bias_inplace(lt.k, L.bk);
    lt.v = matmul(X, L.wv);
    add_bias_inplace(lt.v, L.bv);

    lt.attn.resize(cfg.heads);
    lt.attn_concat = Mat(T, d);
    for (int h = 0; h < cfg.heads; ++h) {
      int off = h * dk_head;
      Mat Ph(T, T);
      for (int t = 0; t < T; ++t) {
        for (int u = 0; u < T; ++u) {
          double s = 0.0;
          const double* qt = lt.q.row(t) + off;
          const double* ku = lt.k.row(u) + off;
          for (int k2 = 0; k2 < dk_head; ++k2) s += qt[k2] * ku[k2];
          srow[u] = s * scale;
        }
        softmax_inplace(srow.data(), T);
        std::copy(srow.begin(), srow.end(), Ph.row(t));
      }
      for (int t = 0; t < T; ++t) {
        const double* pt = Ph.row(t);
        double* out = lt.attn_concat.row(t) + off;
        for (int k2 = 0; k2 < dk_head; ++k2) {
          double s = 0.0;
          for (int u = 0; u < T; ++u) s += pt[u] * lt.v.at(u, off + k2);
          out[k2] = s;
        }
      }
      lt.attn[h] = std::move(Ph);
    }

    Mat ao = matmul(lt.attn_concat, L.wo);
    add_bias_inplace(ao, L.bo);
    add_inplace(ao, X);  // residual
    ln_rows(ao, L.ln1_g, L.ln1_b, lt.x_mid, lt.ln1);

    lt.ffn_pre = matmul(lt.x_mid, L.w1);
    add_bias_inplace(lt.ffn_pre, L.b1);
    lt.ffn_act = Mat(lt.ffn_pre.rows, lt.ffn_pre.cols);
    for (size_t i = 0; i < lt.ffn_pre.a.size(); ++i)
      lt.ffn_act.a[i] = gelu(lt.ffn_pre.a[i]);
    Mat f = matmul(lt.ffn_act, L.w2);
    add_bias_inplace(f, L.b2);
    add_inplace(f, lt.x_mid);  // residual
    ln_rows(f, L.ln2_g, L.ln2_b, X, lt.ln2);

    tr.layers.push_back(std::move(lt));
    if (inject && cfg.injection_layer == l + 1)
      detail::inject_forward(cfg, P, mentions, *entity, X, tr);
  }
  tr.hidden = X;
  return X;
}

// Accumulates parameter gradients into G given dL/d(hidden). `dproj` carries
// an optional extra gradient on each mention's projected vector (the linking
// loss enters there); pass {} when unused. `entity` must be the table used in
// the forward pass; it never receives gradients.
inline void encoder_backward(const EncoderConfig& cfg, const EncoderParams& P,
                             const ForwardTrace& tr, const Mat* entity,
                             const Mat& dhidden,
                             const std::vector<std::vector<double>>& dproj,
                             EncoderParams& G) {
  int T = static_cast<int>(tr.ids.size());
  int d = cfg.d_h;
  int dk_head = d / cfg.heads;
  double scale = 1.0 / std::sqrt(static_cast<double>(dk_head));
  if (dhidden.rows != T || dhidden.cols != d)
    throw ConfigError("hidden gradient shape mismatch");
  if (tr.injected && entity == nullptr)
    throw ConfigError("backward through injection needs the entity table");

  Mat dX = dhidden;
  for (int l = cfg.layers - 1; l >= 0; --l) {
    if (tr.injected && cfg.injection_layer == l + 1)
      detail::inject_backward(cfg, P, tr, *entity, dproj, dX, G);

    const LayerParams& L = P.layers[l];
    LayerParams& GL = G.layers[l];
    const LayerTrace& lt = tr.layers[l];

    Mat dy2(T, d);
    ln_rows_backward(dX, L.ln2_g, lt.ln2, dy2, GL.ln2_g, GL.ln2_b);
    Mat dxmid = dy2;  // residual path

    add_inplace(GL.w2, matmul_tn(lt.ffn_act, dy2));
    add_col_sums(dy2, GL.b2);
    Mat dact = matmul_nt(dy2, L.w2);
    Mat dpre(dact.rows, dact.cols);
    for (size_t i = 0; i < dact.a.size(); ++i)
      dpre.a[i] = dact.a[i] * gelu_grad(lt.ffn_pre.a[i]);
    add_inplace(GL.w1, matmul_tn(lt.x_mid, dpre));
    add_col_sums(dpre, GL.b1);
    add_inplace(dxmid, matmul_nt(dpre, L.w1));

    Mat dy1(T, d);
    ln_rows_backward(dxmid, L.ln1_g, lt.ln1, dy1, GL.ln1_g, GL.ln1_b);
    Mat dxin = dy1;  // residual path

    add_inplace(GL.wo, matmul_tn(lt.attn_concat, dy1));
    add_col_sums(dy1, GL.bo);
    Mat dconcat = matmul_nt(dy1, L.wo);

    Mat dq(T, d), dkm(T, d), dv(T, d);
    std::vector<double> dprow(T);
    for (int h = 0; h < cfg.heads; ++h) {
      int off = h * dk_head;
      const Mat& Ph = lt.attn[h];
      for (int u = 0; u < T; ++u)
        for (int k2 = 0; k2 < dk_head; ++k2) {
          double s = 0.0;
          for (int t = 0; t < T; ++t) s += Ph.at(t, u) * dconcat.at(t, off + k2);
          dv.at(u, off + k2) += s;
        }
      for (int t = 0; t < T; ++t) {
        for (int u = 0; u < T; ++u) {
          double s = 0.0;
          const double* dc = dconcat.row(t) + off;
          const double* vu = lt.v.row(u) + off;
          for (int k2 = 0; k2 < dk_head; ++k2) s += dc[k2] * vu[k2];
          dprow[u] = s;
        }
        double inner = 0.0;
        const double* pt = Ph.row(t);
        for (int u = 0; u < T; ++u) inner += pt[u] * dprow[u];
        for (int u = 0; u < T; ++u) {
          double ds = pt[u] * (dprow[u] - inner);
          double* dqt = dq.row(t) + off;
          double* dku = dkm.row(u) + off;
          const double* ku = lt.k.row(u) + off;
          const double* qt = lt.q.row(t) + off;
          for (int k2 = 0; k2 < dk_head; ++k2) {
            dqt[k2] += scale * ds * ku[k2];
            dku[k2] += scale * ds * qt[k2];
          }
        }
      }
    }

    add_inplace(GL.wq, matmul_tn(lt.x_in, dq));
    add_col_sums(dq, GL.bq);
    add_inplace(dxin, matmul_nt(dq, L.wq));
    add_inplace(GL.wk, matmul_tn(lt.x_in, dkm));
    add_col_sums(dkm, GL.bk);
    add_inplace(dxin, matmul_nt(dkm, L.wk));
    add_inplace(GL.wv, matmul_tn(lt.x_in, dv));
    add_col_sums(dv, GL.bv);
    add_inplace(dxin, matmul_nt(dv, L.wv));

    dX = std::move(dxin);
  }

  Mat demb(T, d);
  ln_rows_backward(dX, P.ln_emb_g, tr.ln_emb, demb, G.ln_emb_g, G.ln_emb_b);
  for (int t = 0; t < T; ++t) {
    const double* r = demb.row(t);
    double* gt = G.tok.row(tr.ids[t]);
    double* gp = G.pos.row(t);
    for (int j = 0; j < d; ++j) {
      gt[j] += r[j];
      gp[j] += r[j];
    }
  }
}

struct EncodeResult {
  Mat hidden;
  std::vector<double> pooled;
};

inline EncodeResult encode(const EncoderConfig& cfg, const EncoderParams& P,
                           const std::vector<int>& ids) {
  EncodeResult r;
  r.hidden = encoder_forward(cfg, P, ids, {}, nullptr, nullptr);
  if (cfg.pooling == Pooling::Cls) {
    r.pooled.assign(r.hidden.row(0), r.hidden.row(0) + cfg.d_h);
  } else {
    r.pooled.assign(cfg.d_h, 0.0);
    for (int t = 0; t < r.hidden.rows; ++t) {
      const double* row = r.hidden.row(t);
      for (int j = 0; j < cfg.d_h; ++j) r.pooled[j] += row[j];
    }
    for (int j = 0; j < cfg.d_h; ++j) r.pooled[j] /= r.hidden.rows;
  }
  return r;
}

inline std::vector<double> pool_mention(const Mat& hidden, Span span, Pooling strategy) {
  if (hidden.rows < 1) throw ConfigError("cannot pool an empty sequence");
  if (strategy == Pooling::Cls)
    return std::vector<double>(hidden.row(0), hidden.row(0) + hidden.cols);
  detail::check_span(span, hidden.rows);
  std::vector<double> v(hidden.cols, 0.0);
  for (int t = span.start; t < span.end; ++t) {
    const double* r = hidden.row(t);
    for (int j = 0; j < hidden.cols; ++j) v[j] += r[j];
  }
  for (int j = 0; j < hidden.cols; ++j) v[j] /= span.len();
  return v;
}

// ---- masking -----------------------------------------------------------

struct MaskResult {
  std::vector<int> ids;      // sequence with masking applied
  std::vector<int> targets;  // positions to predict, ascending
  std::vector<int> labels;   // original ids at those positions
};

// Positions holding special tokens (padding, sentence and mention markers)
// are never maskable; a sampled position inside a mention drags the whole
// mention span into the target set.
inline MaskResult mlm_masking(const std::vector<int>& ids,
                              const std::vector<Span>& mentions, double rate,
                              uint64_t seed, int vocab_size) {
  if (!(rate > 0.0 && rate < 1.0)) throw ConfigError("mask rate must lie in (0,1)");
  if (vocab_size <= kSpecialCount)
    throw ConfigError("vocabulary has no regular tokens to sample from");
  MaskResult r;
  r.ids = ids;

  std::vector<int> maskable;
  for (size_t t = 0; t < ids.size(); ++t)
    if (ids[t] >= kSpecialCount) maskable.push_back(static_cast<int>(t));
  if (maskable.empty()) return r;

  int k = static_cast<int>(std::ceil(rate * static_cast<double>(maskable.size())));
  Rng rng(seed);
  std::vector<int> picks = rng.sample_without_replacement(
      static_cast<int>(maskable.size()), k);

  std::vector<char> chosen(ids.size(), 0);
  for (int pi : picks) {
    int pos = maskable[pi];
    chosen[pos] = 1;
    for (const Span& s : mentions) {
      if (pos >= s.start && pos < s.end) {
        for (int t = s.start; t < s.end; ++t)
          if (r.ids[t] >= kSpecialCount) chosen[t] = 1;
        break;
      }
    }
  }
  for (size_t t = 0; t < ids.size(); ++t)
    if (chosen[t]) r.targets.push_back(static_cast<int>(t));

  for (int t : r.targets) {
    r.labels.push_back(ids[t]);
    double u = rng.uniform();
    if (u < 0.8) {
      r.ids[t] = kMaskId;
    } else if (u < 0.9) {
      r.ids[t] = kSpecialCount + rng.uniform_int(vocab_size - kSpecialCount);
    }  // else keep the original token
  }
  return r;
}

// ---- losses ------------------------------------------------------------

struct MlmLoss {
  double loss_sum = 0.0;  // sum of per-target cross-entropies
  int count = 0;
};

// Tied output head: logits are hidden . tok_emb rows plus a per-token bias.
// Gradients scale by grad_scale so a batch can pool its mean across calls.
inline MlmLoss mlm_loss(const EncoderParams& P, const Mat& hidden,
                        const std::vector<int>& targets,
                        const std::vector<int>& labels, double grad_scale,
                        Mat* dhidden, EncoderParams* G) {
  if (targets.size() != labels.size())
    throw ConfigError("targets and labels differ in length");
  MlmLoss r;
  int V = P.tok.rows;
  int d = P.tok.cols;
  std::vector<double> logits(V);
  for (size_t idx = 0; idx < targets.size(); ++idx) {
    int t = targets[idx];
    int y = labels[idx];
    if (t < 0 || t >= hidden.rows) throw ConfigError("mask target out of range");
    if (y < 0 || y >= V) throw ConfigError("mask label out of range");
    const double* h = hidden.row(t);
    for (int j = 0; j < V; ++j)
      logits[j] = dot(h, P.tok.row(j), d) + P.mlm_bias.at(0, j);
    double mx = logits[0];
    for (int j = 1; j < V; ++j) mx = std::max(mx, logits[j]);
    double se = 0.0;
    for (int j = 0; j < V; ++j) se += std::exp(logits[j] - mx);
    double lse = mx + std::log(se);
    r.loss_sum += lse - logits[y];
    r.count += 1;
    if (dhidden || G) {
      for (int j = 0; j < V; ++j) {
        double g = std::exp(logits[j] - lse);
        if (j == y) g -= 1.0;
        g *= grad_scale;
        if (g == 0.0) continue;
        if (dhidden) {
          double* dh = dhidden->row(t);
          const double* tj = P.tok.row(j);
          for (int i = 0; i < d; ++i) dh[i] += g * tj[i];
        }
        if (G) {
          double* gt = G->tok.row(j);
          for (int i = 0; i < d; ++i) gt[i] += g * h[i];
          G->mlm_bias.at(0, j) += g;
        }
      }
    }
  }
  return r;
}

struct ElLoss {
  double loss = 0.0;  // summed over linked mentions
  int used = 0;
  int skipped = 0;
  std::vector<std::vector<double>> dproj;  // per mention, zero when skipped
};

// Cross-entropy of each projected mention against its gold entity row. The
// softmax runs over the whole table, or over the retrieved candidates when
// candidates_only is set (a gold entity outside the candidate set is then
// counted as skipped, like a missing gold row).
inline ElLoss el_loss(const std::vector<std::vector<double>>& proj,
                      const std::vector<int>& gold, const Mat& entity,
                      bool candidates_only = false,
                      const std::vector<std::vector<int>>* cands = nullptr) {
  if (proj.size() != gold.size())
    throw ConfigError("projection and gold lists differ in length");
  if (candidates_only && (!cands || cands->size() != proj.size()))
    throw ConfigError("candidate lists required when restricting the softmax");
  ElLoss r;
  int dk = entity.cols;
  for (size_t m = 0; m < proj.size(); ++m) {
    r.dproj.emplace_back(dk, 0.0);
    int g = gold[m];
    if (g < 0) {
      r.skipped += 1;
      continue;
    }
    if (g >= entity.rows) throw ConfigError("gold entity row out of range");
    if (static_cast<int>(proj[m].size()) != dk)
      throw ConfigError("projected mention width does not match entity table");

    std::vector<int> rows;
    if (candidates_only) {
      rows = (*cands)[m];
      if (std::find(rows.begin(), rows.end(), g) == rows.end()) {
        r.skipped += 1;
        continue;
      }
    } else {
      rows.resize(entity.rows);
      std::iota(rows.begin(), rows.end(), 0);
    }

    std::vector<double> logits(rows.size());
    for (size_t c = 0; c < rows.size(); ++c)
      logits[c] = dot(proj[m].data(), entity.row(rows[c]), dk);
    double mx = logits[0];
    for (double x : logits) mx = std::max(mx, x);
    double se = 0.0;
    for (double x : logits) se += std::exp(x - mx);
    double lse = mx + std::log(se);
    double gold_logit = 0.0;
    for (size_t c = 0; c < rows.size(); ++c)
      if (rows[c] == g) gold_logit = logits[c];
    r.loss += lse - gold_logit;
    r.used += 1;

    for (size_t c = 0; c < rows.size(); ++c) {
      double p = std::exp(logits[c] - lse);
      if (rows[c] == g) p -= 1.0;
      const double* er = entity.row(rows[c]);
      for (int j = 0; j < dk; ++j) r.dproj[m][j] += p * er[j];
    }
  }
  return r;
}

// ---- joint training objective -------------------------------------------

struct JointItem {
  std::vector<int> ids;          // already masked
  std::vector<int> targets;      // mask positions
  std::vector<int> labels;       // original ids at mask positions
  std::vector<Span> mentions;    // mention spans (in masked coordinates)
  std::vector<int> gold;         // entity rows, -1 when unknown
};

struct JointReport {
  double total = 0.0;
  double mlm = 0.0;  // mean over every mask target in the batch
  double el = 0.0;   // summed over linked mentions
  int mlm_targets = 0;
  int mentions_used = 0;
  int el_skipped = 0;
};

inline JointReport joint_injection_loss(const EncoderConfig& cfg,
                                        const EncoderParams& P,
                                        const Mat& entity,
                                        const std::vector<JointItem>& batch,
                                        EncoderParams* G) {
  if (cfg.injection_layer <= 0)
    throw ConfigError("joint loss requires an injection layer");
  JointReport rep;
  int n_targets = 0;
  for (const JointItem& it : batch) n_targets += static_cast<int>(it.targets.size());
  rep.mlm_targets = n_targets;
  double grad_scale = n_targets > 0 ? 1.0 / n_targets : 0.0;

  double mlm_sum = 0.0;
  for (const JointItem& it : batch) {
    ForwardTrace tr;
    encoder_forward(cfg, P, it.ids, it.mentions, &entity, &tr);

    std::vector<std::vector<double>> proj;
    std::vector<std::vector<int>> cands;
    for (const MentionTrace& mt : tr.mentions) {
      proj.push_back(mt.p);
      cands.push_back(mt.cand);
    }
    ElLoss el = el_loss(proj, it.gold, entity, cfg.el_candidates_only, &cands);
    rep.el += el.loss;
    rep.mentions_used += el.used;
    rep.el_skipped += el.skipped;

    Mat dh(static_cast<int>(it.ids.size()), cfg.d_h);
    MlmLoss ml = mlm_loss(P, tr.hidden, it.targets, it.labels, grad_scale,
                          G ? &dh : nullptr, G);
    mlm_sum += ml.loss_sum;
    if (G) encoder_backward(cfg, P, tr, &entity, dh, el.dproj, *G);
  }
  rep.mlm = n_targets > 0 ? mlm_sum / n_targets : 0.0;
  rep.total = rep.mlm + rep.el;
  return rep;
}

// ---- checkpointing -------------------------------------------------------

constexpr int32_t kEncoderFormatVersion = 1;

inline void save_encoder(const std::string& path, const EncoderConfig& cfg,
                         const EncoderParams& P, const Mat* entity,
                         const std::vector<std::string>* entity_names,
                         const std::string& parent_hash) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path);
  write_string(f, "kgcl-encoder");
  write_pod(f, kEncoderFormatVersion);

  auto reg = P.registry();
  int32_t n = static_cast<int32_t>(reg.size()) + (entity ? 1 : 0);
  write_pod(f, n);
  auto write_section = [&](const std::string& name, const Mat& m) {
    write_string(f, name);
    int32_t r = m.rows, c = m.cols;
    write_pod(f, r);
    write_pod(f, c);
    f.write(reinterpret_cast<const char*>(m.a.data()),
            static_cast<std::streamsize>(m.a.size() * sizeof(double)));
  };
  for (auto& [name, m] : reg) write_section(name, *m);
  if (entity) write_section("entity_table", *entity);

  int32_t nn = entity_names ? static_cast<int32_t>(entity_names->size()) : 0;
  write_pod(f, nn);
  if (entity_names)
    for (const std::string& s : *entity_names) write_string(f, s);
  if (!f) throw IoError("short write to " + path);

  KvConfig kv = encoder_config_to_kv(cfg);
  kv["format_version"] = std::to_string(kEncoderFormatVersion);
  kv["parent"] = parent_hash.empty() ? "none" : parent_hash;
  spit(path + ".config", format_kv(kv));
}

struct EncoderCheckpoint {
  EncoderConfig config;
  EncoderParams params;
  Mat entity_table;  // rows == 0 when the checkpoint has no linker stage
  std::vector<std::string> entity_names;
  std::string parent_hash;
};

inline EncoderCheckpoint load_encoder(const std::string& path) {
  KvConfig kv = load_kv(path + ".config");
  EncoderCheckpoint ck;
  ck.config = encoder_config_from_kv(kv);
  auto pit = kv.find("parent");
  ck.parent_hash = (pit == kv.end() || pit->second == "none") ? "" : pit->second;

  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path);
  std::string magic = read_string(f);
  if (magic != "kgcl-encoder") throw IoError("not an encoder checkpoint: " + path);
  int32_t version = 0;
  read_pod(f, version);
  if (version != kEncoderFormatVersion)
    throw IoError("unsupported encoder checkpoint version");

  ck.params = make_encoder_params(ck.config);
  auto reg = ck.params.registry();
  int32_t n = 0;
  read_pod(f, n);
  if (n < 0 || n > static_cast<int32_t>(reg.size()) + 1)
    throw IoError("corrupt encoder checkpoint section count");

  std::vector<char> filled(reg.size(), 0);
  bool have_entity = false;
  for (int32_t s = 0; s < n; ++s) {
    std::string name = read_string(f);
    int32_t r = 0, c = 0;
    read_pod(f, r);
    read_pod(f, c);
    if (r < 0 || c < 0) throw IoError("corrupt section shape in " + path);
    Mat m(r, c);
    f.read(reinterpret_cast<char*>(m.a.data()),
           static_cast<std::streamsize>(m.a.size() * sizeof(double)));
    if (!f) throw IoError("truncated binary file");
    if (name == "entity_table") {
      ck.entity_table = std::move(m);
      have_entity = true;
      continue;
    }
    bool matched = false;
    for (size_t i = 0; i < reg.size(); ++i) {
      if (reg[i].first == name) {
        if (!reg[i].second->same_shape(m))
          throw IoError("section shape mismatch for " + name);
        *reg[i].second = std::move(m);
        filled[i] = 1;
        matched = true;
        break;
      }
    }
    if (!matched) throw IoError("unknown checkpoint section: " + name);
  }
  for (size_t i = 0; i < reg.size(); ++i)
    if (!filled[i]) throw IoError("missing checkpoint section: " + reg[i].first);
  (void)have_entity;

  int32_t nn = 0;
  read_pod(f, nn);
  if (nn < 0) throw IoError("corrupt entity name count");
  for (int32_t i = 0; i < nn; ++i) ck.entity_names.push_back(read_string(f));
  return ck;
}

}  // namespace kgcl
