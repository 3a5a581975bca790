#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "kgcl/sampling.hpp"
#include "kgcl/trainer.hpp"

#include "oracles.hpp"

using namespace kgcl;

// C concepts x S synonyms x reps contexts each. Same-concept contexts share
// their surrounding words, so the task is learnable at toy scale.
static std::vector<MentionContext> synth_contexts(int C, int S, int reps,
                                                  int* vocab_out) {
  std::vector<MentionContext> out;
  int base_m = kSpecialCount;
  int base_c = kSpecialCount + C * S;
  for (int c = 0; c < C; ++c)
    for (int s = 0; s < S; ++s)
      for (int r = 0; r < reps; ++r) {
        MentionContext ctx;
        ctx.concept_id = "C" + std::to_string(c);
        ctx.term = "t" + std::to_string(c) + "_" + std::to_string(s);
        int mention = base_m + c * S + s;
        ctx.tokens = {base_c + 2 * c + (r % 2), kMsId, mention, kMeId,
                      base_c + 2 * c};
        ctx.mention_start = 2;
        ctx.mention_end = 3;
        out.push_back(ctx);
      }
  if (vocab_out) *vocab_out = base_c + 2 * C;
  return out;
}

static EncoderConfig sampling_encoder(int vocab, int inject = 0, int d_kge = 0) {
  EncoderConfig cfg;
  cfg.layers = 1;
  cfg.d_h = 8;
  cfg.heads = 2;
  cfg.d_ff = 16;
  cfg.injection_layer = inject;
  cfg.candidates = 2;
  cfg.d_kge = d_kge;
  cfg.max_seq = 16;
  cfg.vocab = vocab;
  return cfg;
}

TEST_CASE("prototype selection") {
  SECTION("prefers distinct surface forms") {
    std::vector<MentionContext> ctxs;
    for (int s = 0; s < 3; ++s) {
      MentionContext c;
      c.concept_id = "C1";
      c.term = "syn" + std::to_string(s);
      c.tokens = {kMsId, kSpecialCount + s, kMeId};
      c.mention_start = 1;
      c.mention_end = 2;
      ctxs.push_back(c);
    }
    PrototypeSet p = build_prototypes(ctxs, 2, 7);
    REQUIRE(p.by_concept.at("C1").size() == 2);
    std::set<std::string> terms;
    for (int i : p.by_concept.at("C1")) terms.insert(ctxs[i].term);
    REQUIRE(terms.size() == 2);
  }
  SECTION("a single context yields a single prototype") {
    std::vector<MentionContext> ctxs = synth_contexts(1, 1, 1, nullptr);
    PrototypeSet p = build_prototypes(ctxs, 3, 1);
    REQUIRE(p.by_concept.at("C0") == std::vector<int>{0});
  }
  SECTION("one shared form fills all slots anyway") {
    std::vector<MentionContext> ctxs;
    for (int r = 0; r < 5; ++r) {
      MentionContext c;
      c.concept_id = "C1";
      c.term = "only";
      c.tokens = {kMsId, kSpecialCount, kMeId};
      c.mention_start = 1;
      c.mention_end = 2;
      ctxs.push_back(c);
    }
    PrototypeSet p = build_prototypes(ctxs, 3, 9);
    REQUIRE(p.by_concept.at("C1").size() == 3);
    for (int i : p.by_concept.at("C1")) REQUIRE(ctxs[i].term == "only");
  }
  SECTION("deterministic per seed") {
    std::vector<MentionContext> ctxs = synth_contexts(5, 3, 2, nullptr);
    PrototypeSet a = build_prototypes(ctxs, 2, 42);
    PrototypeSet b = build_prototypes(ctxs, 2, 42);
    REQUIRE(a.by_concept == b.by_concept);
    bool any_diff = false;
    for (uint64_t s = 43; s < 53; ++s)
      if (build_prototypes(ctxs, 2, s).by_concept != a.by_concept)
        any_diff = true;
    REQUIRE(any_diff);
  }
  SECTION("satisfies the constraint oracle on random datasets") {
    for (uint64_t seed = 1; seed <= 20; ++seed) {
      Rng rng(seed);
      std::vector<MentionContext> ctxs;
      int C = 2 + rng.uniform_int(5);
      for (int c = 0; c < C; ++c) {
        int n = 1 + rng.uniform_int(6);
        int forms = 1 + rng.uniform_int(3);
        for (int i = 0; i < n; ++i) {
          MentionContext ctx;
          ctx.concept_id = "C" + std::to_string(c);
          ctx.term = "f" + std::to_string(rng.uniform_int(forms));
          ctx.tokens = {kMsId, kSpecialCount, kMeId};
          ctx.mention_start = 1;
          ctx.mention_end = 2;
          ctxs.push_back(ctx);
        }
      }
      int per = 1 + rng.uniform_int(3);
      PrototypeSet p = build_prototypes(ctxs, per, seed * 17);
      REQUIRE(oracle::check_prototypes(ctxs, p, per));
    }
  }
  SECTION("rejects a non-positive prototype count") {
    REQUIRE_THROWS_AS(build_prototypes({}, 0, 1), ConfigError);
  }
}

TEST_CASE("similarity index refresh") {
  int vocab = 0;
  std::vector<MentionContext> ctxs = synth_contexts(3, 2, 2, &vocab);
  EncoderConfig cfg = sampling_encoder(vocab);
  EncoderParams P = init_encoder(cfg, 5);

  SimilarityIndex idx;
  refresh_index(idx, cfg, P, nullptr, ctxs);
  REQUIRE(idx.epoch == 1);
  REQUIRE(idx.rows.rows == static_cast<int>(ctxs.size()));

  SECTION("rows are unit length") {
    for (int i = 0; i < idx.rows.rows; ++i)
      REQUIRE(std::abs(l2_norm(idx.rows.row(i), idx.rows.cols) - 1.0) < 1e-9);
  }
  SECTION("rows equal the public encode-and-pool recomputation") {
    for (size_t i = 0; i < ctxs.size(); ++i) {
      std::vector<int> ids = {kClsId};
      ids.insert(ids.end(), ctxs[i].tokens.begin(), ctxs[i].tokens.end());
      ids.push_back(kSepId);
      EncodeResult er = encode(cfg, P, ids);
      std::vector<double> want = l2_normalized(pool_mention(
          er.hidden, {ctxs[i].mention_start + 1, ctxs[i].mention_end + 1},
          cfg.pooling));
      for (int j = 0; j < cfg.d_h; ++j)
        REQUIRE(idx.rows.at(static_cast<int>(i), j) ==
                Catch::Approx(want[j]).margin(1e-12));
    }
  }
  SECTION("stamp counts refreshes and rows track the weights") {
    Mat before = idx.rows;
    P.tok.at(kSpecialCount, 0) += 0.5;
    refresh_index(idx, cfg, P, nullptr, ctxs);
    REQUIRE(idx.epoch == 2);
    REQUIRE(idx.rows.a != before.a);
  }
}

TEST_CASE("exact neighbor search") {
  SECTION("a stored row with another concept ranks itself first") {
    SimilarityIndex idx;
    idx.rows = Mat(4, 3);
    Rng rng(3);
    for (int i = 0; i < 4; ++i) {
      std::vector<double> v(3);
      for (double& x : v) x = rng.normal(0.0, 1.0);
      v = l2_normalized(v);
      std::copy(v.begin(), v.end(), idx.rows.row(i));
      idx.cuis.push_back(i % 2 ? "A" : "B");
    }
    std::vector<double> q(idx.rows.row(1), idx.rows.row(1) + 3);
    std::vector<int> got = top_m_neighbors(idx, q, 2, "B");
    REQUIRE(got.front() == 1);
  }
  SECTION("excluding every row returns nothing") {
    SimilarityIndex idx;
    idx.rows = Mat(3, 2);
    idx.cuis = {"X", "X", "X"};
    std::vector<int> got = top_m_neighbors(idx, {1.0, 0.0}, 5, "X");
    REQUIRE(got.empty());
  }
  SECTION("matches the repeated-argmax oracle exactly") {
    for (uint64_t seed = 1; seed <= 15; ++seed) {
      Rng rng(seed);
      int n = 10 + rng.uniform_int(191);
      SimilarityIndex idx;
      idx.rows = Mat(n, 6);
      for (int i = 0; i < n; ++i) {
        std::vector<double> v(6);
        for (double& x : v) x = rng.normal(0.0, 1.0);
        v = l2_normalized(v);
        std::copy(v.begin(), v.end(), idx.rows.row(i));
        idx.cuis.push_back("C" + std::to_string(rng.uniform_int(5)));
      }
      std::vector<double> q(6);
      for (double& x : q) x = rng.normal(0.0, 1.0);
      q = l2_normalized(q);
      int m = 1 + rng.uniform_int(n + 5);
      std::string excl = "C" + std::to_string(rng.uniform_int(5));
      REQUIRE(top_m_neighbors(idx, q, m, excl) ==
              oracle::top_m_ref(idx, q, m, excl));
    }
  }
  SECTION("fewer eligible rows than requested returns all of them") {
    SimilarityIndex idx;
    idx.rows = Mat(3, 2);
    idx.rows.at(0, 0) = 1.0;
    idx.rows.at(1, 1) = 1.0;
    idx.rows.at(2, 0) = -1.0;
    idx.cuis = {"A", "B", "B"};
    std::vector<int> got = top_m_neighbors(idx, {1.0, 0.0}, 10, "A");
    REQUIRE(got == std::vector<int>{1, 2});
  }
  SECTION("invalid arguments are rejected") {
    SimilarityIndex idx;
    idx.rows = Mat(2, 2);
    idx.cuis = {"A", "B"};
    REQUIRE_THROWS_AS(top_m_neighbors(idx, {1.0, 0.0}, 0, "A"), ConfigError);
    REQUIRE_THROWS_AS(top_m_neighbors(idx, {1.0}, 1, "A"), ConfigError);
  }
}

TEST_CASE("batch planning") {
  int vocab = 0;
  std::vector<MentionContext> ctxs = synth_contexts(6, 3, 3, &vocab);
  EncoderConfig cfg = sampling_encoder(vocab);
  EncoderParams P = init_encoder(cfg, 21);
  SimilarityIndex idx;
  refresh_index(idx, cfg, P, nullptr, ctxs);
  PrototypeSet protos = build_prototypes(ctxs, 2, 4);

  SECTION("batch size respects the structural bound") {
    SamplingConfig sc;
    sc.k = 2;
    sc.m = 3;
    BatchPlan plan = plan_batch(protos, ctxs, idx, sc, 11);
    REQUIRE(static_cast<int>(plan.anchors.size()) <= sc.prototypes_per_step);
    REQUIRE(plan.rows.size() <=
            plan.anchors.size() * static_cast<size_t>(1 + sc.k + sc.m));
    for (const PlannedAnchor& a : plan.anchors) {
      REQUIRE(static_cast<int>(a.positives.size()) <= sc.k);
      REQUIRE(static_cast<int>(a.negatives.size()) <= sc.m);
    }
  }
  SECTION("a concept with one extra context yields one positive") {
    std::vector<MentionContext> two = synth_contexts(4, 1, 1, &vocab);
    MentionContext extra = two[0];
    extra.tokens[0] += 1;
    two.push_back(extra);  // concept C0 now has exactly 2 contexts
    EncoderConfig c2 = sampling_encoder(vocab);
    EncoderParams P2 = init_encoder(c2, 3);
    SimilarityIndex i2;
    refresh_index(i2, c2, P2, nullptr, two);
    PrototypeSet pr = build_prototypes(two, 1, 2);
    SamplingConfig sc;
    sc.prototypes_per_step = 1;  // lone anchor, nothing can steal its rows
    sc.k = 20;
    sc.m = 2;
    bool saw = false;
    for (uint64_t seed = 1; seed <= 50 && !saw; ++seed) {
      BatchPlan plan = plan_batch(pr, two, i2, sc, seed);
      REQUIRE(plan.anchors.size() == 1);
      const PlannedAnchor& a = plan.anchors.front();
      if (two[a.proto_row].concept_id == "C0") {
        REQUIRE(a.positives.size() == 1);
        saw = true;
      } else {
        REQUIRE(a.positives.empty());
      }
    }
    REQUIRE(saw);
  }
  SECTION("plans are seed-deterministic") {
    SamplingConfig sc;
    BatchPlan a = plan_batch(protos, ctxs, idx, sc, 77);
    BatchPlan b = plan_batch(protos, ctxs, idx, sc, 77);
    REQUIRE(a.rows == b.rows);
    REQUIRE(a.labels == b.labels);
    bool moved = false;
    for (uint64_t s = 78; s < 88; ++s)
      if (plan_batch(protos, ctxs, idx, sc, s).rows != a.rows) moved = true;
    REQUIRE(moved);
  }
  SECTION("positives share the anchor concept, negatives never do") {
    SamplingConfig sc;
    sc.k = 4;
    sc.m = 6;
    for (uint64_t seed = 1; seed <= 20; ++seed) {
      BatchPlan plan = plan_batch(protos, ctxs, idx, sc, seed);
      std::set<int> seen;
      for (int r : plan.rows) REQUIRE(seen.insert(r).second);
      for (const PlannedAnchor& a : plan.anchors) {
        const std::string& cui = ctxs[a.proto_row].concept_id;
        for (int p : a.positives) REQUIRE(ctxs[p].concept_id == cui);
        for (int n : a.negatives) REQUIRE(ctxs[n].concept_id != cui);
      }
    }
  }
  SECTION("per-term context cap holds batch-wide") {
    std::vector<MentionContext> mono;
    for (int r = 0; r < 10; ++r) {
      MentionContext c;
      c.concept_id = "C0";
      c.term = "one";
      c.tokens = {kSpecialCount, kMsId, kSpecialCount + 1, kMeId};
      c.mention_start = 2;
      c.mention_end = 3;
      mono.push_back(c);
    }
    for (int r = 0; r < 4; ++r) {
      MentionContext c;
      c.concept_id = "C1";
      c.term = "other";
      c.tokens = {kSpecialCount + 2, kMsId, kSpecialCount + 3, kMeId};
      c.mention_start = 2;
      c.mention_end = 3;
      mono.push_back(c);
    }
    EncoderConfig c2 = sampling_encoder(kSpecialCount + 4);
    EncoderParams P2 = init_encoder(c2, 6);
    SimilarityIndex i2;
    refresh_index(i2, c2, P2, nullptr, mono);
    PrototypeSet pr = build_prototypes(mono, 2, 3);
    SamplingConfig sc;
    sc.k = 20;
    sc.m = 20;
    for (uint64_t seed = 1; seed <= 10; ++seed) {
      BatchPlan plan = plan_batch(pr, mono, i2, sc, seed);
      std::map<std::string, int> counts;
      for (int r : plan.rows)
        counts[mono[r].concept_id + "\t" + mono[r].term] += 1;
      for (const auto& [key, n] : counts) REQUIRE(n <= sc.per_term_cap);
    }
  }
  SECTION("a stale index is rejected") {
    SamplingConfig sc;
    SimilarityIndex bad;
    bad.rows = Mat(3, cfg.d_h);
    bad.cuis = {"A", "B", "C"};
    REQUIRE_THROWS_AS(plan_batch(protos, ctxs, bad, sc, 1), ConfigError);
  }
}

TEST_CASE("sampled batches are ready for the loss") {
  int vocab = 0;
  std::vector<MentionContext> ctxs = synth_contexts(4, 2, 2, &vocab);
  EncoderConfig cfg = sampling_encoder(vocab);
  EncoderParams P = init_encoder(cfg, 31);
  SimilarityIndex idx;
  refresh_index(idx, cfg, P, nullptr, ctxs);
  PrototypeSet protos = build_prototypes(ctxs, 2, 8);
  SamplingConfig sc;
  sc.k = 3;
  sc.m = 4;

  KgeModel kge = init_kge(KgeKind::TransE, 4, 1, 6, 5);
  kge.set_names({"C0", "C1", "C2", "C3"}, {"r"});

  SECTION("without a graph model") {
    ContrastiveBatch b =
        sample_batch(protos, ctxs, idx, sc, 9, cfg, P, nullptr, nullptr);
    REQUIRE(b.embeddings.rows == static_cast<int>(b.labels.size()));
    REQUIRE_FALSE(b.has_s_kge);
    REQUIRE(b.S.rows == b.embeddings.rows);
    for (int i = 0; i < b.embeddings.rows; ++i) {
      REQUIRE(std::abs(l2_norm(b.embeddings.row(i), cfg.d_h) - 1.0) < 1e-9);
      REQUIRE(b.S.at(i, i) == Catch::Approx(1.0).margin(1e-9));
      for (int j = 0; j < b.S.cols; ++j) REQUIRE(b.S.at(i, j) == b.S.at(j, i));
    }
    REQUIRE(b.mined.pos.size() == b.labels.size());
  }
  SECTION("with a graph model attached") {
    ContrastiveBatch b =
        sample_batch(protos, ctxs, idx, sc, 9, cfg, P, nullptr, &kge);
    REQUIRE(b.has_s_kge);
    REQUIRE(b.S_kge.rows == b.S.rows);
    for (int i = 0; i < b.S_kge.rows; ++i)
      for (int j = 0; j < b.S_kge.cols; ++j) {
        REQUIRE(b.S_kge.at(i, j) == b.S_kge.at(j, i));
        REQUIRE(b.S_kge.at(i, j) >= 0.0);
        REQUIRE(b.S_kge.at(i, j) <= 1.0);
      }
    MsParams mp;
    MsLoss ml = ms_loss_v3(b, mp);
    REQUIRE(std::isfinite(ml.loss));
  }
  SECTION("seed determinism carries through assembly") {
    ContrastiveBatch a =
        sample_batch(protos, ctxs, idx, sc, 13, cfg, P, nullptr, &kge);
    ContrastiveBatch b =
        sample_batch(protos, ctxs, idx, sc, 13, cfg, P, nullptr, &kge);
    REQUIRE(a.labels == b.labels);
    REQUIRE(a.S.a == b.S.a);
    REQUIRE(a.S_kge.a == b.S_kge.a);
  }
}

TEST_CASE("contrastive training loop") {
  int vocab = 0;
  std::vector<MentionContext> ctxs = synth_contexts(4, 2, 2, &vocab);
  EncoderConfig cfg = sampling_encoder(vocab);

  ContrastiveTrainConfig tc;
  tc.epochs = 3;
  tc.steps_per_epoch = 3;
  tc.grad_accum = 2;
  tc.loss_variant = 2;
  tc.sampling.k = 3;
  tc.sampling.m = 4;
  tc.sampling.epsilon = 0.5;
  tc.lr = 1e-3;
  tc.seed = 11;

  SECTION("loss descends on separable data") {
    EncoderParams P = init_encoder(cfg, 41);
    ContrastiveTrainReport rep =
        train_contrastive(cfg, P, nullptr, ctxs, nullptr, tc);
    REQUIRE(rep.epoch_mean_loss.size() == 3);
    REQUIRE(rep.epoch_mean_loss.back() < rep.epoch_mean_loss.front());
  }
  SECTION("one refresh per epoch") {
    EncoderParams P = init_encoder(cfg, 41);
    ContrastiveTrainConfig t2 = tc;
    t2.epochs = 2;
    ContrastiveTrainReport rep =
        train_contrastive(cfg, P, nullptr, ctxs, nullptr, t2);
    REQUIRE(rep.index_refreshes == 2);
    REQUIRE(rep.final_index_epoch == 3);  // initial build plus two refreshes
  }
  SECTION("margin-from-graph variant demands a graph model") {
    EncoderParams P = init_encoder(cfg, 41);
    ContrastiveTrainConfig t2 = tc;
    t2.loss_variant = 3;
    REQUIRE_THROWS_AS(train_contrastive(cfg, P, nullptr, ctxs, nullptr, t2),
                      ConfigError);
  }
  SECTION("a non-finite loss rolls parameters back") {
    EncoderParams P = init_encoder(cfg, 41);
    EncoderParams entry = P;
    ContrastiveTrainConfig t2 = tc;
    t2.loss_variant = 1;
    t2.ms.alpha = 1e9;
    t2.ms.lambda = 5.0;
    t2.sampling.epsilon = 10.0;
    REQUIRE_THROWS_AS(train_contrastive(cfg, P, nullptr, ctxs, nullptr, t2),
                      NumericError);
    auto ra = P.registry();
    auto rb = entry.registry();
    for (size_t i = 0; i < ra.size(); ++i)
      REQUIRE(ra[i].second->a == rb[i].second->a);
  }
  SECTION("bad configs are rejected up front") {
    EncoderParams P = init_encoder(cfg, 41);
    ContrastiveTrainConfig t2 = tc;
    t2.loss_variant = 4;
    REQUIRE_THROWS_AS(train_contrastive(cfg, P, nullptr, ctxs, nullptr, t2),
                      ConfigError);
    t2 = tc;
    t2.epochs = 0;
    REQUIRE_THROWS_AS(train_contrastive(cfg, P, nullptr, ctxs, nullptr, t2),
                      ConfigError);
    REQUIRE_THROWS_AS(train_contrastive(cfg, P, nullptr, {}, nullptr, tc),
                      ConfigError);
  }
}

TEST_CASE("injected training loop") {
  int vocab = 0;
  std::vector<MentionContext> ctxs = synth_contexts(3, 2, 2, &vocab);
  {
    MentionContext stray = ctxs[0];
    stray.concept_id = "C9";  // no entity row for this one
    ctxs.push_back(stray);
  }
  EncoderConfig cfg = sampling_encoder(vocab, 1, 4);
  EncoderParams P = init_encoder(cfg, 51);
  Mat entity(3, 4);
  Rng rng(52);
  for (double& x : entity.a) x = rng.normal(0.0, 1.0);
  std::map<std::string, int> rows = {{"C0", 0}, {"C1", 1}, {"C2", 2}};

  InjectedTrainConfig tc;
  tc.epochs = 3;
  tc.batch_size = 4;
  tc.mask_rate = 0.3;
  tc.lr = 1e-3;
  tc.seed = 5;

  std::vector<double> entity_before = entity.a;
  InjectedTrainReport rep = train_injected(cfg, P, entity, rows, ctxs, tc);

  REQUIRE(entity.a == entity_before);
  REQUIRE(rep.el_skipped >= 3);  // the stray concept skips once per epoch
  REQUIRE(rep.mentions_used > 0);
  REQUIRE(rep.epoch_mean_loss.size() == 3);
  REQUIRE(rep.epoch_mean_loss.back() < rep.epoch_mean_loss.front());
  REQUIRE(rep.steps.size() == 3 * 4);  // ceil(13 / 4) batches per epoch

  EncoderConfig plain = sampling_encoder(vocab);
  EncoderParams Q = init_encoder(plain, 1);
  REQUIRE_THROWS_AS(train_injected(plain, Q, entity, rows, ctxs, tc),
                    ConfigError);
}
