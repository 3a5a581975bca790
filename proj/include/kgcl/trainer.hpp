#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "kgcl/contrastive.hpp"
#include "kgcl/corpus.hpp"
#include "kgcl/encoder.hpp"
#include "kgcl/errors.hpp"
#include "kgcl/optim.hpp"
#include "kgcl/sampling.hpp"

namespace kgcl {

struct ContrastiveTrainConfig {
  int epochs = 1;
  int steps_per_epoch = 8;  // optimizer steps per epoch
  int grad_accum = 8;       // virtual batches folded into one step
  int loss_variant = 3;
  MsParams ms;
  SamplingConfig sampling;
  double lr = 2e-5;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  int warmup_steps = 0;
  uint64_t seed = 1;
};

struct StepLog {
  int step = 0;
  double loss = 0.0;
  double loss_mlm = 0.0;
  double loss_el = 0.0;
};

struct ContrastiveTrainReport {
  std::vector<StepLog> steps;
  std::vector<double> epoch_mean_loss;
  int index_refreshes = 0;
  int final_index_epoch = 0;
};

namespace detail {

// Gradient of the pooled, normalized mention embedding pushed back through
// one context's forward trace.
inline void backprop_context(const EncoderConfig& cfg, const EncoderParams& P,
                             const Mat* entity, const ForwardTrace& tr,
                             Span span, const std::vector<double>& pooled_raw,
                             const double* dunit, EncoderParams& G) {
  std::vector<double> du(dunit, dunit + cfg.d_h);
  std::vector<double> dpool = l2_normalize_backward(pooled_raw, du);
  Mat dh(static_cast<int>(tr.ids.size()), cfg.d_h);
  if (cfg.pooling == Pooling::Cls) {
    double* r = dh.row(0);
    for (int j = 0; j < cfg.d_h; ++j) r[j] = dpool[j];
  } else {
    double inv = 1.0 / span.len();
    for (int t = span.start; t < span.end; ++t) {
      double* r = dh.row(t);
      for (int j = 0; j < cfg.d_h; ++j) r[j] = dpool[j] * inv;
    }
  }
  encoder_backward(cfg, P, tr, entity, dh, {}, G);
}

}  // namespace detail

// Contrastive fine-tuning over mention contexts. The similarity index is
// rebuilt after every epoch; a non-finite loss restores the last end-of-epoch
// parameters before the error surfaces, so the caller always holds a usable
// model.
inline ContrastiveTrainReport train_contrastive(
    const EncoderConfig& cfg, EncoderParams& P, const Mat* entity,
    const std::vector<MentionContext>& contexts, const KgeModel* kge,
    const ContrastiveTrainConfig& tc) {
  if (tc.loss_variant < 1 || tc.loss_variant > 3)
    throw ConfigError("loss variant must be 1, 2, or 3");
  if (tc.loss_variant == 3 && kge == nullptr)
    throw ConfigError("margin-from-graph loss needs a graph embedding model");
  if (tc.epochs < 1 || tc.steps_per_epoch < 1 || tc.grad_accum < 1)
    throw ConfigError("epochs, steps, and accumulation must be >= 1");
  if (contexts.empty()) throw ConfigError("no contexts to train on");

  PrototypeSet protos =
      build_prototypes(contexts, tc.sampling.prototypes_per_entity, tc.seed);
  SimilarityIndex index;
  refresh_index(index, cfg, P, entity, contexts);

  AdamWConfig ac;
  ac.lr = tc.lr;
  ac.weight_decay = tc.weight_decay;
  ac.clip_norm = tc.clip_norm;
  ac.warmup_steps = tc.warmup_steps;
  AdamW opt(ac);

  ContrastiveTrainReport rep;
  EncoderParams last_good = P;
  Rng batch_seeds(tc.seed ^ 0x5851f42d4c957f2dull);
  int global_step = 0;

  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    double epoch_sum = 0.0;
    int epoch_count = 0;
    for (int step = 0; step < tc.steps_per_epoch; ++step) {
      EncoderParams G = zeros_like(P);
      double micro_sum = 0.0;
      int micro_done = 0;
      for (int micro = 0; micro < tc.grad_accum; ++micro) {
        uint64_t bs = batch_seeds.next_u64();
        BatchPlan plan = plan_batch(protos, contexts, index, tc.sampling, bs);
        if (plan.rows.empty()) continue;

        int n = static_cast<int>(plan.rows.size());
        Mat emb(n, cfg.d_h);
        std::vector<ForwardTrace> traces(n);
        std::vector<std::vector<double>> raw(n);
        std::vector<Span> spans(n);
        for (int i = 0; i < n; ++i) {
          raw[i] = embed_context(cfg, P, entity, contexts[plan.rows[i]],
                                 &traces[i], nullptr, &spans[i]);
          std::vector<double> unit = l2_normalized(raw[i]);
          std::copy(unit.begin(), unit.end(), emb.row(i));
        }
        ContrastiveBatch batch =
            assemble_batch(plan, emb, tc.loss_variant == 3 ? kge : nullptr,
                           tc.sampling.epsilon);
        MsLoss ml;
        if (tc.loss_variant == 1)
          ml = ms_loss_v1(batch, tc.ms);
        else if (tc.loss_variant == 2)
          ml = ms_loss_v2(batch, tc.ms);
        else
          ml = ms_loss_v3(batch, tc.ms);

        if (!std::isfinite(ml.loss)) {
          P = last_good;
          throw NumericError(
              "non-finite contrastive loss; parameters rolled back to the "
              "last completed epoch");
        }
        micro_sum += ml.loss;
        micro_done += 1;
        for (int i = 0; i < n; ++i)
          detail::backprop_context(cfg, P, entity, traces[i], spans[i], raw[i],
                                   ml.grad.row(i), G);
      }
      if (micro_done == 0) continue;
      for (Mat* g : G.mats()) scale_inplace(*g, 1.0 / micro_done);
      try {
        opt.step(P.mats(), G.mats());
      } catch (const NumericError&) {
        P = last_good;
        throw;
      }
      ++global_step;
      double mean_loss = micro_sum / micro_done;
      rep.steps.push_back({global_step, mean_loss, 0.0, 0.0});
      epoch_sum += mean_loss;
      epoch_count += 1;
    }
    rep.epoch_mean_loss.push_back(epoch_count ? epoch_sum / epoch_count : 0.0);
    refresh_index(index, cfg, P, entity, contexts);
    rep.index_refreshes += 1;
    last_good = P;
  }
  rep.final_index_epoch = index.epoch;
  return rep;
}

struct InjectedTrainConfig {
  int epochs = 1;
  int batch_size = 8;
  double mask_rate = 0.15;
  double lr = 2e-5;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  int warmup_steps = 0;
  uint64_t seed = 1;
};

struct InjectedTrainReport {
  std::vector<StepLog> steps;
  std::vector<double> epoch_mean_loss;
  int el_skipped = 0;
  int mentions_used = 0;
};

// Joint masked-token + entity-linking training over mention contexts. The
// entity table is read-only throughout; gold rows come from the concept id
// lookup and default to "skip" when a concept is outside the table.
inline InjectedTrainReport train_injected(
    const EncoderConfig& cfg, EncoderParams& P, const Mat& entity,
    const std::map<std::string, int>& cui_to_row,
    const std::vector<MentionContext>& contexts, const InjectedTrainConfig& tc) {
  if (cfg.injection_layer <= 0)
    throw ConfigError("injected training requires an injection layer");
  if (tc.epochs < 1 || tc.batch_size < 1)
    throw ConfigError("epochs and batch size must be >= 1");
  if (contexts.empty()) throw ConfigError("no contexts to train on");

  AdamWConfig ac;
  ac.lr = tc.lr;
  ac.weight_decay = tc.weight_decay;
  ac.clip_norm = tc.clip_norm;
  ac.warmup_steps = tc.warmup_steps;
  AdamW opt(ac);

  InjectedTrainReport rep;
  EncoderParams last_good = P;
  Rng order_rng(tc.seed ^ 0x94d049bb133111ebull);
  Rng mask_seeds(tc.seed ^ 0xbf58476d1ce4e5b9ull);
  int global_step = 0;

  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    std::vector<int> order(contexts.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    order_rng.shuffle(order);

    double epoch_sum = 0.0;
    int epoch_steps = 0;
    for (size_t start = 0; start < order.size(); start += tc.batch_size) {
      std::vector<JointItem> items;
      size_t stop = std::min(order.size(), start + tc.batch_size);
      for (size_t oi = start; oi < stop; ++oi) {
        const MentionContext& ctx = contexts[order[oi]];
        std::vector<int> ids;
        ids.reserve(ctx.tokens.size() + 2);
        ids.push_back(kClsId);
        ids.insert(ids.end(), ctx.tokens.begin(), ctx.tokens.end());
        ids.push_back(kSepId);
        Span span{ctx.mention_start + 1, ctx.mention_end + 1};
        MaskResult mr =
            mlm_masking(ids, {span}, tc.mask_rate, mask_seeds.next_u64(), cfg.vocab);
        JointItem it;
        it.ids = mr.ids;
        it.targets = mr.targets;
        it.labels = mr.labels;
        it.mentions = {span};
        auto git = cui_to_row.find(ctx.concept_id);
        it.gold = {git == cui_to_row.end() ? -1 : git->second};
        items.push_back(std::move(it));
      }

      EncoderParams G = zeros_like(P);
      JointReport jr = joint_injection_loss(cfg, P, entity, items, &G);
      if (!std::isfinite(jr.total)) {
        P = last_good;
        throw NumericError(
            "non-finite joint loss; parameters rolled back to the last "
            "completed epoch");
      }
      try {
        opt.step(P.mats(), G.mats());
      } catch (const NumericError&) {
        P = last_good;
        throw;
      }
      ++global_step;
      rep.steps.push_back({global_step, jr.total, jr.mlm, jr.el});
      rep.el_skipped += jr.el_skipped;
      rep.mentions_used += jr.mentions_used;
      epoch_sum += jr.total;
      epoch_steps += 1;
    }
    rep.epoch_mean_loss.push_back(epoch_steps ? epoch_sum / epoch_steps : 0.0);
    last_good = P;
  }
  return rep;
}

}  // namespace kgcl
