#pragma once

#include <algorithm>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "kgcl/contrastive.hpp"
#include "kgcl/corpus.hpp"
#include "kgcl/encoder.hpp"
#include "kgcl/errors.hpp"
#include "kgcl/eval.hpp"
#include "kgcl/gradcheck.hpp"
#include "kgcl/io.hpp"
#include "kgcl/kge.hpp"
#include "kgcl/sampling.hpp"
#include "kgcl/trainer.hpp"
#include "kgcl/vocab.hpp"

namespace kgcl {

// ---------------------------------------------------------------------------
// flat key-value config access

inline const std::string& kv_require(const KvConfig& kv, const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end() || it->second.empty())
    throw ConfigError("missing config key: " + key);
  return it->second;
}

inline std::string kv_str_or(const KvConfig& kv, const std::string& key,
                             const std::string& fallback) {
  auto it = kv.find(key);
  return it == kv.end() ? fallback : it->second;
}

inline double kv_double(const KvConfig& kv, const std::string& key) {
  const std::string& s = kv_require(kv, key);
  const char* c = s.c_str();
  char* end = nullptr;
  double v = std::strtod(c, &end);
  if (end == c || *end != '\0') throw ConfigError("bad number for " + key);
  return v;
}

inline uint64_t kv_u64(const KvConfig& kv, const std::string& key) {
  const std::string& s = kv_require(kv, key);
  const char* c = s.c_str();
  char* end = nullptr;
  unsigned long long v = std::strtoull(c, &end, 10);
  if (end == c || *end != '\0') throw ConfigError("bad unsigned for " + key);
  return static_cast<uint64_t>(v);
}

inline bool kv_bool(const KvConfig& kv, const std::string& key) {
  const std::string& s = kv_require(kv, key);
  if (s == "1" || s == "true") return true;
  if (s == "0" || s == "false") return false;
  throw ConfigError("bad boolean for " + key);
}

namespace detail {

// fills a default without clobbering caller-provided values
inline void default_kv(KvConfig& kv, const std::string& key, const std::string& v) {
  kv.emplace(key, v);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// run directories and manifests

inline std::string timestamp_utc() {
  std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%d-%H%M%S", &tm);
  return buf;
}

// out_root/<timestamp>-seed<seed>, suffixed when a same-second run exists
inline std::string make_run_dir(const std::string& out_root, uint64_t seed) {
  namespace fs = std::filesystem;
  fs::create_directories(out_root);
  std::string base = out_root + "/" + timestamp_utc() + "-seed" + std::to_string(seed);
  std::string dir = base;
  int n = 1;
  while (fs::exists(dir)) dir = base + "-" + std::to_string(++n);
  fs::create_directory(dir);
  return dir;
}

struct Manifest {
  std::string subcommand;
  KvConfig config;  // fully resolved, defaults included
  std::vector<std::pair<std::string, std::string>> inputs;  // path, sha256
};

inline constexpr const char* kManifestFile = "manifest.kv";

inline void note_input(Manifest& man, const std::string& path) {
  man.inputs.push_back({path, sha256_file(path)});
}

inline void write_manifest(const std::string& run_dir, const Manifest& man) {
  KvConfig kv;
  kv["manifest.format"] = "1";
  kv["manifest.subcommand"] = man.subcommand;
  for (const auto& [k, v] : man.config) kv["cfg." + k] = v;
  for (size_t i = 0; i < man.inputs.size(); ++i) {
    kv["input." + std::to_string(i) + ".path"] = man.inputs[i].first;
    kv["input." + std::to_string(i) + ".sha256"] = man.inputs[i].second;
  }
  spit(run_dir + "/" + kManifestFile, format_kv(kv));
}

inline Manifest load_manifest(const std::string& path) {
  KvConfig kv = load_kv(path);
  Manifest man;
  man.subcommand = kv_require(kv, "manifest.subcommand");
  for (const auto& [k, v] : kv)
    if (k.rfind("cfg.", 0) == 0) man.config[k.substr(4)] = v;
  for (size_t i = 0;; ++i) {
    auto pit = kv.find("input." + std::to_string(i) + ".path");
    if (pit == kv.end()) break;
    man.inputs.push_back(
        {pit->second, kv_require(kv, "input." + std::to_string(i) + ".sha256")});
  }
  return man;
}

// ---------------------------------------------------------------------------
// shared loading and embedding helpers

namespace detail {

inline Pooling pooling_from_string(const std::string& s) {
  if (s == "mean") return Pooling::Mean;
  if (s == "cls") return Pooling::Cls;
  throw ConfigError("unknown pooling: " + s);
}

inline EncoderConfig encoder_from_cfg(const KvConfig& cfg, int vocab_size) {
  EncoderConfig e;
  e.layers = kv_int(cfg, "enc.layers");
  e.d_h = kv_int(cfg, "enc.d_h");
  e.heads = kv_int(cfg, "enc.heads");
  e.d_ff = kv_int(cfg, "enc.d_ff");
  e.injection_layer = kv_int(cfg, "enc.injection_layer");
  e.candidates = kv_int(cfg, "enc.candidates");
  e.d_kge = kv_int(cfg, "enc.d_kge");
  e.max_seq = kv_int(cfg, "enc.max_seq");
  e.pooling = pooling_from_string(kv_require(cfg, "enc.pooling"));
  e.vocab = vocab_size;
  e.validate();
  return e;
}

inline void default_encoder_cfg(KvConfig& cfg) {
  default_kv(cfg, "enc.layers", "4");
  default_kv(cfg, "enc.d_h", "64");
  default_kv(cfg, "enc.heads", "4");
  default_kv(cfg, "enc.d_ff", "0");
  default_kv(cfg, "enc.injection_layer", "0");
  default_kv(cfg, "enc.candidates", "8");
  default_kv(cfg, "enc.d_kge", "0");
  default_kv(cfg, "enc.max_seq", "128");
  default_kv(cfg, "enc.pooling", "mean");
}

// words the vocabulary knows stay whole; everything else falls back to the
// greedy subword pieces (or [UNK]) so any term is embeddable
inline MentionContext bare_term_context(const Vocabulary& vocab,
                                        const std::string& term) {
  std::vector<std::string> words = split_ws(lowercase(term));
  if (words.empty()) throw ConfigError("cannot embed an empty term");
  MentionContext ctx;
  ctx.tokens.push_back(kMsId);
  for (const std::string& w : words) {
    std::vector<int> parts = encode_word_subwords(vocab, w);
    ctx.tokens.insert(ctx.tokens.end(), parts.begin(), parts.end());
  }
  ctx.tokens.push_back(kMeId);
  ctx.mention_start = 1;
  ctx.mention_end = static_cast<int>(ctx.tokens.size()) - 1;
  ctx.term = term;
  return ctx;
}

inline std::vector<double> embed_term(const EncoderConfig& ecfg,
                                      const EncoderParams& P, const Mat* entity,
                                      const Vocabulary& vocab,
                                      const std::string& term) {
  MentionContext ctx = bare_term_context(vocab, term);
  return embed_context(ecfg, P, entity, ctx, nullptr, nullptr, nullptr);
}

struct LoadedEncoder {
  EncoderConfig config;
  EncoderParams params;
  Mat entity;
  std::vector<std::string> entity_names;
  const Mat* entity_ptr() const { return entity.rows > 0 ? &entity : nullptr; }
};

inline LoadedEncoder load_encoder_input(const std::string& path, Manifest& man) {
  EncoderCheckpoint ck = load_encoder(path);
  note_input(man, path);
  note_input(man, path + ".config");
  LoadedEncoder le;
  le.config = ck.config;
  le.params = std::move(ck.params);
  le.entity = std::move(ck.entity_table);
  le.entity_names = std::move(ck.entity_names);
  return le;
}

inline void write_step_logs(const std::string& dir,
                            const std::vector<StepLog>& steps,
                            const std::vector<double>& epoch_means,
                            bool joint_columns,
                            const std::string& prefix = "") {
  std::string s = joint_columns ? "step\ttotal\tmlm\tel\n" : "step\tloss\n";
  for (const StepLog& l : steps) {
    s += std::to_string(l.step) + "\t" + format_double(l.loss);
    if (joint_columns)
      s += "\t" + format_double(l.loss_mlm) + "\t" + format_double(l.loss_el);
    s += "\n";
  }
  spit(dir + "/" + prefix + "steps.tsv", s);
  std::string e = "epoch\tmean_loss\n";
  for (size_t i = 0; i < epoch_means.size(); ++i)
    e += std::to_string(i + 1) + "\t" + format_double(epoch_means[i]) + "\n";
  spit(dir + "/" + prefix + "epochs.tsv", e);
}

struct ConceptRow {
  std::string cui, type, term;
};

// cui <TAB> type <TAB> term; one row per concept
inline std::vector<ConceptRow> load_concepts_tsv(const std::string& path) {
  std::vector<ConceptRow> rows;
  std::set<std::string> seen;
  for (const std::string& line : read_lines(path)) {
    if (line.empty()) continue;
    std::vector<std::string> f = split_char(line, '\t');
    if (f.size() != 3) throw IoError("malformed concept row: " + line);
    if (!seen.insert(f[0]).second)
      throw IoError("duplicate concept id: " + f[0]);
    rows.push_back({f[0], f[1], f[2]});
  }
  if (rows.empty()) throw IoError("no concepts in " + path);
  return rows;
}

// maps name-interned triples onto an existing model's id space
inline std::vector<Triple> remap_triples(const TripleStore& store,
                                         const std::vector<Triple>& list,
                                         const KgeModel& m) {
  std::unordered_map<std::string, int> rel_ids;
  for (int i = 0; i < static_cast<int>(m.relation_names.size()); ++i)
    rel_ids.emplace(m.relation_names[static_cast<size_t>(i)], i);
  std::vector<Triple> out;
  out.reserve(list.size());
  for (const Triple& t : list) {
    const std::string& h = store.entity_names[static_cast<size_t>(t.head)];
    const std::string& r = store.relation_names[static_cast<size_t>(t.relation)];
    const std::string& tl = store.entity_names[static_cast<size_t>(t.tail)];
    auto hit = m.entity_ids.find(h);
    auto tit = m.entity_ids.find(tl);
    auto rit = rel_ids.find(r);
    if (hit == m.entity_ids.end() || tit == m.entity_ids.end())
      throw IoError("entity not in model: " + (hit == m.entity_ids.end() ? h : tl));
    if (rit == rel_ids.end()) throw IoError("relation not in model: " + r);
    out.push_back({hit->second, rit->second, tit->second});
  }
  return out;
}

inline std::string link_pred_row(const LinkPredReport& r) {
  return format_double(r.mrr) + "\t" + format_double(r.mean_rank) + "\t" +
         format_double(r.hits1) + "\t" + format_double(r.hits3) + "\t" +
         format_double(r.hits10);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// subcommand drivers; each resolves its defaults into cfg, reads its inputs
// (noting them in the manifest) and writes its outputs under run_dir

inline void run_build_corpus(KvConfig& cfg, const std::string& dir, Manifest& man) {
  detail::default_kv(cfg, "window", "32");
  detail::default_kv(cfg, "new_tokens", "");
  const std::string& corpus_path = kv_require(cfg, "corpus");
  const std::string& dict_path = kv_require(cfg, "dictionary");
  int window = kv_int(cfg, "window");

  std::vector<Document> docs = load_documents(corpus_path);
  note_input(man, corpus_path);
  std::map<std::string, std::string> dict = load_dictionary(dict_path);
  note_input(man, dict_path);

  std::vector<std::string> fresh;
  std::string tokens_path = kv_str_or(cfg, "new_tokens", "");
  if (!tokens_path.empty()) {
    for (const std::string& line : read_lines(tokens_path))
      if (!trim(line).empty()) fresh.push_back(trim(line));
    note_input(man, tokens_path);
  } else {
    fresh = corpus_word_types(docs);
  }
  std::sort(fresh.begin(), fresh.end());
  Vocabulary vocab = extend_vocabulary(Vocabulary::with_specials(), fresh);

  std::vector<Mention> mentions = match_mentions(docs, dict);
  std::vector<MentionContext> contexts = extract_contexts(docs, mentions, vocab, window);

  save_vocab(dir + "/vocab.tsv", vocab);
  save_contexts_jsonl(dir + "/contexts.jsonl", contexts);
  spit(dir + "/corpus_stats.tsv",
       "documents\t" + std::to_string(docs.size()) + "\n" +
           "vocab_size\t" + std::to_string(vocab.size()) + "\n" +
           "mentions\t" + std::to_string(mentions.size()) + "\n" +
           "contexts\t" + std::to_string(contexts.size()) + "\n");
}

inline void run_split_kg(KvConfig& cfg, const std::string& dir, Manifest& man) {
  detail::default_kv(cfg, "split.train", "0.8");
  detail::default_kv(cfg, "split.test", "0.1");
  detail::default_kv(cfg, "split.valid", "0.1");
  detail::default_kv(cfg, "seed", "1");
  const std::string& triples_path = kv_require(cfg, "triples");

  TripleStore store;
  load_triples_tsv(triples_path, store);
  note_input(man, triples_path);

  int moved = 0;
  TripleSplit split =
      split_triples(store.triples, kv_double(cfg, "split.train"),
                    kv_double(cfg, "split.test"), kv_double(cfg, "split.valid"),
                    kv_u64(cfg, "seed"), &moved);
  save_triples_tsv(dir + "/train.tsv", store, split.train);
  save_triples_tsv(dir + "/valid.tsv", store, split.valid);
  save_triples_tsv(dir + "/test.tsv", store, split.test);
  spit(dir + "/split_stats.tsv",
       "train\t" + std::to_string(split.train.size()) + "\n" +
           "valid\t" + std::to_string(split.valid.size()) + "\n" +
           "test\t" + std::to_string(split.test.size()) + "\n" +
           "moved_to_train\t" + std::to_string(moved) + "\n");
}

inline void run_train_kge(KvConfig& cfg, const std::string& dir, Manifest& man) {
  detail::default_kv(cfg, "kge.kind", "transe");
  detail::default_kv(cfg, "kge.dim", "64");
  detail::default_kv(cfg, "kge.epochs", "100");
  detail::default_kv(cfg, "kge.lr", "0.05");
  detail::default_kv(cfg, "kge.negatives", "1");
  detail::default_kv(cfg, "kge.eval_every", "0");
  detail::default_kv(cfg, "valid", "");
  detail::default_kv(cfg, "seed", "1");
  const std::string& train_path = kv_require(cfg, "triples");
  std::string valid_path = kv_str_or(cfg, "valid", "");
  int eval_every = kv_int(cfg, "kge.eval_every");
  if (eval_every > 0 && valid_path.empty())
    throw ConfigError("kge.eval_every needs a validation triple file");

  TripleStore store;
  load_triples_tsv(train_path, store);
  note_input(man, train_path);
  size_t n_train = store.triples.size();
  if (!valid_path.empty()) {
    load_triples_tsv(valid_path, store);
    note_input(man, valid_path);
  }
  std::vector<Triple> train(store.triples.begin(),
                            store.triples.begin() + static_cast<long>(n_train));
  std::vector<Triple> valid(store.triples.begin() + static_cast<long>(n_train),
                            store.triples.end());

  KgeKind kind = kge_kind_from_string(kv_require(cfg, "kge.kind"));
  uint64_t seed = kv_u64(cfg, "seed");
  int epochs = kv_int(cfg, "kge.epochs");
  double lr = kv_double(cfg, "kge.lr");
  int negatives = kv_int(cfg, "kge.negatives");

  KgeModel model = init_kge(kind, static_cast<int>(store.entity_names.size()),
                            static_cast<int>(store.relation_names.size()),
                            kv_int(cfg, "kge.dim"), seed);
  model.set_names(store.entity_names, store.relation_names);
  Rng rng(seed ^ 0x9e3779b97f4a7c15ull);

  std::vector<double> losses;
  std::string eval_rows;
  if (eval_every > 0) {
    for (int done = 0; done < epochs;) {
      int step = std::min(eval_every, epochs - done);
      std::vector<double> seg = train_kge_epochs(model, train, step, lr, negatives, rng);
      losses.insert(losses.end(), seg.begin(), seg.end());
      done += step;
      LinkPredReport rep = link_prediction_eval(model, valid, store.triples);
      eval_rows += std::to_string(done) + "\t" + detail::link_pred_row(rep) + "\n";
    }
  } else {
    losses = train_kge_epochs(model, train, epochs, lr, negatives, rng);
  }

  save_kge(dir + "/kge.bin", model);
  std::string rows = "epoch\tloss\n";
  for (size_t i = 0; i < losses.size(); ++i)
    rows += std::to_string(i + 1) + "\t" + format_double(losses[i]) + "\n";
  spit(dir + "/kge_train.tsv", rows);
  if (eval_every > 0)
    spit(dir + "/kge_eval.tsv",
         "epoch\tmrr\tmean_rank\thits1\thits3\thits10\n" + eval_rows);
}

inline void run_eval_kge(KvConfig& cfg, const std::string& dir, Manifest& man) {
  const std::string& model_path = kv_require(cfg, "kge_model");
  const std::string& test_path = kv_require(cfg, "triples_test");
  const std::string& all_path = kv_require(cfg, "triples_all");

  KgeModel model = load_kge(model_path);
  note_input(man, model_path);
  TripleStore test_store, all_store;
  load_triples_tsv(test_path, test_store);
  note_input(man, test_path);
  load_triples_tsv(all_path, all_store);
  note_input(man, all_path);

  std::vector<Triple> test = detail::remap_triples(test_store, test_store.triples, model);
  std::vector<Triple> known = detail::remap_triples(all_store, all_store.triples, model);
  LinkPredReport rep = link_prediction_eval(model, test, known);
  spit(dir + "/kge_test_eval.tsv", "mrr\tmean_rank\thits1\thits3\thits10\n" +
                                       detail::link_pred_row(rep) + "\n");
}

namespace detail {

inline void default_contrastive_cfg(KvConfig& cfg) {
  default_kv(cfg, "contr.epochs", "1");
  default_kv(cfg, "contr.steps", "8");
  default_kv(cfg, "contr.accum", "8");
  default_kv(cfg, "contr.lr", "2e-5");
  default_kv(cfg, "train.weight_decay", "0.01");
  default_kv(cfg, "train.clip_norm", "1");
  default_kv(cfg, "train.warmup", "0");
  default_kv(cfg, "sampling.prototypes_per_entity", "2");
  default_kv(cfg, "sampling.prototypes_per_step", "4");
  default_kv(cfg, "sampling.k", "20");
  default_kv(cfg, "sampling.m", "30");
  default_kv(cfg, "sampling.per_term_cap", "4");
  default_kv(cfg, "sampling.epsilon", "0.1");
  default_kv(cfg, "ms.alpha", "2");
  default_kv(cfg, "ms.beta", "50");
  default_kv(cfg, "ms.lambda", "0.5");
  default_kv(cfg, "ms.lambda_p", "1");
  default_kv(cfg, "ms.lambda_n", "0.5");
}

inline ContrastiveTrainConfig contrastive_from_cfg(const KvConfig& cfg,
                                                   int variant, uint64_t seed) {
  ContrastiveTrainConfig tc;
  tc.epochs = kv_int(cfg, "contr.epochs");
  tc.steps_per_epoch = kv_int(cfg, "contr.steps");
  tc.grad_accum = kv_int(cfg, "contr.accum");
  tc.loss_variant = variant;
  tc.lr = kv_double(cfg, "contr.lr");
  tc.weight_decay = kv_double(cfg, "train.weight_decay");
  tc.clip_norm = kv_double(cfg, "train.clip_norm");
  tc.warmup_steps = kv_int(cfg, "train.warmup");
  tc.seed = seed;
  tc.sampling.prototypes_per_entity = kv_int(cfg, "sampling.prototypes_per_entity");
  tc.sampling.prototypes_per_step = kv_int(cfg, "sampling.prototypes_per_step");
  tc.sampling.k = kv_int(cfg, "sampling.k");
  tc.sampling.m = kv_int(cfg, "sampling.m");
  tc.sampling.per_term_cap = kv_int(cfg, "sampling.per_term_cap");
  tc.sampling.epsilon = kv_double(cfg, "sampling.epsilon");
  tc.ms.alpha = kv_double(cfg, "ms.alpha");
  tc.ms.beta = kv_double(cfg, "ms.beta");
  tc.ms.epsilon = kv_double(cfg, "sampling.epsilon");
  tc.ms.lambda = kv_double(cfg, "ms.lambda");
  tc.ms.lambda_p = kv_double(cfg, "ms.lambda_p");
  tc.ms.lambda_n = kv_double(cfg, "ms.lambda_n");
  return tc;
}

inline void default_injected_cfg(KvConfig& cfg) {
  default_kv(cfg, "inject.epochs", "1");
  default_kv(cfg, "inject.batch", "8");
  default_kv(cfg, "inject.mask_rate", "0.15");
  default_kv(cfg, "inject.lr", "2e-5");
  default_kv(cfg, "train.weight_decay", "0.01");
  default_kv(cfg, "train.clip_norm", "1");
  default_kv(cfg, "train.warmup", "0");
}

inline InjectedTrainConfig injected_from_cfg(const KvConfig& cfg, uint64_t seed) {
  InjectedTrainConfig tc;
  tc.epochs = kv_int(cfg, "inject.epochs");
  tc.batch_size = kv_int(cfg, "inject.batch");
  tc.mask_rate = kv_double(cfg, "inject.mask_rate");
  tc.lr = kv_double(cfg, "inject.lr");
  tc.weight_decay = kv_double(cfg, "train.weight_decay");
  tc.clip_norm = kv_double(cfg, "train.clip_norm");
  tc.warmup_steps = kv_int(cfg, "train.warmup");
  tc.seed = seed;
  return tc;
}

inline Vocabulary load_vocab_input(const KvConfig& cfg, Manifest& man) {
  const std::string& path = kv_require(cfg, "vocab");
  Vocabulary v = load_vocab(path);
  note_input(man, path);
  return v;
}

}  // namespace detail

inline void run_train_contrastive(KvConfig& cfg, const std::string& dir,
                                  Manifest& man) {
  detail::default_encoder_cfg(cfg);
  detail::default_contrastive_cfg(cfg);
  detail::default_kv(cfg, "contr.variant", "1");
  detail::default_kv(cfg, "checkpoint_in", "");
  detail::default_kv(cfg, "kge_model", "");
  detail::default_kv(cfg, "seed", "1");
  const std::string& contexts_path = kv_require(cfg, "contexts");
  uint64_t seed = kv_u64(cfg, "seed");
  int variant = kv_int(cfg, "contr.variant");

  std::vector<MentionContext> contexts = load_contexts_jsonl(contexts_path);
  note_input(man, contexts_path);

  KgeModel kge;
  bool has_kge = !kv_str_or(cfg, "kge_model", "").empty();
  if (has_kge) {
    kge = load_kge(kv_require(cfg, "kge_model"));
    note_input(man, kv_require(cfg, "kge_model"));
  }

  EncoderConfig ecfg;
  EncoderParams P;
  Mat entity;
  std::vector<std::string> entity_names;
  std::string parent;
  std::string ckpt_in = kv_str_or(cfg, "checkpoint_in", "");
  if (!ckpt_in.empty()) {
    detail::LoadedEncoder le = detail::load_encoder_input(ckpt_in, man);
    ecfg = le.config;
    P = std::move(le.params);
    entity = std::move(le.entity);
    entity_names = std::move(le.entity_names);
    parent = sha256_file(ckpt_in);
  } else {
    Vocabulary vocab = detail::load_vocab_input(cfg, man);
    ecfg = detail::encoder_from_cfg(cfg, vocab.size());
    P = init_encoder(ecfg, seed);
  }

  const Mat* entity_ptr = entity.rows > 0 ? &entity : nullptr;
  ContrastiveTrainConfig tc = detail::contrastive_from_cfg(cfg, variant, seed);
  ContrastiveTrainReport rep = train_contrastive(
      ecfg, P, entity_ptr, contexts, has_kge ? &kge : nullptr, tc);

  save_encoder(dir + "/encoder.ckpt", ecfg, P, entity_ptr,
               entity_names.empty() ? nullptr : &entity_names, parent);
  detail::write_step_logs(dir, rep.steps, rep.epoch_mean_loss, false);
  spit(dir + "/train_report.tsv",
       "index_refreshes\t" + std::to_string(rep.index_refreshes) + "\n" +
           "final_index_epoch\t" + std::to_string(rep.final_index_epoch) + "\n");
}

inline void run_train_injected(KvConfig& cfg, const std::string& dir,
                               Manifest& man) {
  detail::default_encoder_cfg(cfg);
  detail::default_injected_cfg(cfg);
  detail::default_kv(cfg, "checkpoint_in", "");
  detail::default_kv(cfg, "seed", "1");
  const std::string& contexts_path = kv_require(cfg, "contexts");
  const std::string& kge_path = kv_require(cfg, "kge_model");
  uint64_t seed = kv_u64(cfg, "seed");

  std::vector<MentionContext> contexts = load_contexts_jsonl(contexts_path);
  note_input(man, contexts_path);
  KgeModel kge = load_kge(kge_path);
  note_input(man, kge_path);

  EncoderConfig ecfg;
  EncoderParams P;
  std::string parent;
  std::string ckpt_in = kv_str_or(cfg, "checkpoint_in", "");
  if (!ckpt_in.empty()) {
    detail::LoadedEncoder le = detail::load_encoder_input(ckpt_in, man);
    ecfg = le.config;
    P = std::move(le.params);
    parent = sha256_file(ckpt_in);
  } else {
    Vocabulary vocab = detail::load_vocab_input(cfg, man);
    cfg["enc.d_kge"] = std::to_string(kge.dim);
    if (kv_int(cfg, "enc.injection_layer") < 1)
      cfg["enc.injection_layer"] =
          std::to_string(std::min(3, kv_int(cfg, "enc.layers")));
    ecfg = detail::encoder_from_cfg(cfg, vocab.size());
    P = init_encoder(ecfg, seed);
  }
  if (ecfg.d_kge != kge.dim)
    throw ConfigError("encoder d_kge does not match the graph model dimension");

  std::map<std::string, int> cui_to_row;
  for (int i = 0; i < static_cast<int>(kge.entity_names.size()); ++i)
    cui_to_row[kge.entity_names[static_cast<size_t>(i)]] = i;

  InjectedTrainConfig tc = detail::injected_from_cfg(cfg, seed);
  InjectedTrainReport rep = train_injected(ecfg, P, kge.entity, cui_to_row, contexts, tc);

  save_encoder(dir + "/encoder.ckpt", ecfg, P, &kge.entity, &kge.entity_names, parent);
  detail::write_step_logs(dir, rep.steps, rep.epoch_mean_loss, true);
  spit(dir + "/train_report.tsv",
       "el_skipped\t" + std::to_string(rep.el_skipped) + "\n" +
           "mentions_used\t" + std::to_string(rep.mentions_used) + "\n");
}

// injection pre-training then margin-from-graph contrastive fine-tuning on
// the same weights; the final checkpoint's parent is the injected one
inline void run_train_pipelined(KvConfig& cfg, const std::string& dir,
                                Manifest& man) {
  detail::default_encoder_cfg(cfg);
  detail::default_injected_cfg(cfg);
  detail::default_contrastive_cfg(cfg);
  detail::default_kv(cfg, "seed", "1");
  const std::string& contexts_path = kv_require(cfg, "contexts");
  const std::string& kge_path = kv_require(cfg, "kge_model");
  uint64_t seed = kv_u64(cfg, "seed");

  std::vector<MentionContext> contexts = load_contexts_jsonl(contexts_path);
  note_input(man, contexts_path);
  KgeModel kge = load_kge(kge_path);
  note_input(man, kge_path);
  Vocabulary vocab = detail::load_vocab_input(cfg, man);

  cfg["enc.d_kge"] = std::to_string(kge.dim);
  if (kv_int(cfg, "enc.injection_layer") < 1)
    cfg["enc.injection_layer"] =
        std::to_string(std::min(3, kv_int(cfg, "enc.layers")));
  EncoderConfig ecfg = detail::encoder_from_cfg(cfg, vocab.size());
  EncoderParams P = init_encoder(ecfg, seed);

  std::map<std::string, int> cui_to_row;
  for (int i = 0; i < static_cast<int>(kge.entity_names.size()); ++i)
    cui_to_row[kge.entity_names[static_cast<size_t>(i)]] = i;

  InjectedTrainConfig itc = detail::injected_from_cfg(cfg, seed);
  InjectedTrainReport irep = train_injected(ecfg, P, kge.entity, cui_to_row, contexts, itc);
  std::string injected_path = dir + "/encoder_injected.ckpt";
  save_encoder(injected_path, ecfg, P, &kge.entity, &kge.entity_names, "");
  detail::write_step_logs(dir, irep.steps, irep.epoch_mean_loss, true, "injected_");

  ContrastiveTrainConfig ctc = detail::contrastive_from_cfg(cfg, 3, seed);
  ContrastiveTrainReport crep =
      train_contrastive(ecfg, P, &kge.entity, contexts, &kge, ctc);
  save_encoder(dir + "/encoder.ckpt", ecfg, P, &kge.entity, &kge.entity_names,
               sha256_file(injected_path));
  detail::write_step_logs(dir, crep.steps, crep.epoch_mean_loss, false,
                          "contrastive_");
  spit(dir + "/train_report.tsv",
       "el_skipped\t" + std::to_string(irep.el_skipped) + "\n" +
           "mentions_used\t" + std::to_string(irep.mentions_used) + "\n" +
           "index_refreshes\t" + std::to_string(crep.index_refreshes) + "\n");
}

inline void run_eval_mscm(KvConfig& cfg, const std::string& dir, Manifest& man) {
  detail::default_kv(cfg, "eval.k", "40");
  const std::string& ckpt = kv_require(cfg, "checkpoint");
  const std::string& concepts_path = kv_require(cfg, "concepts");
  int k = kv_int(cfg, "eval.k");

  detail::LoadedEncoder le = detail::load_encoder_input(ckpt, man);
  Vocabulary vocab = detail::load_vocab_input(cfg, man);
  std::vector<detail::ConceptRow> rows = detail::load_concepts_tsv(concepts_path);
  note_input(man, concepts_path);

  TypedConceptSet set;
  set.embeddings = Mat(static_cast<int>(rows.size()), le.config.d_h);
  for (size_t i = 0; i < rows.size(); ++i) {
    set.ids.push_back(rows[i].cui);
    set.types.push_back(rows[i].type);
    std::vector<double> v =
        detail::embed_term(le.config, le.params, le.entity_ptr(), vocab, rows[i].term);
    std::copy(v.begin(), v.end(), set.embeddings.row(static_cast<int>(i)));
  }

  MscmReport rep = mscm_report(set, k);
  std::string header, values;
  for (const auto& [type, score] : rep.per_type) {
    header += type + "\t";
    values += format_double(score) + "\t";
  }
  header += "AVG";
  values += format_double(rep.average);
  spit(dir + "/mscm.tsv", header + "\n" + values + "\n");
}

inline void run_eval_clustering(KvConfig& cfg, const std::string& dir,
                                Manifest& man) {
  detail::default_kv(cfg, "theta.lo", "0.5");
  detail::default_kv(cfg, "theta.hi", "0.99");
  detail::default_kv(cfg, "theta.step", "0.01");
  const std::string& ckpt = kv_require(cfg, "checkpoint");
  const std::string& dict_path = kv_require(cfg, "dictionary");

  detail::LoadedEncoder le = detail::load_encoder_input(ckpt, man);
  Vocabulary vocab = detail::load_vocab_input(cfg, man);
  std::map<std::string, std::string> dict = load_dictionary(dict_path);
  note_input(man, dict_path);

  std::vector<std::string> terms;
  std::map<std::string, int> term_row;
  for (const auto& [term, cui] : dict)
    if (term_row.emplace(term, static_cast<int>(terms.size())).second)
      terms.push_back(term);
  if (terms.size() < 2) throw ConfigError("need at least two dictionary terms");

  Mat emb(static_cast<int>(terms.size()), le.config.d_h);
  for (size_t i = 0; i < terms.size(); ++i) {
    std::vector<double> v =
        detail::embed_term(le.config, le.params, le.entity_ptr(), vocab, terms[i]);
    std::copy(v.begin(), v.end(), emb.row(static_cast<int>(i)));
  }

  std::vector<std::pair<int, int>> gold;
  for (const auto& [cui, list] : concept_terms(dict))
    for (size_t a = 0; a < list.size(); ++a)
      for (size_t b = a + 1; b < list.size(); ++b)
        gold.push_back({term_row.at(list[a]), term_row.at(list[b])});
  if (gold.empty())
    throw ConfigError("dictionary has no concept with two or more terms");

  double lo = kv_double(cfg, "theta.lo");
  double hi = kv_double(cfg, "theta.hi");
  double step = kv_double(cfg, "theta.step");
  if (step <= 0 || hi < lo) throw ConfigError("bad theta grid");
  std::vector<double> grid;
  int count = static_cast<int>((hi - lo) / step + 0.5) + 1;
  for (int i = 0; i < count; ++i) grid.push_back(lo + i * step);

  PairMetrics m = clustering_pair_eval(emb, gold, grid);
  spit(dir + "/clustering.tsv",
       "theta\taccuracy\tprecision\trecall\tf1\n" + format_double(m.theta) +
           "\t" + format_double(m.accuracy) + "\t" + format_double(m.precision) +
           "\t" + format_double(m.recall) + "\t" + format_double(m.f1) + "\n");
}

inline void run_eval_relatedness(KvConfig& cfg, const std::string& dir,
                                 Manifest& man) {
  detail::default_kv(cfg, "score.lo", "0");
  detail::default_kv(cfg, "score.hi", "10");
  const std::string& ckpt = kv_require(cfg, "checkpoint");
  const std::string& data_path = kv_require(cfg, "relatedness");

  detail::LoadedEncoder le = detail::load_encoder_input(ckpt, man);
  Vocabulary vocab = detail::load_vocab_input(cfg, man);
  RelatednessDataset ds = load_relatedness_tsv(data_path, kv_double(cfg, "score.lo"),
                                               kv_double(cfg, "score.hi"));
  note_input(man, data_path);

  std::vector<double> sims;
  sims.reserve(ds.pairs.size());
  for (const RelatednessPair& p : ds.pairs) {
    std::vector<double> a =
        detail::embed_term(le.config, le.params, le.entity_ptr(), vocab, p.term_a);
    std::vector<double> b =
        detail::embed_term(le.config, le.params, le.entity_ptr(), vocab, p.term_b);
    sims.push_back(cosine(a.data(), b.data(), le.config.d_h));
  }
  double rho = spearman_relatedness(ds, sims);
  spit(dir + "/relatedness.tsv", "spearman_rho\tpairs\n" + format_double(rho) +
                                     "\t" + std::to_string(ds.pairs.size()) + "\n");
}

inline void run_gradcheck_cmd(KvConfig& cfg, const std::string& dir, Manifest&) {
  detail::default_kv(cfg, "seed", "1");
  detail::default_kv(cfg, "instances", "100");
  GradCheckReport rep =
      run_gradient_suite(kv_u64(cfg, "seed"), kv_int(cfg, "instances"));
  std::string text = format_gradcheck(rep);
  spit(dir + "/gradcheck.tsv", text);
  if (!rep.all_ok()) throw NumericError("gradient suite failed\n" + text);
}

// ---------------------------------------------------------------------------
// dispatch

inline void run_subcommand(const std::string& name, KvConfig& cfg,
                           const std::string& dir, Manifest& man) {
  if (name == "build-corpus") return run_build_corpus(cfg, dir, man);
  if (name == "split-kg") return run_split_kg(cfg, dir, man);
  if (name == "train-kge") return run_train_kge(cfg, dir, man);
  if (name == "eval-kge") return run_eval_kge(cfg, dir, man);
  if (name == "train-contrastive") return run_train_contrastive(cfg, dir, man);
  if (name == "train-injected") return run_train_injected(cfg, dir, man);
  if (name == "train-pipelined") return run_train_pipelined(cfg, dir, man);
  if (name == "eval-mscm") return run_eval_mscm(cfg, dir, man);
  if (name == "eval-clustering") return run_eval_clustering(cfg, dir, man);
  if (name == "eval-relatedness") return run_eval_relatedness(cfg, dir, man);
  if (name == "gradcheck") return run_gradcheck_cmd(cfg, dir, man);
  throw ConfigError("unknown subcommand: " + name);
}

// creates the run directory, runs, writes the manifest; partial outputs are
// removed when anything throws
inline std::string execute_run(const std::string& subcommand, KvConfig cfg,
                               const std::string& out_root) {
  uint64_t seed = 1;
  auto it = cfg.find("seed");
  if (it != cfg.end()) seed = kv_u64(cfg, "seed");
  std::string dir = make_run_dir(out_root, seed);
  try {
    Manifest man;
    man.subcommand = subcommand;
    run_subcommand(subcommand, cfg, dir, man);
    man.config = cfg;
    write_manifest(dir, man);
  } catch (...) {
    std::filesystem::remove_all(dir);
    throw;
  }
  return dir;
}

// re-executes a recorded run after verifying its inputs are unchanged
inline std::string rerun_from_manifest(const std::string& manifest_path,
                                       const std::string& out_root) {
  Manifest man = load_manifest(manifest_path);
  for (const auto& [path, hash] : man.inputs)
    if (sha256_file(path) != hash)
      throw IoError("input changed since the manifest was written: " + path);
  return execute_run(man.subcommand, man.config, out_root);
}

}  // namespace kgcl
