// command line driver: every subcommand writes its outputs plus a manifest
// into a fresh run directory and prints that directory on success
#include <cstdio>
#include <list>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "kgcl/pipeline.hpp"

namespace {

struct SubCtx {
  std::string name;
  CLI::App* cmd = nullptr;
  std::string config_file;
  std::vector<std::string> sets;
  std::string out = "runs";
  std::map<std::string, std::string> values;  // stable storage for bound flags
  std::vector<std::pair<CLI::Option*, std::string>> bound;
};

SubCtx& add_sub(CLI::App& app, std::list<SubCtx>& subs, const std::string& name,
                const std::string& help,
                const std::vector<std::pair<std::string, std::string>>& flags) {
  SubCtx& c = subs.emplace_back();
  c.name = name;
  c.cmd = app.add_subcommand(name, help);
  c.cmd->add_option("--config", c.config_file, "flat key = value config file");
  c.cmd->add_option("--set", c.sets, "override one config entry, key=value")
      ->type_name("KEY=VALUE");
  c.cmd->add_option("--out", c.out, "output root directory (default runs)");
  for (const auto& [flag, key] : flags) {
    CLI::Option* o = c.cmd->add_option("--" + flag, c.values[key], "sets " + key);
    c.bound.push_back({o, key});
  }
  return c;
}

// config file first, then named flags, then --set pairs; later wins
kgcl::KvConfig resolve_config(const SubCtx& c) {
  kgcl::KvConfig cfg;
  if (!c.config_file.empty()) cfg = kgcl::load_kv(c.config_file);
  for (const auto& [opt, key] : c.bound)
    if (opt->count() > 0) cfg[key] = c.values.at(key);
  for (const std::string& s : c.sets) {
    size_t eq = s.find('=');
    if (eq == std::string::npos || eq == 0)
      throw kgcl::ConfigError("--set expects key=value, got: " + s);
    cfg[kgcl::trim(s.substr(0, eq))] = kgcl::trim(s.substr(eq + 1));
  }
  return cfg;
}

int dispatch(const CLI::App& app, std::list<SubCtx>& subs,
             const std::string& rerun_manifest, const std::string& rerun_out) {
  if (app.got_subcommand("rerun")) {
    std::string dir = kgcl::rerun_from_manifest(rerun_manifest, rerun_out);
    std::printf("%s\n", dir.c_str());
    return 0;
  }
  for (SubCtx& c : subs) {
    if (!app.got_subcommand(c.cmd)) continue;
    std::string dir = kgcl::execute_run(c.name, resolve_config(c), c.out);
    if (c.name == "gradcheck")
      std::fputs(kgcl::slurp(dir + "/gradcheck.tsv").c_str(), stdout);
    std::printf("%s\n", dir.c_str());
    return 0;
  }
  return 0;  // unreachable, require_subcommand enforces one
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"medical concept embeddings: corpus prep, graph embedding, "
               "contrastive training, and evaluation"};
  app.require_subcommand(1);

  std::list<SubCtx> subs;
  add_sub(app, subs, "build-corpus",
          "tokenize a corpus, match dictionary terms, extract mention contexts",
          {{"corpus", "corpus"},
           {"dictionary", "dictionary"},
           {"window", "window"},
           {"new-tokens", "new_tokens"}});
  add_sub(app, subs, "split-kg", "split a triple file into train/valid/test",
          {{"triples", "triples"},
           {"train", "split.train"},
           {"test", "split.test"},
           {"valid", "split.valid"},
           {"seed", "seed"}});
  add_sub(app, subs, "train-kge", "train a knowledge graph embedding model",
          {{"triples", "triples"},
           {"valid", "valid"},
           {"kind", "kge.kind"},
           {"dim", "kge.dim"},
           {"epochs", "kge.epochs"},
           {"lr", "kge.lr"},
           {"negatives", "kge.negatives"},
           {"eval-every", "kge.eval_every"},
           {"seed", "seed"}});
  add_sub(app, subs, "eval-kge", "filtered link prediction on held-out triples",
          {{"model", "kge_model"},
           {"test", "triples_test"},
           {"all", "triples_all"}});
  add_sub(app, subs, "train-contrastive",
          "contrastive fine-tuning over mention contexts",
          {{"contexts", "contexts"},
           {"vocab", "vocab"},
           {"checkpoint-in", "checkpoint_in"},
           {"kge-model", "kge_model"},
           {"variant", "contr.variant"},
           {"epochs", "contr.epochs"},
           {"steps", "contr.steps"},
           {"accum", "contr.accum"},
           {"lr", "contr.lr"},
           {"seed", "seed"}});
  add_sub(app, subs, "train-injected",
          "masked language modeling with entity embedding injection",
          {{"contexts", "contexts"},
           {"kge-model", "kge_model"},
           {"vocab", "vocab"},
           {"checkpoint-in", "checkpoint_in"},
           {"epochs", "inject.epochs"},
           {"batch", "inject.batch"},
           {"mask-rate", "inject.mask_rate"},
           {"lr", "inject.lr"},
           {"seed", "seed"}});
  add_sub(app, subs, "train-pipelined",
          "injection pre-training followed by contrastive fine-tuning",
          {{"contexts", "contexts"},
           {"kge-model", "kge_model"},
           {"vocab", "vocab"},
           {"inject-epochs", "inject.epochs"},
           {"contr-epochs", "contr.epochs"},
           {"steps", "contr.steps"},
           {"seed", "seed"}});
  add_sub(app, subs, "eval-mscm",
          "same-type purity of embedding neighborhoods, per semantic type",
          {{"checkpoint", "checkpoint"},
           {"concepts", "concepts"},
           {"vocab", "vocab"},
           {"k", "eval.k"}});
  add_sub(app, subs, "eval-clustering",
          "synonym detection by cosine threshold sweep",
          {{"checkpoint", "checkpoint"},
           {"dictionary", "dictionary"},
           {"vocab", "vocab"}});
  add_sub(app, subs, "eval-relatedness",
          "rank correlation against human relatedness judgements",
          {{"checkpoint", "checkpoint"},
           {"data", "relatedness"},
           {"vocab", "vocab"},
           {"score-lo", "score.lo"},
           {"score-hi", "score.hi"}});
  add_sub(app, subs, "gradcheck",
          "compare analytic gradients with finite differences",
          {{"seed", "seed"}, {"instances", "instances"}});

  std::string rerun_manifest, rerun_out = "runs";
  CLI::App* rerun = app.add_subcommand(
      "rerun", "repeat a recorded run after verifying its inputs");
  rerun->add_option("--manifest", rerun_manifest, "manifest.kv of the run")
      ->required();
  rerun->add_option("--out", rerun_out, "output root directory (default runs)");

  try {
    app.parse(argc, argv);
    return dispatch(app, subs, rerun_manifest, rerun_out);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  } catch (const kgcl::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 1;
  } catch (const kgcl::NumericError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return 2;
  } catch (const kgcl::IoError& e) {
    std::fprintf(stderr, "i/o error: %s\n", e.what());
    return 3;
  } catch (const std::filesystem::filesystem_error& e) {
    std::fprintf(stderr, "i/o error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
