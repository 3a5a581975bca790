#include <catch2/catch_amalgamated.hpp>

#include <string>
#include <vector>

#include "kgcl/vocab.hpp"

#include "oracles.hpp"
#include "testutil.hpp"

using namespace kgcl;

static Vocabulary make_base(const std::vector<std::string>& toks) {
  Vocabulary v;
  for (const auto& t : toks) v.add(t);
  return v;
}

TEST_CASE("extend_vocabulary decomposes new tokens over the base") {
  Vocabulary base = make_base({"pol", "mona", "re"});
  Vocabulary v = extend_vocabulary(base, {"polmonare"});

  REQUIRE(v.size() == 4);
  int tid = v.id("polmonare");
  REQUIRE(tid == 3);
  std::vector<int> expected = {base.id("pol"), base.id("mona"), base.id("re")};
  REQUIRE(v.composition_of(tid) == expected);
}

TEST_CASE("extend_vocabulary is idempotent for known tokens") {
  Vocabulary base = make_base({"alpha", "beta"});
  Vocabulary v = extend_vocabulary(base, {"alpha"});
  REQUIRE(v.tokens == base.tokens);
  REQUIRE(v.composition.empty());

  Vocabulary twice = extend_vocabulary(extend_vocabulary(base, {"alphabeta"}), {"alphabeta"});
  Vocabulary once = extend_vocabulary(base, {"alphabeta"});
  REQUIRE(twice.tokens == once.tokens);
  REQUIRE(twice.composition_of(once.id("alphabeta")) == once.composition_of(once.id("alphabeta")));
}

TEST_CASE("extend_vocabulary keeps base ids and counts additions") {
  Vocabulary base = make_base({"ab", "cd", "ef", "gh", "ij", "kl", "mn", "op", "qr", "st"});
  REQUIRE(base.size() == 10);
  std::vector<std::string> novel = {"abcd", "efgh", "ijkl", "mnop", "qrst"};
  Vocabulary v = extend_vocabulary(base, novel);

  REQUIRE(v.size() == 15);
  for (int i = 0; i < base.size(); ++i) REQUIRE(v.tokens[i] == base.tokens[i]);

  int nonempty = 0;
  for (const auto& t : novel) {
    const auto& comp = v.composition_of(v.id(t));
    if (!comp.empty()) ++nonempty;
    REQUIRE(comp == oracle::greedy_segment(base.tokens, t));
  }
  REQUIRE(nonempty == 5);
}

TEST_CASE("extend_vocabulary flags undecomposable tokens but keeps them") {
  Vocabulary base = make_base({"ab", "cd"});
  Vocabulary v = extend_vocabulary(base, {"abxy"});
  int tid = v.id("abxy");
  REQUIRE(tid >= 0);
  REQUIRE(v.composition_of(tid).empty());
  REQUIRE_NOTHROW(v.validate());
}

TEST_CASE("greedy decomposition is longest-match and agrees with the reference scan") {
  Vocabulary v = make_base({"a", "ab", "abc", "b", "bc", "c"});
  // longest-first: "abc" wins over "ab"+"c" and "a"+"bc"
  REQUIRE(greedy_decompose(v, "abc") == std::vector<int>{2});
  REQUIRE(greedy_decompose(v, "abbc") == std::vector<int>{1, 4});
  REQUIRE(greedy_decompose(v, "abd").empty());

  Rng rng(20240811);
  const std::string alphabet = "abcd";
  for (int iter = 0; iter < 300; ++iter) {
    Vocabulary rv;
    int ntok = 2 + rng.uniform_int(6);
    for (int t = 0; t < ntok; ++t) {
      std::string tok;
      int len = 1 + rng.uniform_int(3);
      for (int k = 0; k < len; ++k) tok += alphabet[rng.uniform_int(4)];
      rv.add(tok);
    }
    std::string word;
    int wlen = 1 + rng.uniform_int(8);
    for (int k = 0; k < wlen; ++k) word += alphabet[rng.uniform_int(4)];
    REQUIRE(greedy_decompose(rv, word) == oracle::greedy_segment(rv.tokens, word));
  }
}

TEST_CASE("init_new_token_embedding averages the composing rows") {
  Vocabulary base = make_base({"pol", "mona", "re"});
  Vocabulary v = extend_vocabulary(base, {"polmonare"});
  Mat emb(3, 2);
  emb.at(0, 0) = 3.0; emb.at(0, 1) = 0.0;
  emb.at(1, 0) = 0.0; emb.at(1, 1) = 6.0;
  emb.at(2, 0) = 3.0; emb.at(2, 1) = 3.0;

  auto e = init_new_token_embedding("polmonare", v, emb, 7);
  REQUIRE(e.size() == 2);
  REQUIRE(e[0] == 2.0);
  REQUIRE(e[1] == 3.0);
}

TEST_CASE("init_new_token_embedding of a single-piece composition copies the row") {
  Vocabulary v = make_base({"base", "alias"});
  v.composition[1] = {0};
  Mat emb(1, 3);
  emb.at(0, 0) = 1.5; emb.at(0, 1) = -2.0; emb.at(0, 2) = 0.25;
  auto e = init_new_token_embedding("alias", v, emb, 7);
  REQUIRE(e == std::vector<double>{1.5, -2.0, 0.25});

  // via extension the same vector appears for a token built from one base
  // token repeated, averaged with itself
  Vocabulary ext = extend_vocabulary(make_base({"base"}), {"basebase"});
  REQUIRE(ext.composition_of(ext.id("basebase")) == std::vector<int>{0, 0});
  auto e2 = init_new_token_embedding("basebase", ext, emb, 7);
  REQUIRE(e2 == std::vector<double>{1.5, -2.0, 0.25});
}

TEST_CASE("init_new_token_embedding of a two-piece composition is the midpoint") {
  Vocabulary v = extend_vocabulary(make_base({"aa", "bb"}), {"aabb"});
  Mat emb(2, 2);
  emb.at(0, 0) = 1.0; emb.at(0, 1) = 0.0;
  emb.at(1, 0) = 0.0; emb.at(1, 1) = 1.0;
  auto e = init_new_token_embedding("aabb", v, emb, 7);
  REQUIRE(e == std::vector<double>{0.5, 0.5});
}

TEST_CASE("init_new_token_embedding fallback is seeded and token-dependent") {
  Vocabulary v = extend_vocabulary(make_base({"ab"}), {"qqq", "zzz"});
  Mat emb(1, 4);
  auto a1 = init_new_token_embedding("qqq", v, emb, 42);
  auto a2 = init_new_token_embedding("qqq", v, emb, 42);
  auto b = init_new_token_embedding("zzz", v, emb, 42);
  auto c = init_new_token_embedding("qqq", v, emb, 43);
  REQUIRE(a1 == a2);
  REQUIRE(a1 != b);
  REQUIRE(a1 != c);
  for (double x : a1) REQUIRE(std::abs(x) < 0.5);
}

TEST_CASE("special vocabulary layout") {
  Vocabulary v = Vocabulary::with_specials();
  REQUIRE(v.size() == kSpecialCount);
  REQUIRE(v.id("[PAD]") == kPadId);
  REQUIRE(v.id("[UNK]") == kUnkId);
  REQUIRE(v.id("[CLS]") == kClsId);
  REQUIRE(v.id("[SEP]") == kSepId);
  REQUIRE(v.id("[MASK]") == kMaskId);
  REQUIRE(v.id("[M_s]") == kMsId);
  REQUIRE(v.id("[M_e]") == kMeId);
  REQUIRE(v.is_special(kMaskId));
  REQUIRE_FALSE(v.is_special(kSpecialCount));

  Vocabulary raw = make_base({"plain"});
  REQUIRE_FALSE(raw.has_specials());
  REQUIRE_FALSE(raw.is_special(0));
}

TEST_CASE("word encoding maps unknowns to [UNK] and round-trips known words") {
  Vocabulary v = Vocabulary::with_specials();
  v.add("dolore");
  v.add("toracico");
  auto ids = encode_words(v, {"dolore", "misterioso", "toracico"});
  REQUIRE(ids == std::vector<int>{v.id("dolore"), kUnkId, v.id("toracico")});
  REQUIRE(detokenize(v, {v.id("dolore"), v.id("toracico")}) == "dolore toracico");
}

TEST_CASE("subword encoding falls back to [UNK] only when nothing matches") {
  Vocabulary v = Vocabulary::with_specials();
  v.add("pol");
  v.add("mona");
  v.add("re");
  REQUIRE(encode_word_subwords(v, "polmonare") ==
          std::vector<int>({v.id("pol"), v.id("mona"), v.id("re")}));
  REQUIRE(encode_word_subwords(v, "pol") == std::vector<int>{v.id("pol")});
  REQUIRE(encode_word_subwords(v, "xyz") == std::vector<int>{kUnkId});
}

TEST_CASE("vocabulary save/load round trip") {
  testutil::TempDir tmp;
  Vocabulary v = Vocabulary::with_specials();
  v = extend_vocabulary(v, {"pol", "mona", "re"});
  v = extend_vocabulary(v, {"polmonare", "qq"});

  save_vocab(tmp.file("vocab.tsv"), v);
  Vocabulary r = load_vocab(tmp.file("vocab.tsv"));

  REQUIRE(r.tokens == v.tokens);
  for (int i = 0; i < v.size(); ++i) REQUIRE(r.composition_of(i) == v.composition_of(i));
  REQUIRE(r.has_specials());
}

TEST_CASE("vocabulary validation rejects bad composition ids") {
  Vocabulary v = make_base({"a", "b"});
  v.composition[1] = {5};
  REQUIRE_THROWS_AS(v.validate(), ConfigError);

  Vocabulary fwd = make_base({"a", "b"});
  fwd.composition[0] = {1};  // forward reference
  REQUIRE_THROWS_AS(fwd.validate(), ConfigError);
}
