#include <doctest.h>

#include <map>
#include <sstream>

#include "capseq/error.hpp"
#include "capseq/rng.hpp"
#include "capseq/tokenizers.hpp"
#include "support/bpe_oracle.hpp"

using namespace capseq;
using capseq::testing::naive_replay;
using capseq::testing::random_text;

namespace {

// Brute-force adjacent pair counts over a byte string, overlapping occurrences included.
std::map<std::string, int> count_pairs(const std::string& s) {
  std::map<std::string, int> counts;
  for (std::size_t i = 0; i + 1 < s.size(); ++i) ++counts[s.substr(i, 2)];
  return counts;
}

const std::vector<TokenList> kCorpus{{"no", "edema"}, {"no", "pneumonia"}};

}  // namespace

TEST_CASE("word vocabulary holds specials plus corpus tokens") {
  auto v = WordVocabulary::build(kCorpus, 1);
  CHECK(v.size() == 7);
  CHECK(v.id("<pad>") == 0);
  CHECK(v.id("<start>") == WordVocabulary::kStart);
  CHECK(v.id("<end>") == WordVocabulary::kEnd);
  CHECK(v.id("<unk>") == WordVocabulary::kUnk);
  // frequency desc, then lexicographic
  CHECK(v.token(4) == "no");
  CHECK(v.token(5) == "edema");
  CHECK(v.token(6) == "pneumonia");
}

TEST_CASE("min_freq filters rare tokens") {
  auto v = WordVocabulary::build(kCorpus, 2);
  CHECK(v.size() == 5);
  CHECK(v.find("no").has_value());
  CHECK_FALSE(v.find("edema").has_value());
}

TEST_CASE("word vocabulary build is deterministic") {
  auto a = WordVocabulary::build(kCorpus, 1);
  auto b = WordVocabulary::build(kCorpus, 1);
  CHECK(a.tokens() == b.tokens());
}

TEST_CASE("empty corpus is rejected") {
  CHECK_THROWS_AS(WordVocabulary::build(std::vector<TokenList>{}, 1), ValidationError);
}

TEST_CASE("encode_words pads, marks unknowns and truncates before <end>") {
  auto v = WordVocabulary::build(kCorpus, 1);
  const TokenList text{"no", "edema"};
  auto seq = encode_words(text, v, 6);
  CHECK(seq.ids == std::vector<int>{1, v.id("no"), v.id("edema"), 2, 0, 0});

  auto unk = encode_words(TokenList{"zzz"}, v, 4);
  CHECK(unk.ids == std::vector<int>{1, WordVocabulary::kUnk, 2, 0});

  auto cut = encode_words(TokenList{"no", "no", "no", "no"}, v, 4);
  CHECK(cut.ids == std::vector<int>{1, v.id("no"), v.id("no"), 2});

  CHECK(decode_words(seq.ids, v) == text);
  CHECK_THROWS_AS(encode_words(text, v, 1), ValidationError);
}

TEST_CASE("word encoding never emits ids outside the vocabulary") {
  auto v = WordVocabulary::build(kCorpus, 1);
  Rng rng(4);
  for (int i = 0; i < 100; ++i) {
    TokenList t;
    for (std::size_t k = rng.below(8); k > 0; --k) t.push_back(random_text(rng, 3, 26));
    for (int id : encode_words(t, v, 2 + rng.below(10)).ids) {
      CHECK(id >= 0);
      CHECK(static_cast<std::size_t>(id) < v.size());
    }
  }
}

TEST_CASE("word vocabulary file round trip") {
  auto v = WordVocabulary::build(kCorpus, 1);
  std::stringstream buf;
  v.write(buf);
  CHECK(buf.str().rfind("capseq-word-vocab v1\n<pad>\t0\n", 0) == 0);
  auto back = WordVocabulary::read(buf);
  CHECK(back.tokens() == v.tokens());
}

TEST_CASE("detokenize attaches periods") {
  CHECK(detokenize(TokenList{"no", "edema", ".", "lungs", "clear"}) == "no edema. lungs clear");
}

TEST_CASE("first BPE merge on aaabdaaabac is (a,a)") {
  const std::string corpus = "aaabdaaabac";
  auto counts = count_pairs(corpus);
  CHECK(counts["aa"] == 4);
  for (auto& [pair, n] : counts) CHECK((pair == "aa" || n < 4));

  auto v = BpeVocabulary::train(corpus, 1);
  REQUIRE(v.merges().size() == 1);
  CHECK(v.bytes(v.merges()[0].left) == "a");
  CHECK(v.bytes(v.merges()[0].right) == "a");
}

TEST_CASE("zero merges leaves bytes plus end-of-text") {
  auto v = BpeVocabulary::train("hello world", 0);
  CHECK(v.size() == 257);
  CHECK(v.bytes(BpeVocabulary::kEndOfText) == "<|endoftext|>");
  CHECK(v.merges().empty());
}

TEST_CASE("BPE ties are broken lexicographically") {
  // "ab" and "cd" both occur twice
  auto v = BpeVocabulary::train("abcdabcd", 1);
  CHECK(v.bytes(v.merges()[0].merged) == "ab");
}

TEST_CASE("each trained merge was the most frequent pair at its step") {
  Rng rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    const std::string corpus = random_text(rng, 80, 4);
    auto v = BpeVocabulary::train(corpus, 10);
    // Replay with string symbols and brute-force counts.
    std::vector<std::string> seq;
    for (char c : corpus) seq.emplace_back(1, c);
    for (const auto& m : v.merges()) {
      std::map<std::pair<std::string, std::string>, int> counts;
      for (std::size_t i = 0; i + 1 < seq.size(); ++i) ++counts[{seq[i], seq[i + 1]}];
      int best = 0;
      for (auto& [p, n] : counts) best = std::max(best, n);
      const std::pair<std::string, std::string> chosen{v.bytes(m.left), v.bytes(m.right)};
      CHECK(counts[chosen] == best);
      for (auto& [p, n] : counts)
        if (n == best) CHECK_FALSE(p < chosen);
      std::vector<std::string> next;
      for (std::size_t i = 0; i < seq.size(); ++i) {
        if (i + 1 < seq.size() && seq[i] == chosen.first && seq[i + 1] == chosen.second) {
          next.push_back(chosen.first + chosen.second);
          ++i;
        } else {
          next.push_back(seq[i]);
        }
      }
      seq = next;
    }
  }
}

TEST_CASE("a merged pair's expansion encodes to one token") {
  auto v = BpeVocabulary::train("the cat sat on the mat with the hat", 6);
  for (const auto& m : v.merges()) {
    auto seq = v.encode(v.bytes(m.merged));
    REQUIRE(seq.ids.size() == 1);
    CHECK(v.bytes(seq.ids[0]) == v.bytes(m.merged));
  }
}

TEST_CASE("BPE encoding matches the naive merge replay") {
  Rng rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    auto v = BpeVocabulary::train(random_text(rng, 200, 5), 30);
    for (int k = 0; k < 5; ++k) {
      const std::string text = random_text(rng, 60, 6);
      CHECK(v.encode(text).ids == naive_replay(text, v));
    }
  }
}

TEST_CASE("BPE round trip is lossless on arbitrary bytes") {
  Rng rng(99);
  auto v = BpeVocabulary::train(random_text(rng, 2000, 256) + "no acute cardiopulmonary process.", 50);
  for (int trial = 0; trial < 200; ++trial) {
    const std::string text = random_text(rng, 256, 256);
    auto seq = v.encode(text);
    CHECK(seq.kind == VocabKind::bpe);
    for (int id : seq.ids) CHECK(id != BpeVocabulary::kEndOfText);
    CHECK(v.decode(seq.ids) == text);
  }
}

TEST_CASE("BPE training is deterministic and closed over its corpus") {
  const std::string corpus = "no pleural effusion. no pneumothorax. heart size normal.\n";
  auto a = BpeVocabulary::train(corpus, 20);
  auto b = BpeVocabulary::train(corpus, 20);
  std::stringstream sa, sb;
  a.write(sa);
  b.write(sb);
  CHECK(sa.str() == sb.str());
  for (int id : a.encode(corpus).ids) CHECK(a.contains(id));
}

TEST_CASE("BPE decode rejects unknown ids") {
  auto v = BpeVocabulary::train("abab", 1);
  const std::vector<int> bad{0, 9999};
  CHECK_THROWS_AS(v.decode(bad), ValidationError);
}

TEST_CASE("BPE vocabulary file round trip") {
  Rng rng(5);
  auto v = BpeVocabulary::train(random_text(rng, 500, 256), 25);
  std::stringstream buf;
  v.write(buf);
  CHECK(buf.str().rfind("capseq-bpe-vocab v1\nmerges ", 0) == 0);
  auto back = BpeVocabulary::read(buf);
  REQUIRE(back.size() == v.size());
  for (int i = 0; i < static_cast<int>(v.size()); ++i) CHECK(back.bytes(i) == v.bytes(i));
  std::stringstream garbage("capseq-bpe-vocab v1\nmerges 1\n999 3\n");
  CHECK_THROWS(BpeVocabulary::read(garbage));
}
