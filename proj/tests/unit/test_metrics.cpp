#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <unordered_map>

#include "capseq/error.hpp"
#include "capseq/metrics.hpp"
#include "capseq/rng.hpp"
#include "support/metric_oracles.hpp"

using namespace capseq;
using namespace capseq::testing;

namespace {

TokenList words(std::initializer_list<const char*> w) { return TokenList(w.begin(), w.end()); }

EvalPair pair_of(TokenList cand, std::vector<TokenList> refs) { return {std::move(cand), std::move(refs)}; }

}  // namespace

TEST_CASE("clipped unigram precision and brevity penalty by hand") {
  std::vector<EvalPair> c{pair_of(words({"the", "the", "the", "the"}), {words({"the", "cat", "on", "the", "mat"})})};
  auto mp = modified_precision(c, 1);
  CHECK(mp.matched == 2);
  CHECK(mp.total == 4);

  std::vector<EvalPair> short_c{pair_of(words({"a", "b"}), {words({"a", "b", "c", "d"})})};
  CHECK(brevity_penalty(short_c) == std::exp(-1.0));
  CHECK(bleu_n(short_c, 1) == std::exp(-1.0));
}

TEST_CASE("perfect match scores one") {
  std::vector<EvalPair> c{pair_of(words({"no", "acute", "process", "."}), {words({"no", "acute", "process", "."})}),
                          pair_of(words({"lungs", "clear", "."}), {words({"lungs", "clear", "."})})};
  for (std::size_t n = 1; n <= 4; ++n) CHECK(bleu_n(c, n) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(rouge_l(c) == 1.0);
}

TEST_CASE("rouge-l example and disjoint pair") {
  std::vector<EvalPair> c{pair_of(words({"the", "cat", "sat"}), {words({"the", "cat", "on", "the", "mat"})})};
  CHECK(lcs_length(c[0].candidate, c[0].references[0]) == 2);
  const double R = 2.0 / 5.0, P = 2.0 / 3.0, b2 = 1.2 * 1.2;
  CHECK(rouge_l(c) == doctest::Approx((1 + b2) * R * P / (R + b2 * P)).epsilon(1e-15));
  std::vector<EvalPair> d{pair_of(words({"x", "y"}), {words({"a", "b"})})};
  CHECK(rouge_l(d) == 0.0);
}

TEST_CASE("cider on a self-matching corpus and a disjoint candidate") {
  std::vector<EvalPair> c{pair_of(words({"a", "b", "c", "d"}), {words({"a", "b", "c", "d"})}),
                          pair_of(words({"e", "f", "g", "h"}), {words({"e", "f", "g", "h"})}),
                          pair_of(words({"i", "j", "k", "l"}), {words({"i", "j", "k", "l"})})};
  CHECK(cider(c) == doctest::Approx(10.0).epsilon(1e-12));
  Rng rng(5);
  const double best = cider(c);
  for (int t = 0; t < 50; ++t) {
    auto alt = c;
    alt[0].candidate = random_sentence(rng, 1, 6);
    CHECK(cider(alt) <= best + 1e-12);
  }
  std::vector<EvalPair> d{pair_of(words({"x", "y"}), {words({"a", "b"})}), pair_of(words({"a"}), {words({"c"})})};
  CHECK(cider(d) == 0.0);
  CHECK_THROWS_AS(cider(std::vector<EvalPair>{c[0]}), ValidationError);
}

TEST_CASE("geometric mean of bleu") {
  CHECK(geometric_mean_bleu(std::vector<double>{0.4, 0.3, 0.2, 0.1}) == doctest::Approx(std::pow(0.0024, 0.25)));
  CHECK(geometric_mean_bleu(std::vector<double>{0.4, 0.3, 0.2, 0.1}) == doctest::Approx(0.2213).epsilon(1e-4));
  CHECK(geometric_mean_bleu(std::vector<double>{0.3, 0.3, 0.3, 0.3}) == doctest::Approx(0.3).epsilon(1e-15));
  CHECK(geometric_mean_bleu(std::vector<double>{0.5, 0.0, 0.2, 0.1}) == 0.0);
  CHECK_THROWS_AS(geometric_mean_bleu(std::vector<double>{-0.1, 0.2}), ValidationError);
}

TEST_CASE("every metric matches its brute-force oracle on random corpora") {
  Rng rng(20);
  for (int trial = 0; trial < 20; ++trial) {
    auto corpus = random_corpus(rng);
    for (std::size_t n = 1; n <= 4; ++n) CHECK(std::abs(bleu_n(corpus, n) - oracle_bleu(corpus, n)) <= 1e-9);
    CHECK(std::abs(rouge_l(corpus) - oracle_rouge(corpus)) <= 1e-9);
    CHECK(std::abs(cider(corpus) - oracle_cider(corpus)) <= 1e-9);
  }
}

TEST_CASE("metrics are permutation invariant and in range") {
  Rng rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    auto corpus = random_corpus(rng);
    auto shuffled = corpus;
    std::reverse(shuffled.begin(), shuffled.end());
    auto a = evaluate(corpus), b = evaluate(shuffled);
    for (std::size_t n = 0; n < 4; ++n) {
      CHECK(a.bleu[n] == doctest::Approx(b.bleu[n]).epsilon(1e-14));
      CHECK(a.bleu[n] >= 0.0);
      CHECK(a.bleu[n] <= 1.0);
    }
    CHECK(a.rouge_l == doctest::Approx(b.rouge_l).epsilon(1e-14));
    CHECK(*a.cider == doctest::Approx(*b.cider).epsilon(1e-12));
    CHECK(*a.cider >= 0.0);
    CHECK(a.to_text() == evaluate(corpus).to_text());
  }
}

TEST_CASE("bleu does not increase with n when higher-order matches nest") {
  std::vector<EvalPair> c{pair_of(words({"the", "lung", "is", "clear", "today"}), {words({"the", "lung", "is", "clear", "now"})}),
                          pair_of(words({"no", "effusion", "seen", "here"}), {words({"no", "effusion", "was", "here"})})};
  for (std::size_t n = 1; n < 4; ++n) CHECK(bleu_n(c, n + 1) <= bleu_n(c, n));
}

TEST_CASE("input validation") {
  std::vector<EvalPair> empty;
  CHECK_THROWS_AS(bleu_n(empty, 1), ValidationError);
  CHECK_THROWS_AS(rouge_l(empty), ValidationError);
  std::vector<EvalPair> c{pair_of(words({"a"}), {words({"a"})})};
  CHECK_THROWS_AS(bleu_n(c, 0), ValidationError);
  CHECK_THROWS_AS(bleu_n(c, 5), ValidationError);
  std::vector<EvalPair> no_ref{pair_of(words({"a"}), {TokenList{}})};
  CHECK_THROWS_AS(bleu_n(no_ref, 1), ValidationError);
  auto single = evaluate(c);
  CHECK_FALSE(single.cider.has_value());
  CHECK(single.to_text().find("cider=n/a") != std::string::npos);
}

TEST_CASE("aligned files, normalisation and tab-separated references") {
  const auto dir = std::filesystem::temp_directory_path() / "capseq_metrics_test";
  std::filesystem::create_directories(dir);
  {
    std::ofstream(dir / "cand.txt") << "No acute process.\nLungs clear.\n";
    std::ofstream(dir / "ref.txt") << "no acute process .\nheart normal.\tLUNGS CLEAR.\n";
    std::ofstream(dir / "short.txt") << "one line\n";
  }
  auto corpus = read_eval_corpus(dir / "cand.txt", dir / "ref.txt");
  REQUIRE(corpus.size() == 2);
  CHECK(corpus[0].candidate == words({"no", "acute", "process", "."}));
  CHECK(corpus[1].references.size() == 2);
  auto report = evaluate(corpus);
  CHECK(report.bleu[0] == doctest::Approx(1.0));
  CHECK(report.rouge_l == doctest::Approx(1.0));
  try {
    read_eval_corpus(dir / "cand.txt", dir / "short.txt");
    FAIL("expected a line-count error");
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    CHECK(msg.find('2') != std::string::npos);
    CHECK(msg.find('1') != std::string::npos);
  }
  std::filesystem::remove_all(dir);
}
