#pragma once

// Corpus-level caption metrics: BLEU-1..4, ROUGE-L, CIDEr.

#include <array>
#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "capseq/tokenizers.hpp"

namespace capseq {

struct EvalPair {
  TokenList candidate;
  std::vector<TokenList> references;  // at least one non-empty
};

// Candidate and references normalised exactly like training reports.
EvalPair make_eval_pair(std::string_view candidate, std::span<const std::string> references);

struct ClippedCounts {
  std::size_t matched = 0;
  std::size_t total = 0;
};

// Reference-clipped n-gram matches summed over the corpus.
ClippedCounts modified_precision(std::span<const EvalPair> corpus, std::size_t n);
double brevity_penalty(std::span<const EvalPair> corpus);

// Geometric mean of the modified precisions for orders 1..n times the
// brevity penalty.
double bleu_n(std::span<const EvalPair> corpus, std::size_t n);

std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b);
double rouge_l(std::span<const EvalPair> corpus, double beta = 1.2);

// Needs at least two pairs: idf_g = log(N / max(1, df_g)) over the
// per-pair reference sets. Scaled by 10.
double cider(std::span<const EvalPair> corpus);

// (b1 b2 b3 b4)^(1/4); any zero gives 0.
double geometric_mean_bleu(std::span<const double> bleu);

struct EvalReport {
  std::array<double, 4> bleu{};
  double rouge_l = 0.0;
  std::optional<double> cider;  // absent for single-pair corpora
  double geometric_mean_bleu = 0.0;
  std::size_t corpus_size = 0;

  // key=value lines, scores to 6 decimals.
  std::string to_text() const;
};

EvalReport evaluate(std::span<const EvalPair> corpus);

// Aligned line files; a reference line holds tab-separated alternatives.
std::vector<EvalPair> read_eval_corpus(const std::filesystem::path& candidates, const std::filesystem::path& references);

}  // namespace capseq
