#pragma once

// Two-stage report generation: the SAT captions the image, its detokenized
// caption plus " <start>" seeds the language model, which continues until
// <|endoftext|>.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "capseq/decoding.hpp"
#include "capseq/gpt_lm.hpp"
#include "capseq/image.hpp"
#include "capseq/sat_model.hpp"
#include "capseq/tokenizers.hpp"

namespace capseq {

inline constexpr std::string_view kLmStartMarker = "<start>";

struct CaptionOptions {
  DecodeStrategy strategy = DecodeStrategy::greedy;
  std::size_t beam_width = 5;
  std::size_t rank = 1;
  std::size_t max_len = 40;  // emitted words including <end>
  BeamScoring scoring = BeamScoring::length_normalized;
};

struct SatCaption {
  std::vector<int> ids;  // <start> and <end> excluded
  bool terminated = false;
  double log_prob = 0.0;
  std::vector<std::vector<double>> attention;  // one alpha (R values) per id
  std::optional<std::string> diagnostic;
};

// Decoder state for one image: h and c are [1, n].
struct SatDecodeState {
  Tensor h;
  Tensor c;
  int prev = WordVocabulary::kStart;
  std::vector<std::vector<double>> alphas;
};

// annotations: [R, F] encoder rows of a single image.
SatCaption sat_caption(SatModel& model, const Tensor& annotations, const CaptionOptions& options);
SatCaption sat_caption(SatModel& model, const Image& image, const CaptionOptions& options);

struct PipelineOptions {
  CaptionOptions sat;
  GenerateOptions lm{DecodeStrategy::beam, 5, 2, 48, BeamScoring::length_normalized};
  bool use_lm = true;
};

struct PipelineOutput {
  TokenList sat_seed;
  std::string seed_text;
  std::vector<int> lm_tokens;
  std::string lm_continuation;
  bool lm_terminated = false;
  std::string combined;
  std::vector<std::vector<double>> attention;  // one per seed word
  std::vector<std::string> diagnostics;
};

struct TextContinuation {
  std::vector<int> tokens;
  std::string text;  // decoded and trimmed
  bool terminated = false;
  std::vector<std::string> diagnostics;
};

// Encodes seed_text + " <start>", keeps the last block_size - 1 tokens when
// the seed is too long, and continues it.
TextContinuation continue_text(GptLm& lm, const BpeVocabulary& bpe, std::string_view seed_text,
                               const GenerateOptions& options);

// lm and bpe may be null when options.use_lm is false.
PipelineOutput two_stage_generate(SatModel& sat, const WordVocabulary& words, const Tensor& annotations, GptLm* lm,
                                  const BpeVocabulary* bpe, const PipelineOptions& options);

// LM training text: for a report of S sentences, S lines
//   "<sentences 1..j> <start> <sentences j+1..S>"   j = 1..S
// so the model learns to continue any sentence-aligned seed.
std::vector<std::string> lm_training_lines(std::span<const TokenList> reports);

// Training lines split after the start marker. Each half is tokenized on its
// own, so the token boundary after "<start>" is the one continue_text sees
// at inference; BPE merges across it would otherwise put the seed's last
// tokens out of distribution.
std::vector<std::string> lm_line_segments(std::span<const std::string> lines);
// BPE training text: one segment per line.
std::string lm_bpe_corpus(std::span<const std::string> lines);
// One window per line: segments encoded separately, then <|endoftext|>.
// Lines longer than `block` tokens are chunked with make_windows. Starting
// every line at position 0 matches inference, where the seed does too.
std::vector<std::vector<int>> lm_training_windows(std::span<const std::string> lines, const BpeVocabulary& bpe,
                                                  std::size_t block);

}  // namespace capseq
