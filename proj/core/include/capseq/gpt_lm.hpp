#pragma once

// Toy decoder-only transformer language model over BPE ids.
//
// x = tok_emb[ids] + PE[0:L]
// per block (pre-norm):
//   x += Wo . concat_h(causal_softmax(q_h k_h^T / sqrt(d_h)) v_h)   on ln1(x)
//   x += W2 . gelu(W1 . ln2(x))
// logits = ln_f(x) . head

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "capseq/autodiff.hpp"
#include "capseq/decoding.hpp"
#include "capseq/optim.hpp"
#include "capseq/tokenizers.hpp"

namespace capseq {

struct LmConfig {
  std::size_t vocab_size = 0;
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t model_dim = 32;
  std::size_t ff_dim = 128;
  std::size_t block_size = 64;

  void validate() const;
};

// Fixed sinusoidal table [length, dim]: sin on even, cos on odd columns.
Tensor sinusoidal_encoding(std::size_t length, std::size_t dim);

class GptLm {
 public:
  GptLm(LmConfig config, std::uint64_t seed);

  const LmConfig& config() const noexcept { return config_; }
  ParameterStore& params() noexcept { return store_; }
  const ParameterStore& params() const noexcept { return store_; }

  // Logits [L, V]; row t depends only on tokens[0..t].
  Var forward(Tape& tape, std::span<const int> tokens);

 private:
  Var p(const std::string& name, Tape& tape);

  LmConfig config_;
  ParameterStore store_;
  Tensor positions_;
};

// Logits without recording gradients.
Tensor lm_logits(GptLm& model, std::span<const int> tokens);

// Mean next-token cross-entropy over positions 1..L-1.
Var lm_loss(GptLm& model, Tape& tape, std::span<const int> tokens);

// Each line is followed by <|endoftext|>.
std::vector<int> lm_corpus_tokens(std::span<const std::string> lines, const BpeVocabulary& bpe);

// Windows of at most `block` tokens overlapping by one, so every adjacent
// pair of the stream is a training target exactly once.
std::vector<std::vector<int>> make_windows(std::span<const int> stream, std::size_t block);

struct LmTrainConfig {
  std::size_t epochs = 1;
  std::size_t batch_windows = 4;
  double lr = 3e-3;
  OptimizerConfig optimizer{OptimizerMethod::adam, 0.9, 0.999, 1e-8, 1.0};
  std::uint64_t seed = 0;
  bool shuffle = true;
};

struct LmBatchRecord {
  double loss = 0.0;
  StepReport step;
};

class LmTrainer {
 public:
  LmTrainer(GptLm& model, std::span<const int> stream, LmTrainConfig config);
  // Pre-built windows of 2..block_size tokens each.
  LmTrainer(GptLm& model, std::vector<std::vector<int>> windows, LmTrainConfig config);

  std::vector<LmBatchRecord> run_epoch();
  std::size_t epoch() const noexcept { return epoch_; }
  void set_epoch(std::size_t e) noexcept { epoch_ = e; }
  Optimizer& optimizer() noexcept { return optimizer_; }
  const std::vector<std::vector<int>>& windows() const noexcept { return windows_; }

 private:
  GptLm& model_;
  std::vector<std::vector<int>> windows_;
  LmTrainConfig config_;
  Optimizer optimizer_;
  std::size_t epoch_ = 0;
};

// Token-weighted mean next-token cross-entropy over windows, no gradients.
double lm_corpus_loss(GptLm& model, std::span<const std::vector<int>> windows);

std::vector<LmBatchRecord> train_lm(GptLm& model, std::span<const int> stream, const LmTrainConfig& config);

enum class DecodeStrategy { greedy, beam };

struct GenerateOptions {
  DecodeStrategy strategy = DecodeStrategy::greedy;
  std::size_t beam_width = 5;
  std::size_t rank = 1;
  std::size_t max_new = 48;
  BeamScoring scoring = BeamScoring::length_normalized;
};

struct Continuation {
  std::vector<int> tokens;  // seed and terminator excluded
  bool terminated = false;
  double log_prob = 0.0;
  std::size_t length() const noexcept { return tokens.size(); }
  std::optional<std::string> diagnostic;
};

// Stops at <|endoftext|>, after max_new tokens, or when the context reaches
// the block size.
Continuation generate_continuation(GptLm& model, std::span<const int> seed, const GenerateOptions& options);

}  // namespace capseq
