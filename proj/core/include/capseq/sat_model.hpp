#pragma once

// Show-Attend-Tell caption generator: conv encoder, soft attention over
// spatial regions, LSTM decoder with MLP state initialisers and a deep
// output layer, trained with teacher forcing.
//
// Shapes for a batch of B images, R = r*r regions, F features:
//   annotations   [B*R, F]   row b*R + i is region i of image b
//   h, c          [B, n]
//   alpha         [B, R]
//   context       [B, F]

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "capseq/autodiff.hpp"
#include "capseq/image.hpp"
#include "capseq/optim.hpp"
#include "capseq/rng.hpp"

namespace capseq {

struct SatConfig {
  std::size_t vocab_size = 0;  // W
  std::size_t embed_dim = 32;  // m
  std::size_t hidden_dim = 64;  // n
  std::size_t attention_dim = 32;  // d_att
  double dropout = 0.1;
  double lambda_ds = 0.0;
  std::size_t pooled_side = 4;  // r
  std::size_t features = 32;  // F, channels of the last conv layer
  std::size_t conv1_channels = 8;
  std::size_t conv2_channels = 16;
  std::size_t kernel_size = 3;
  std::size_t image_side = 32;
  bool fine_tune_encoder = false;
  // Parameter-free per-region standardisation of the encoder output, so
  // annotation vectors are O(1) like a batch-normalised backbone's.
  bool normalize_annotations = true;

  // Throws ValidationError on any violated precondition.
  void validate() const;
};

struct AnnotationGrid {
  Var rows;
  std::size_t batch = 0;
  std::size_t regions = 0;
  std::size_t features = 0;
  std::size_t side = 0;
};

struct DecoderState {
  Var h;
  Var c;
};

struct AttentionOutput {
  Var alpha;
  Var context;
};

class SatModel {
 public:
  SatModel(SatConfig config, std::uint64_t seed);

  const SatConfig& config() const noexcept { return config_; }
  ParameterStore& params() noexcept { return store_; }
  const ParameterStore& params() const noexcept { return store_; }

  // Disabled: every encoder parameter frozen. Enabled: the last conv layer
  // becomes trainable, the earlier two stay frozen.
  void set_encoder_finetune(bool enabled);
  bool encoder_finetune() const noexcept { return config_.fine_tune_encoder; }
  std::vector<Parameter*> encoder_params();
  std::vector<Parameter*> decoder_params();

  // images: B images of identical extents, each at least r x r.
  AnnotationGrid encode_image(Tape& tape, std::span<const Image* const> images);
  // Wraps precomputed annotation rows ([B*R, F]) as a grid.
  AnnotationGrid annotations(Tape& tape, const Tensor& rows, std::size_t batch);

  DecoderState init_state(const AnnotationGrid& a);
  AttentionOutput attend(const AnnotationGrid& a, const Var& h_prev);
  DecoderState lstm_step(std::span<const int> z_prev, const DecoderState& state, const Var& context);
  // Probabilities [B, W]. Dropout on h applies only when `training`.
  Var output_distribution(const Var& h, const Var& context, std::span<const int> z_prev, bool training, Rng& rng);

 private:
  Var p(const char* name, Tape& tape);

  SatConfig config_;
  ParameterStore store_;
};

// Teacher-forced caption batch. Captions hold word ids starting with
// <start> and ending with <end>, without padding; their length is the
// number of predicted tokens (ids.size() - 1).
struct SatExample {
  const Image* image = nullptr;
  const Tensor* annotations = nullptr;  // optional cached encoder output [R, F]
  std::vector<int> caption;
};

struct SatForward {
  Var loss;
  Var cross_entropy;
  std::optional<Var> penalty;
  std::size_t target_count = 0;
  std::size_t clamped = 0;  // target probabilities below 1e-12
  // Per-step attention, alphas[t] is [b_t, R] over the effective batch.
  std::vector<Var> alphas;
  std::vector<std::size_t> effective_batch;
};

// Sorts by decreasing caption length (stable), unrolls the decoder with
// ground-truth inputs and computes
//   mean NLL over target tokens + lambda_ds * mean_b sum_i (1 - sum_t alpha_ti)^2.
SatForward sat_forward(SatModel& model, Tape& tape, std::span<const SatExample> batch, bool training, Rng& rng);

// Scalar loss from precomputed per-step probabilities and attention.
// probs[t] is [b_t, W], targets[t] has b_t entries, alphas[t] is [b_t, R]
// (rows ordered by decreasing caption length). Penalty averaged over the
// batch of size alphas[0] rows; skipped entirely when lambda_ds == 0.
Var sat_loss(std::span<const Var> probs, std::span<const std::vector<int>> targets, std::span<const Var> alphas,
             double lambda_ds, std::size_t* clamped = nullptr);

// Caption order by decreasing length (stable) and the effective batch per step.
std::vector<std::size_t> sort_by_length(std::span<const std::size_t> lengths);
std::vector<std::size_t> effective_batch_sizes(std::span<const std::size_t> sorted_lengths);

struct SatTrainConfig {
  std::size_t epochs = 1;
  std::size_t batch_size = 2;
  double lr = 3e-3;
  double encoder_lr = 3e-3;
  OptimizerConfig optimizer{OptimizerMethod::adam, 0.9, 0.999, 1e-8, 1.0};
  std::uint64_t seed = 0;
  bool shuffle = true;
};

// Stateful trainer so callers can interleave validation and checkpoints.
class SatTrainer {
 public:
  SatTrainer(SatModel& model, std::span<const SatExample> data, SatTrainConfig config);

  // One pass over the data; returns the loss of every batch.
  std::vector<double> run_epoch();
  std::size_t epoch() const noexcept { return epoch_; }
  Optimizer& optimizer() noexcept { return optimizer_; }
  void set_epoch(std::size_t e) noexcept { epoch_ = e; }

 private:
  SatModel& model_;
  std::vector<SatExample> data_;
  std::vector<Tensor> cache_;
  SatTrainConfig config_;
  Optimizer optimizer_;
  std::size_t epoch_ = 0;
};

// Runs `config.epochs` epochs; returns every batch loss in order.
std::vector<double> train_teacher_forcing(SatModel& model, std::span<const SatExample> data,
                                          const SatTrainConfig& config);

// Encoder output for one image without recording gradients, [R, F].
Tensor encode_frozen(SatModel& model, const Image& image);

// Reshape alpha to r x r, bilinear upsample, min-max normalise (constant
// maps become all zeros).
Image export_heatmap(std::span<const double> alpha, std::size_t side, std::size_t height, std::size_t width);
void write_heatmap(const Image& map, const std::filesystem::path& pgm, const std::filesystem::path& csv);

}  // namespace capseq
