#include "capseq/sat_model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>

#include <spdlog/spdlog.h>

#include "capseq/error.hpp"

namespace capseq {

namespace {

Tensor uniform_init(Rng& rng, Shape shape, double bound) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.uniform(-bound, bound);
  return t;
}

constexpr const char* kEncoderNames[] = {"encoder.conv1.weight", "encoder.conv1.bias", "encoder.conv2.weight",
                                         "encoder.conv2.bias",   "encoder.conv3.weight", "encoder.conv3.bias"};

}  // namespace

void SatConfig::validate() const {
  auto positive = [](std::size_t v, const char* what) {
    if (v == 0) throw ValidationError(std::string("sat config: ") + what + " must be >= 1");
  };
  positive(vocab_size, "vocab_size");
  positive(embed_dim, "embed_dim");
  positive(hidden_dim, "hidden_dim");
  positive(attention_dim, "attention_dim");
  positive(pooled_side, "pooled_side");
  positive(features, "features");
  positive(conv1_channels, "conv1_channels");
  positive(conv2_channels, "conv2_channels");
  if (kernel_size % 2 == 0) throw ValidationError("sat config: kernel_size must be odd");
  if (image_side < pooled_side) throw ValidationError("sat config: image_side must be >= pooled_side");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ValidationError("sat config: dropout must be in [0,1)");
  if (!(lambda_ds >= 0.0)) throw ValidationError("sat config: lambda_ds must be >= 0");
}

SatModel::SatModel(SatConfig config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  const auto& c = config_;
  const std::size_t k = c.kernel_size, n = c.hidden_dim, F = c.features, m = c.embed_dim, d = c.attention_dim;
  auto he = [&](std::size_t fan_in) { return std::sqrt(6.0 / static_cast<double>(fan_in)); };
  auto lecun = [&](std::size_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); };

  store_.add("encoder.conv1.weight", uniform_init(rng, {c.conv1_channels, 1, k, k}, he(k * k)));
  store_.add("encoder.conv1.bias", Tensor({c.conv1_channels}));
  store_.add("encoder.conv2.weight",
             uniform_init(rng, {c.conv2_channels, c.conv1_channels, k, k}, he(c.conv1_channels * k * k)));
  store_.add("encoder.conv2.bias", Tensor({c.conv2_channels}));
  store_.add("encoder.conv3.weight", uniform_init(rng, {F, c.conv2_channels, k, k}, he(c.conv2_channels * k * k)));
  store_.add("encoder.conv3.bias", Tensor({F}));

  store_.add("attention.W_a", uniform_init(rng, {F, d}, lecun(F)));
  store_.add("attention.W_h", uniform_init(rng, {n, d}, lecun(n)));
  store_.add("attention.b", Tensor({d}));
  store_.add("attention.w", uniform_init(rng, {d, 1}, lecun(d)));
  store_.add("attention.b_out", Tensor({1}));

  store_.add("init_h.W", uniform_init(rng, {F, n}, lecun(F)));
  store_.add("init_h.b", Tensor({n}));
  store_.add("init_c.W", uniform_init(rng, {F, n}, lecun(F)));
  store_.add("init_c.b", Tensor({n}));

  store_.add("embedding.E", uniform_init(rng, {c.vocab_size, m}, 0.1));
  store_.add("lstm.T", uniform_init(rng, {m + n + F, 4 * n}, lecun(m + n + F)));
  store_.add("lstm.b", Tensor({4 * n}));

  store_.add("output.L_h", uniform_init(rng, {n, m}, lecun(n)));
  store_.add("output.L_a", uniform_init(rng, {F, m}, lecun(F)));
  store_.add("output.L_o", uniform_init(rng, {m, c.vocab_size}, lecun(m)));

  set_encoder_finetune(config_.fine_tune_encoder);
}

void SatModel::set_encoder_finetune(bool enabled) {
  config_.fine_tune_encoder = enabled;
  for (const char* name : kEncoderNames) store_.get(name).trainable = false;
  if (enabled) {
    store_.get("encoder.conv3.weight").trainable = true;
    store_.get("encoder.conv3.bias").trainable = true;
  }
}

std::vector<Parameter*> SatModel::encoder_params() {
  std::vector<Parameter*> out;
  for (const char* name : kEncoderNames) out.push_back(&store_.get(name));
  return out;
}

std::vector<Parameter*> SatModel::decoder_params() {
  std::vector<Parameter*> out;
  for (Parameter* p : store_.all())
    if (p->name.rfind("encoder.", 0) != 0) out.push_back(p);
  return out;
}

Var SatModel::p(const char* name, Tape& tape) { return tape.param(store_.get(name)); }

AnnotationGrid SatModel::encode_image(Tape& tape, std::span<const Image* const> images) {
  if (images.empty()) throw ValidationError("encode_image: empty batch");
  const std::size_t h = images[0]->height, w = images[0]->width, r = config_.pooled_side;
  if (h < r || w < r) {
    throw ValidationError("encode_image: image " + std::to_string(h) + "x" + std::to_string(w) +
                          " is smaller than the pooled side " + std::to_string(r));
  }
  Tensor input({images.size(), 1, h, w});
  for (std::size_t b = 0; b < images.size(); ++b) {
    const Image& img = *images[b];
    if (img.height != h || img.width != w || img.values.size() != h * w) {
      throw ValidationError("encode_image: images in a batch must share extents");
    }
    std::copy(img.values.begin(), img.values.end(), input.data() + b * h * w);
  }
  Var x = tape.constant(std::move(input));
  x = relu(conv2d(x, p("encoder.conv1.weight", tape), p("encoder.conv1.bias", tape)));
  x = relu(conv2d(x, p("encoder.conv2.weight", tape), p("encoder.conv2.bias", tape)));
  x = relu(conv2d(x, p("encoder.conv3.weight", tape), p("encoder.conv3.bias", tape)));
  x = adaptive_avg_pool(x, r, r);
  Var rows = spatial_to_rows(x);
  if (config_.normalize_annotations) {
    const std::size_t F = config_.features;
    rows = layer_norm(rows, tape.constant(Tensor({F}, 1.0)), tape.constant(Tensor({F})));
  }
  return AnnotationGrid{rows, images.size(), r * r, config_.features, r};
}

AnnotationGrid SatModel::annotations(Tape& tape, const Tensor& rows, std::size_t batch) {
  const std::size_t R = config_.pooled_side * config_.pooled_side;
  if (rows.rank() != 2 || rows.dim(0) != batch * R || rows.dim(1) != config_.features) {
    throw ShapeError("annotations: expected " + to_string({batch * R, config_.features}) + ", got " +
                     to_string(rows.shape()));
  }
  return AnnotationGrid{tape.constant(rows), batch, R, config_.features, config_.pooled_side};
}

DecoderState SatModel::init_state(const AnnotationGrid& a) {
  Tape& tape = *a.rows.tape();
  Var mean_region = group_mean_rows(a.rows, a.regions);
  Var h = tanh(add(matmul(mean_region, p("init_h.W", tape)), p("init_h.b", tape)));
  Var c = tanh(add(matmul(mean_region, p("init_c.W", tape)), p("init_c.b", tape)));
  return {h, c};
}

AttentionOutput SatModel::attend(const AnnotationGrid& a, const Var& h_prev) {
  Tape& tape = *a.rows.tape();
  if (h_prev.shape().size() != 2 || h_prev.shape()[0] != a.batch) {
    throw ShapeError("attend: hidden state " + to_string(h_prev.shape()) + " does not match annotation batch " +
                     std::to_string(a.batch));
  }
  Var keys = matmul(a.rows, p("attention.W_a", tape));
  Var query = add(matmul(h_prev, p("attention.W_h", tape)), p("attention.b", tape));
  Var hidden = relu(add(keys, repeat_rows(query, a.regions)));
  Var scores = add(matmul(hidden, p("attention.w", tape)), p("attention.b_out", tape));
  Var alpha = softmax(reshape(scores, {a.batch, a.regions}), 1);
  Var context = batched_matmul(reshape(alpha, {a.batch, 1, a.regions}), reshape(a.rows, {a.batch, a.regions, a.features}));
  return {alpha, reshape(context, {a.batch, a.features})};
}

DecoderState SatModel::lstm_step(std::span<const int> z_prev, const DecoderState& state, const Var& context) {
  Tape& tape = *state.h.tape();
  const std::size_t n = config_.hidden_dim;
  Var emb = embedding(p("embedding.E", tape), z_prev);
  const Var parts[] = {emb, state.h, context};
  Var gates = add(matmul(concat(parts, 1), p("lstm.T", tape)), p("lstm.b", tape));
  Var i = sigmoid(slice_cols(gates, 0, n));
  Var f = sigmoid(slice_cols(gates, n, n));
  Var o = sigmoid(slice_cols(gates, 2 * n, n));
  Var g = tanh(slice_cols(gates, 3 * n, n));
  Var c = add(mul(f, state.c), mul(i, g));
  Var h = mul(o, tanh(c));
  return {h, c};
}

Var SatModel::output_distribution(const Var& h, const Var& context, std::span<const int> z_prev, bool training,
                                  Rng& rng) {
  Tape& tape = *h.tape();
  Var hd = dropout(h, config_.dropout, rng, training);
  Var mixed = add(add(matmul(hd, p("output.L_h", tape)), matmul(context, p("output.L_a", tape))),
                  embedding(p("embedding.E", tape), z_prev));
  return softmax(matmul(mixed, p("output.L_o", tape)), 1);
}

// ---------------------------------------------------------------------------

std::vector<std::size_t> sort_by_length(std::span<const std::size_t> lengths) {
  std::vector<std::size_t> order(lengths.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return lengths[a] > lengths[b]; });
  return order;
}

std::vector<std::size_t> effective_batch_sizes(std::span<const std::size_t> sorted_lengths) {
  const std::size_t steps = sorted_lengths.empty() ? 0 : sorted_lengths.front();
  std::vector<std::size_t> out(steps, 0);
  for (std::size_t t = 0; t < steps; ++t)
    for (std::size_t len : sorted_lengths) out[t] += len > t;
  return out;
}

namespace {

Var nll_term(std::span<const Var> probs, std::span<const std::vector<int>> targets, std::size_t& clamped) {
  if (probs.empty() || probs.size() != targets.size()) throw ValidationError("sat_loss: probabilities and targets misaligned");
  std::size_t count = 0;
  clamped = 0;
  Var total;
  for (std::size_t t = 0; t < probs.size(); ++t) {
    Var picked = pick(probs[t], targets[t]);
    for (double v : picked.value().values()) clamped += v < 1e-12;
    Var s = sum(log_clamped(picked, 1e-12));
    total = total.valid() ? add(total, s) : s;
    count += targets[t].size();
  }
  if (clamped > 0) spdlog::warn("sat_loss: {} target probabilities clamped at 1e-12", clamped);
  return scale(total, -1.0 / static_cast<double>(count));
}

Var attention_penalty(std::span<const Var> alphas, double lambda_ds) {
  if (alphas.empty()) throw ValidationError("sat_loss: lambda_ds > 0 needs attention weights");
  const std::size_t batch = alphas.front().shape()[0];
  Var attended;
  for (const Var& a : alphas) {
    Var padded = a.shape()[0] == batch ? a : pad_rows(a, batch);
    attended = attended.valid() ? add(attended, padded) : padded;
  }
  Var penalty = sum(square(add_scalar(scale(attended, -1.0), 1.0)));
  return scale(penalty, lambda_ds / static_cast<double>(batch));
}

}  // namespace

Var sat_loss(std::span<const Var> probs, std::span<const std::vector<int>> targets, std::span<const Var> alphas,
             double lambda_ds, std::size_t* clamped) {
  std::size_t low = 0;
  Var loss = nll_term(probs, targets, low);
  if (clamped != nullptr) *clamped = low;
  if (lambda_ds == 0.0) return loss;
  return add(loss, attention_penalty(alphas, lambda_ds));
}

SatForward sat_forward(SatModel& model, Tape& tape, std::span<const SatExample> batch, bool training, Rng& rng) {
  if (batch.empty()) throw ValidationError("sat_forward: empty batch");
  const std::size_t W = model.config().vocab_size;
  std::vector<std::size_t> lengths;
  for (const auto& ex : batch) {
    if (ex.caption.size() < 2) throw ValidationError("sat_forward: caption needs at least <start> and one target");
    for (int id : ex.caption)
      if (id < 0 || static_cast<std::size_t>(id) >= W) throw ValidationError("sat_forward: caption id out of range");
    lengths.push_back(ex.caption.size() - 1);
  }
  const auto order = sort_by_length(lengths);
  std::vector<std::size_t> sorted_lengths;
  for (auto i : order) sorted_lengths.push_back(lengths[i]);

  AnnotationGrid grid;
  const bool cached = std::all_of(batch.begin(), batch.end(), [](const SatExample& e) { return e.annotations != nullptr; });
  if (cached) {
    const std::size_t R = model.config().pooled_side * model.config().pooled_side, F = model.config().features;
    Tensor rows({batch.size() * R, F});
    for (std::size_t b = 0; b < order.size(); ++b) {
      const Tensor& a = *batch[order[b]].annotations;
      if (a.size() != R * F) throw ShapeError("sat_forward: cached annotations have shape " + to_string(a.shape()));
      std::copy(a.data(), a.data() + R * F, rows.data() + b * R * F);
    }
    grid = model.annotations(tape, rows, batch.size());
  } else {
    std::vector<const Image*> images;
    for (auto i : order) {
      if (batch[i].image == nullptr) throw ValidationError("sat_forward: example has neither image nor annotations");
      images.push_back(batch[i].image);
    }
    grid = model.encode_image(tape, images);
  }

  SatForward out;
  out.effective_batch = effective_batch_sizes(sorted_lengths);
  DecoderState state = model.init_state(grid);
  std::vector<Var> probs;
  std::vector<std::vector<int>> targets;
  AnnotationGrid active = grid;
  for (std::size_t t = 0; t < out.effective_batch.size(); ++t) {
    const std::size_t b = out.effective_batch[t];
    if (b < active.batch) {
      active.rows = slice_rows(grid.rows, 0, b * grid.regions);
      active.batch = b;
      state = {slice_rows(state.h, 0, b), slice_rows(state.c, 0, b)};
    }
    std::vector<int> z_prev(b), target(b);
    for (std::size_t k = 0; k < b; ++k) {
      z_prev[k] = batch[order[k]].caption[t];
      target[k] = batch[order[k]].caption[t + 1];
    }
    AttentionOutput att = model.attend(active, state.h);
    state = model.lstm_step(z_prev, state, att.context);
    probs.push_back(model.output_distribution(state.h, att.context, z_prev, training, rng));
    targets.push_back(std::move(target));
    out.alphas.push_back(att.alpha);
    out.target_count += b;
  }
  out.cross_entropy = nll_term(probs, targets, out.clamped);
  out.loss = out.cross_entropy;
  if (model.config().lambda_ds > 0.0) {
    out.penalty = attention_penalty(out.alphas, model.config().lambda_ds);
    out.loss = add(out.cross_entropy, *out.penalty);
  }
  return out;
}

// ---------------------------------------------------------------------------

Tensor encode_frozen(SatModel& model, const Image& image) {
  Tape tape(false);
  const Image* one[] = {&image};
  return model.encode_image(tape, one).rows.value();
}

SatTrainer::SatTrainer(SatModel& model, std::span<const SatExample> data, SatTrainConfig config)
    : model_(model), data_(data.begin(), data.end()), config_(config), optimizer_(config.optimizer) {
  if (data_.empty()) throw ValidationError("train_teacher_forcing: empty training set");
  if (config_.batch_size == 0) throw ValidationError("train_teacher_forcing: batch_size must be >= 1");
  if (!(config_.lr > 0.0) || !(config_.encoder_lr > 0.0)) throw ValidationError("train_teacher_forcing: lr must be > 0");
}

std::vector<double> SatTrainer::run_epoch() {
  // A frozen encoder is a fixed function of the image, so its output is computed once.
  if (!model_.encoder_finetune() && cache_.empty()) {
    cache_.reserve(data_.size());
    for (auto& ex : data_) {
      if (ex.annotations == nullptr) {
        cache_.push_back(encode_frozen(model_, *ex.image));
        ex.annotations = &cache_.back();
      }
    }
  }
  if (model_.encoder_finetune()) {
    for (auto& ex : data_)
      if (ex.image != nullptr) ex.annotations = nullptr;
  }

  Rng rng(derive_seed(config_.seed, epoch_));
  std::vector<std::size_t> order(data_.size());
  std::iota(order.begin(), order.end(), 0);
  if (config_.shuffle)
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

  const std::vector<ParamGroup> groups{{model_.decoder_params(), config_.lr}, {model_.encoder_params(), config_.encoder_lr}};
  std::vector<double> losses;
  for (std::size_t start = 0; start < order.size(); start += config_.batch_size) {
    std::vector<SatExample> batch;
    for (std::size_t i = start; i < std::min(order.size(), start + config_.batch_size); ++i) batch.push_back(data_[order[i]]);
    Tape tape;
    SatForward fwd = sat_forward(model_, tape, batch, true, rng);
    tape.backward(fwd.loss);
    optimizer_.step(groups);
    losses.push_back(fwd.loss.value().item());
  }
  ++epoch_;
  return losses;
}

std::vector<double> train_teacher_forcing(SatModel& model, std::span<const SatExample> data,
                                          const SatTrainConfig& config) {
  SatTrainer trainer(model, data, config);
  std::vector<double> trace;
  for (std::size_t e = 0; e < config.epochs; ++e) {
    auto losses = trainer.run_epoch();
    trace.insert(trace.end(), losses.begin(), losses.end());
  }
  return trace;
}

// ---------------------------------------------------------------------------

Image export_heatmap(std::span<const double> alpha, std::size_t side, std::size_t height, std::size_t width) {
  if (side == 0 || alpha.size() != side * side) {
    throw ValidationError("export_heatmap: " + std::to_string(alpha.size()) + " weights do not form a " +
                          std::to_string(side) + "x" + std::to_string(side) + " grid");
  }
  Image grid{side, side, std::vector<double>(alpha.begin(), alpha.end())};
  Image map = resize_bilinear(grid, height, width);
  const auto [lo, hi] = std::minmax_element(map.values.begin(), map.values.end());
  const double min = *lo, range = *hi - *lo;
  for (double& v : map.values) v = range > 0.0 ? (v - min) / range : 0.0;
  return map;
}

void write_heatmap(const Image& map, const std::filesystem::path& pgm, const std::filesystem::path& csv) {
  RawImage raw{map.height, map.width, 255, {}};
  raw.pixels.reserve(map.values.size());
  for (double v : map.values) raw.pixels.push_back(static_cast<std::uint16_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
  write_pgm(pgm, raw, true);
  std::ofstream out(csv, std::ios::trunc);
  if (!out) throw Error("cannot write heatmap csv " + csv.string());
  out << std::fixed << std::setprecision(6);
  for (std::size_t y = 0; y < map.height; ++y) {
    for (std::size_t x = 0; x < map.width; ++x) out << (x ? "," : "") << map.at(y, x);
    out << '\n';
  }
}

}  // namespace capseq
