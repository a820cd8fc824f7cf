#include "capseq/gpt_lm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "capseq/error.hpp"

namespace capseq {

void LmConfig::validate() const {
  if (vocab_size == 0) throw ValidationError("lm config: vocab_size must be >= 1");
  if (layers == 0 || heads == 0 || model_dim == 0 || ff_dim == 0) {
    throw ValidationError("lm config: layers, heads, model_dim and ff_dim must be >= 1");
  }
  if (model_dim % heads != 0) {
    throw ValidationError("lm config: model_dim " + std::to_string(model_dim) + " is not divisible by " +
                          std::to_string(heads) + " heads");
  }
  if (block_size < 2) throw ValidationError("lm config: block_size must be >= 2");
}

Tensor sinusoidal_encoding(std::size_t length, std::size_t dim) {
  Tensor pe({length, dim});
  for (std::size_t pos = 0; pos < length; ++pos)
    for (std::size_t i = 0; i < dim; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(dim));
      const double angle = static_cast<double>(pos) * freq;
      pe.at(pos, i) = i % 2 == 0 ? std::sin(angle) : std::cos(angle);
    }
  return pe;
}

GptLm::GptLm(LmConfig config, std::uint64_t seed)
    : config_(config), positions_(sinusoidal_encoding(config.block_size, config.model_dim)) {
  config_.validate();
  Rng rng(seed);
  const std::size_t d = config_.model_dim, f = config_.ff_dim, V = config_.vocab_size;
  auto init = [&](Shape shape, double bound) {
    Tensor t(std::move(shape));
    for (double& v : t.values()) v = rng.uniform(-bound, bound);
    return t;
  };
  const double wd = 1.0 / std::sqrt(static_cast<double>(d)), wf = 1.0 / std::sqrt(static_cast<double>(f));
  store_.add("tok_emb", init({V, d}, 0.5));
  for (std::size_t l = 0; l < config_.layers; ++l) {
    const std::string b = "blocks." + std::to_string(l) + ".";
    store_.add(b + "ln1.gain", Tensor({d}, 1.0));
    store_.add(b + "ln1.bias", Tensor({d}));
    for (const char* w : {"q", "k", "v", "o"}) {
      store_.add(b + "attn.W" + w, init({d, d}, wd));
      store_.add(b + "attn.b" + w, Tensor({d}));
    }
    store_.add(b + "ln2.gain", Tensor({d}, 1.0));
    store_.add(b + "ln2.bias", Tensor({d}));
    store_.add(b + "ff.W1", init({d, f}, wd));
    store_.add(b + "ff.b1", Tensor({f}));
    store_.add(b + "ff.W2", init({f, d}, wf));
    store_.add(b + "ff.b2", Tensor({d}));
  }
  store_.add("ln_f.gain", Tensor({d}, 1.0));
  store_.add("ln_f.bias", Tensor({d}));
  store_.add("head.W", init({d, V}, wd));
}

Var GptLm::p(const std::string& name, Tape& tape) { return tape.param(store_.get(name)); }

Var GptLm::forward(Tape& tape, std::span<const int> tokens) {
  const std::size_t L = tokens.size(), d = config_.model_dim, H = config_.heads, dh = d / H;
  if (L == 0) throw ValidationError("lm_forward: empty input");
  if (L > config_.block_size) {
    throw ValidationError("lm_forward: input of " + std::to_string(L) + " tokens exceeds block size " +
                          std::to_string(config_.block_size));
  }
  for (int id : tokens)
    if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab_size) {
      throw ValidationError("lm_forward: token id " + std::to_string(id) + " outside vocabulary");
    }
  Tensor pe({L, d});
  std::copy(positions_.data(), positions_.data() + L * d, pe.data());
  Var x = add(embedding(p("tok_emb", tape), tokens), tape.constant(std::move(pe)));
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::size_t l = 0; l < config_.layers; ++l) {
    const std::string b = "blocks." + std::to_string(l) + ".";
    Var h = layer_norm(x, p(b + "ln1.gain", tape), p(b + "ln1.bias", tape));
    Var q = add(matmul(h, p(b + "attn.Wq", tape)), p(b + "attn.bq", tape));
    Var k = add(matmul(h, p(b + "attn.Wk", tape)), p(b + "attn.bk", tape));
    Var v = add(matmul(h, p(b + "attn.Wv", tape)), p(b + "attn.bv", tape));
    std::vector<Var> heads;
    for (std::size_t j = 0; j < H; ++j) {
      Var qh = slice_cols(q, j * dh, dh), kh = slice_cols(k, j * dh, dh), vh = slice_cols(v, j * dh, dh);
      Var att = causal_softmax(scale(matmul(qh, transpose(kh)), inv_sqrt));
      heads.push_back(matmul(att, vh));
    }
    Var merged = H == 1 ? heads[0] : concat(heads, 1);
    x = add(x, add(matmul(merged, p(b + "attn.Wo", tape)), p(b + "attn.bo", tape)));
    Var h2 = layer_norm(x, p(b + "ln2.gain", tape), p(b + "ln2.bias", tape));
    Var ff = gelu(add(matmul(h2, p(b + "ff.W1", tape)), p(b + "ff.b1", tape)));
    x = add(x, add(matmul(ff, p(b + "ff.W2", tape)), p(b + "ff.b2", tape)));
  }
  Var out = layer_norm(x, p("ln_f.gain", tape), p("ln_f.bias", tape));
  return matmul(out, p("head.W", tape));
}

Tensor lm_logits(GptLm& model, std::span<const int> tokens) {
  Tape tape(false);
  return model.forward(tape, tokens).value();
}

Var lm_loss(GptLm& model, Tape& tape, std::span<const int> tokens) {
  if (tokens.size() < 2) throw ValidationError("lm_loss: need at least 2 tokens");
  Var logits = model.forward(tape, tokens.first(tokens.size() - 1));
  return cross_entropy_logits(logits, tokens.subspan(1));
}

std::vector<int> lm_corpus_tokens(std::span<const std::string> lines, const BpeVocabulary& bpe) {
  std::vector<int> stream;
  for (const auto& line : lines) {
    auto ids = bpe.encode(line).ids;
    stream.insert(stream.end(), ids.begin(), ids.end());
    stream.push_back(BpeVocabulary::kEndOfText);
  }
  return stream;
}

std::vector<std::vector<int>> make_windows(std::span<const int> stream, std::size_t block) {
  if (block < 2) throw ValidationError("make_windows: block must be >= 2");
  std::vector<std::vector<int>> out;
  for (std::size_t start = 0; start + 1 < stream.size(); start += block - 1) {
    const std::size_t end = std::min(stream.size(), start + block);
    out.emplace_back(stream.begin() + static_cast<std::ptrdiff_t>(start), stream.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

double lm_corpus_loss(GptLm& model, std::span<const std::vector<int>> windows) {
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& w : windows) {
    Tape tape(false);
    total += lm_loss(model, tape, w).value().item() * static_cast<double>(w.size() - 1);
    count += w.size() - 1;
  }
  if (count == 0) throw ValidationError("lm_corpus_loss: no targets");
  return total / static_cast<double>(count);
}

// ---------------------------------------------------------------------------

LmTrainer::LmTrainer(GptLm& model, std::span<const int> stream, LmTrainConfig config)
    : LmTrainer(model, make_windows(stream, model.config().block_size), config) {}

LmTrainer::LmTrainer(GptLm& model, std::vector<std::vector<int>> windows, LmTrainConfig config)
    : model_(model), windows_(std::move(windows)), config_(config), optimizer_(config.optimizer) {
  if (windows_.empty()) throw ValidationError("train_lm: corpus yields no training windows");
  for (const auto& w : windows_) {
    if (w.size() < 2 || w.size() > model_.config().block_size) {
      throw ValidationError("train_lm: window of " + std::to_string(w.size()) + " tokens outside 2.." +
                            std::to_string(model_.config().block_size));
    }
  }
  if (config_.batch_windows == 0) throw ValidationError("train_lm: batch_windows must be >= 1");
  if (!(config_.lr > 0.0)) throw ValidationError("train_lm: lr must be > 0");
}

std::vector<LmBatchRecord> LmTrainer::run_epoch() {
  Rng rng(derive_seed(config_.seed, epoch_));
  std::vector<std::size_t> order(windows_.size());
  std::iota(order.begin(), order.end(), 0);
  if (config_.shuffle)
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  const std::vector<ParamGroup> groups{{model_.params().all(), config_.lr}};
  std::vector<LmBatchRecord> records;
  for (std::size_t start = 0; start < order.size(); start += config_.batch_windows) {
    const std::size_t stop = std::min(order.size(), start + config_.batch_windows);
    Tape tape;
    Var total;
    for (std::size_t i = start; i < stop; ++i) {
      Var l = lm_loss(model_, tape, windows_[order[i]]);
      total = total.valid() ? add(total, l) : l;
    }
    Var loss = scale(total, 1.0 / static_cast<double>(stop - start));
    tape.backward(loss);
    LmBatchRecord rec;
    rec.loss = loss.value().item();
    rec.step = optimizer_.step(groups);
    records.push_back(rec);
  }
  ++epoch_;
  return records;
}

std::vector<LmBatchRecord> train_lm(GptLm& model, std::span<const int> stream, const LmTrainConfig& config) {
  if (stream.empty()) throw ValidationError("train_lm: empty corpus");
  LmTrainer trainer(model, stream, config);
  std::vector<LmBatchRecord> trace;
  for (std::size_t e = 0; e < config.epochs; ++e) {
    auto r = trainer.run_epoch();
    trace.insert(trace.end(), r.begin(), r.end());
  }
  return trace;
}

// ---------------------------------------------------------------------------

Continuation generate_continuation(GptLm& model, std::span<const int> seed, const GenerateOptions& options) {
  const std::size_t block = model.config().block_size;
  if (seed.empty()) throw ValidationError("generate_continuation: empty seed");
  if (seed.size() >= block) {
    throw ValidationError("generate_continuation: seed of " + std::to_string(seed.size()) +
                          " tokens leaves no room in block size " + std::to_string(block));
  }
  Continuation out;
  if (options.max_new == 0) return out;

  using Prefix = std::vector<int>;
  auto expand = [&](const Prefix& prefix) {
    Tensor logits = lm_logits(model, prefix);
    const std::size_t V = logits.dim(1), last = logits.dim(0) - 1;
    std::vector<double> lp(V);
    double mx = -1e300;
    for (std::size_t v = 0; v < V; ++v) mx = std::max(mx, logits.at(last, v));
    double z = 0.0;
    for (std::size_t v = 0; v < V; ++v) z += std::exp(logits.at(last, v) - mx);
    const double log_z = mx + std::log(z);
    for (std::size_t v = 0; v < V; ++v) lp[v] = logits.at(last, v) - log_z;
    return Step<Prefix>{std::move(lp), prefix};
  };
  auto append = [](Prefix prefix, int token) {
    prefix.push_back(token);
    return prefix;
  };
  DecodeOptions decode{std::min(options.max_new, block - seed.size() + 1), BpeVocabulary::kEndOfText};
  Prefix start(seed.begin(), seed.end());

  Beam<Prefix> chosen;
  if (options.strategy == DecodeStrategy::greedy) {
    chosen = greedy_decode(expand, append, start, decode);
  } else {
    auto result = beam_search(expand, append, start, options.beam_width, decode, options.scoring);
    out.diagnostic = result.diagnostic;
    chosen = select_beam(result.beams, options.rank);
  }
  out.tokens = std::move(chosen.tokens);
  out.terminated = chosen.finished;
  out.log_prob = chosen.log_prob;
  return out;
}

}  // namespace capseq
