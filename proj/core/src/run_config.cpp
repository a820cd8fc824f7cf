#include "capseq/run_config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "capseq/error.hpp"

namespace capseq {

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

[[noreturn]] void bad(std::string_view key, std::string_view value, std::string_view expected) {
  throw ValidationError("config: " + std::string(key) + "=" + std::string(value) + " is not " + std::string(expected));
}

template <typename T>
T parse_unsigned(std::string_view key, std::string_view v) {
  std::uint64_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) bad(key, v, "a non-negative integer");
  return static_cast<T>(out);
}

double parse_double(std::string_view key, std::string_view v) {
  double out = 0.0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || !std::isfinite(out)) bad(key, v, "a finite number");
  return out;
}

bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  bad(key, v, "true or false");
}

DecodeStrategy parse_strategy(std::string_view key, std::string_view v) {
  if (v == "greedy") return DecodeStrategy::greedy;
  if (v == "beam") return DecodeStrategy::beam;
  bad(key, v, "greedy or beam");
}

BeamScoring parse_scoring(std::string_view key, std::string_view v) {
  if (v == "normalized") return BeamScoring::length_normalized;
  if (v == "raw") return BeamScoring::raw;
  bad(key, v, "normalized or raw");
}

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct Field {
  std::function<void(RunConfig&, std::string_view key, std::string_view value)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename Member>
Field size_field(Member member) {
  return {[member](RunConfig& c, std::string_view k, std::string_view v) { member(c) = parse_unsigned<std::size_t>(k, v); },
          [member](const RunConfig& c) { return std::to_string(member(c)); }};
}

template <typename Member>
Field double_field(Member member) {
  return {[member](RunConfig& c, std::string_view k, std::string_view v) { member(c) = parse_double(k, v); },
          [member](const RunConfig& c) { return fmt_double(member(c)); }};
}

template <typename Member>
Field bool_field(Member member) {
  return {[member](RunConfig& c, std::string_view k, std::string_view v) { member(c) = parse_bool(k, v); },
          [member](const RunConfig& c) { return std::string(member(c) ? "true" : "false"); }};
}

template <typename Member>
Field strategy_field(Member member) {
  return {[member](RunConfig& c, std::string_view k, std::string_view v) { member(c) = parse_strategy(k, v); },
          [member](const RunConfig& c) {
            return std::string(member(c) == DecodeStrategy::greedy ? "greedy" : "beam");
          }};
}

template <typename Member>
Field scoring_field(Member member) {
  return {[member](RunConfig& c, std::string_view k, std::string_view v) { member(c) = parse_scoring(k, v); },
          [member](const RunConfig& c) {
            return std::string(member(c) == BeamScoring::raw ? "raw" : "normalized");
          }};
}

// 0 disables clipping.
template <typename Member>
Field clip_field(Member member) {
  return {[member](RunConfig& c, std::string_view k, std::string_view v) {
            const double x = parse_double(k, v);
            member(c) = x == 0.0 ? std::nullopt : std::optional<double>(x);
          },
          [member](const RunConfig& c) { return fmt_double(member(c).value_or(0.0)); }};
}

#define CAPSEQ_M(expr) [](auto& c) -> auto& { return expr; }

const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table{
      {"seed", {[](RunConfig& c, std::string_view k, std::string_view v) { c.seed = parse_unsigned<std::uint64_t>(k, v); },
                [](const RunConfig& c) { return std::to_string(c.seed); }}},
      {"split.train", double_field(CAPSEQ_M(c.split_ratios[0]))},
      {"split.validation", double_field(CAPSEQ_M(c.split_ratios[1]))},
      {"split.test", double_field(CAPSEQ_M(c.split_ratios[2]))},
      {"prep.max_skip_fraction", double_field(CAPSEQ_M(c.max_skip_fraction))},
      {"caption.max_len", size_field(CAPSEQ_M(c.caption_max_len))},
      {"vocab.min_freq", size_field(CAPSEQ_M(c.vocab_min_freq))},
      {"sat.embed_dim", size_field(CAPSEQ_M(c.sat.embed_dim))},
      {"sat.hidden_dim", size_field(CAPSEQ_M(c.sat.hidden_dim))},
      {"sat.attention_dim", size_field(CAPSEQ_M(c.sat.attention_dim))},
      {"sat.dropout", double_field(CAPSEQ_M(c.sat.dropout))},
      {"sat.lambda_ds", double_field(CAPSEQ_M(c.sat.lambda_ds))},
      {"sat.pooled_side", size_field(CAPSEQ_M(c.sat.pooled_side))},
      {"sat.features", size_field(CAPSEQ_M(c.sat.features))},
      {"sat.conv1_channels", size_field(CAPSEQ_M(c.sat.conv1_channels))},
      {"sat.conv2_channels", size_field(CAPSEQ_M(c.sat.conv2_channels))},
      {"sat.kernel_size", size_field(CAPSEQ_M(c.sat.kernel_size))},
      {"sat.image_side", size_field(CAPSEQ_M(c.sat.image_side))},
      {"sat.fine_tune_encoder", bool_field(CAPSEQ_M(c.sat.fine_tune_encoder))},
      {"sat.normalize_annotations", bool_field(CAPSEQ_M(c.sat.normalize_annotations))},
      {"sat.epochs", size_field(CAPSEQ_M(c.sat_train.epochs))},
      {"sat.batch_size", size_field(CAPSEQ_M(c.sat_train.batch_size))},
      {"sat.lr", double_field(CAPSEQ_M(c.sat_train.lr))},
      {"sat.encoder_lr", double_field(CAPSEQ_M(c.sat_train.encoder_lr))},
      {"sat.adam_eps", double_field(CAPSEQ_M(c.sat_train.optimizer.adam_eps))},
      {"sat.clip_norm", clip_field(CAPSEQ_M(c.sat_train.optimizer.clip_norm))},
      {"lm.layers", size_field(CAPSEQ_M(c.lm.layers))},
      {"lm.heads", size_field(CAPSEQ_M(c.lm.heads))},
      {"lm.model_dim", size_field(CAPSEQ_M(c.lm.model_dim))},
      {"lm.ff_dim", size_field(CAPSEQ_M(c.lm.ff_dim))},
      {"lm.block_size", size_field(CAPSEQ_M(c.lm.block_size))},
      {"lm.bpe_merges", size_field(CAPSEQ_M(c.bpe_merges))},
      {"lm.epochs", size_field(CAPSEQ_M(c.lm_train.epochs))},
      {"lm.batch_windows", size_field(CAPSEQ_M(c.lm_train.batch_windows))},
      {"lm.lr", double_field(CAPSEQ_M(c.lm_train.lr))},
      {"lm.adam_eps", double_field(CAPSEQ_M(c.lm_train.optimizer.adam_eps))},
      {"lm.clip_norm", clip_field(CAPSEQ_M(c.lm_train.optimizer.clip_norm))},
      {"decode.sat_strategy", strategy_field(CAPSEQ_M(c.caption.strategy))},
      {"decode.sat_beam_width", size_field(CAPSEQ_M(c.caption.beam_width))},
      {"decode.sat_rank", size_field(CAPSEQ_M(c.caption.rank))},
      {"decode.lm_strategy", strategy_field(CAPSEQ_M(c.continuation.strategy))},
      {"decode.lm_beam_width", size_field(CAPSEQ_M(c.continuation.beam_width))},
      {"decode.lm_rank", size_field(CAPSEQ_M(c.continuation.rank))},
      {"decode.lm_max_new", size_field(CAPSEQ_M(c.continuation.max_new))},
      {"decode.scoring", scoring_field(CAPSEQ_M(c.caption.scoring))},
  };
  return table;
}

#undef CAPSEQ_M

const Field& field(std::string_view key) {
  for (const auto& [k, f] : fields())
    if (k == key) return f;
  throw ValidationError("config: unknown key '" + std::string(key) + "'");
}

}  // namespace

RunConfig::RunConfig() {
  caption.max_len = caption_max_len - 1;
}

void RunConfig::set(std::string_view key, std::string_view value) {
  field(key).set(*this, key, trim(value));
  continuation.scoring = caption.scoring;
  caption.max_len = caption_max_len - 1;
}

std::string RunConfig::get(std::string_view key) const { return field(key).get(*this); }

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> out = [] {
    std::vector<std::string> k;
    for (const auto& [name, f] : fields()) k.push_back(name);
    return k;
  }();
  return out;
}

void RunConfig::validate() const {
  auto positive = [](bool ok, const char* what) {
    if (!ok) throw ValidationError(std::string("config: ") + what);
  };
  double total = 0.0;
  for (double r : split_ratios) {
    positive(r >= 0.0, "split ratios must be non-negative");
    total += r;
  }
  positive(std::abs(total - 1.0) <= 1e-9, "split ratios must sum to 1");
  positive(max_skip_fraction >= 0.0 && max_skip_fraction <= 1.0, "prep.max_skip_fraction must be in [0, 1]");
  positive(caption_max_len >= 2, "caption.max_len must be >= 2");
  positive(vocab_min_freq >= 1, "vocab.min_freq must be >= 1");
  SatConfig s = sat;
  if (s.vocab_size == 0) s.vocab_size = 4;
  s.validate();
  positive(sat_train.epochs >= 1 && sat_train.batch_size >= 1, "sat.epochs and sat.batch_size must be >= 1");
  positive(sat_train.lr > 0.0 && sat_train.encoder_lr > 0.0, "sat learning rates must be > 0");
  positive(!sat_train.optimizer.clip_norm || *sat_train.optimizer.clip_norm > 0.0, "sat.clip_norm must be >= 0");
  positive(sat_train.optimizer.adam_eps > 0.0 && lm_train.optimizer.adam_eps > 0.0, "adam_eps must be > 0");
  LmConfig l = lm;
  if (l.vocab_size == 0) l.vocab_size = 257;
  l.validate();
  positive(lm_train.epochs >= 1 && lm_train.batch_windows >= 1, "lm.epochs and lm.batch_windows must be >= 1");
  positive(lm_train.lr > 0.0, "lm.lr must be > 0");
  positive(!lm_train.optimizer.clip_norm || *lm_train.optimizer.clip_norm > 0.0, "lm.clip_norm must be >= 0");
  positive(caption.beam_width >= 1 && caption.rank >= 1 && caption.rank <= caption.beam_width,
           "decode.sat_rank must be in 1..decode.sat_beam_width");
  positive(continuation.beam_width >= 1 && continuation.rank >= 1 && continuation.rank <= continuation.beam_width,
           "decode.lm_rank must be in 1..decode.lm_beam_width");
  positive(caption.strategy == DecodeStrategy::beam || caption.rank == 1, "decode.sat_rank > 1 needs beam decoding");
  positive(continuation.strategy == DecodeStrategy::beam || continuation.rank == 1,
           "decode.lm_rank > 1 needs beam decoding");
  positive(continuation.max_new >= 1, "decode.lm_max_new must be >= 1");
}

std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& [k, f] : fields()) out += k + "=" + f.get(*this) + "\n";
  return out;
}

void apply_config_text(RunConfig& config, std::string_view text, std::string_view origin) {
  std::size_t lineno = 0, start = 0;
  while (start <= text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    start = end + 1;
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ValidationError(std::string(origin) + ":" + std::to_string(lineno) + ": expected key=value");
    }
    try {
      config.set(trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const ValidationError& e) {
      throw ValidationError(std::string(origin) + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

RunConfig resolve_config(const std::optional<std::filesystem::path>& file, std::span<const std::string> overrides,
                         const char* env_seed) {
  RunConfig config;
  if (file) {
    std::ifstream in(*file);
    if (!in) throw ValidationError("cannot open config " + file->string());
    std::stringstream ss;
    ss << in.rdbuf();
    apply_config_text(config, ss.str(), file->string());
  }
  for (const auto& o : overrides) apply_config_text(config, o, "--set");
  if (env_seed != nullptr && *env_seed != '\0') {
    try {
      config.set("seed", env_seed);
    } catch (const ValidationError& e) {
      throw ValidationError(std::string("CAPSEQ_SEED: ") + e.what());
    }
  }
  config.validate();
  return config;
}

}  // namespace capseq
