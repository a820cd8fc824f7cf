#pragma once

// Flat key=value run configuration shared by every CLI command.
//
// Precedence, lowest first: built-in defaults, config file, --set / flag
// overrides, CAPSEQ_SEED environment variable (seed only).

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "capseq/gpt_lm.hpp"
#include "capseq/pipeline.hpp"
#include "capseq/sat_model.hpp"

namespace capseq {

struct RunConfig {
  std::uint64_t seed = 0;

  std::array<double, 3> split_ratios{0.75, 0.2475, 0.0025};
  double max_skip_fraction = 0.1;
  std::size_t caption_max_len = 40;  // <start> + words + <end>
  std::size_t vocab_min_freq = 1;

  SatConfig sat;
  SatTrainConfig sat_train;

  LmConfig lm;
  LmTrainConfig lm_train;
  std::size_t bpe_merges = 200;

  CaptionOptions caption;
  GenerateOptions continuation{DecodeStrategy::beam, 5, 2, 48, BeamScoring::length_normalized};

  RunConfig();

  // Throws ValidationError naming the key.
  void set(std::string_view key, std::string_view value);
  std::string get(std::string_view key) const;
  static const std::vector<std::string>& keys();

  // Every precondition of the modules the config feeds.
  void validate() const;

  // One "key=value" line per key in keys() order.
  std::string to_text() const;
};

// Parses key=value lines; '#' starts a comment, blank lines are skipped.
void apply_config_text(RunConfig& config, std::string_view text, std::string_view origin);

// Defaults, then the file (if any), then "key=value" overrides, then the
// CAPSEQ_SEED value (if any). Validates the result.
RunConfig resolve_config(const std::optional<std::filesystem::path>& file, std::span<const std::string> overrides,
                         const char* env_seed);

}  // namespace capseq
