#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "capseq/run_config.hpp"

namespace capseq::cli {

namespace fs = std::filesystem;

struct PrepArgs {
  fs::path input;
  std::optional<fs::path> lexicon;
  fs::path out;
  bool overwrite = false;
};

struct TrainArgs {
  std::optional<fs::path> data;    // prep output directory
  std::optional<fs::path> corpus;  // train-lm only: plain text, one report per line
  fs::path out;
  bool resume = false;
  bool overwrite = false;
};

struct GenerateArgs {
  fs::path checkpoints;
  std::string which = "best";
  std::vector<fs::path> images;
  std::optional<fs::path> dataset;
  bool no_lm = false;
  std::optional<fs::path> heatmaps;
  fs::path out;
};

struct EvaluateArgs {
  fs::path candidates;
  fs::path references;
  std::optional<fs::path> out;
};

struct HeatmapArgs {
  fs::path checkpoints;
  std::string which = "best";
  fs::path image;
  fs::path out;
};

void cmd_prep(const RunConfig& config, const PrepArgs& args);
void cmd_train_sat(const RunConfig& config, const TrainArgs& args);
void cmd_train_lm(const RunConfig& config, const TrainArgs& args);
void cmd_generate(const RunConfig& config, const GenerateArgs& args);
void cmd_evaluate(const EvaluateArgs& args);
void cmd_heatmap(const RunConfig& config, const HeatmapArgs& args);

// ValidationError unless the path exists.
void require_exists(const fs::path& path, const std::string& what);
// Refuses to replace `path` unless one of the flags allows it.
void check_collision(const fs::path& path, bool overwrite, bool resume);
// Writes to a sibling temporary and renames, so readers never see a partial file.
void write_text_file(const fs::path& path, const std::string& text);
std::string format_double(double v);

}  // namespace capseq::cli
