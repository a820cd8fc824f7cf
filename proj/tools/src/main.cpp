// capseq: preprocess, train, generate, evaluate and export heatmaps.
//
// Exit codes: 0 ok, 1 validation failure (bad arguments, config or inputs),
// 2 runtime failure.

#include <cstdlib>
#include <iostream>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include "capseq/error.hpp"
#include "commands.hpp"

namespace {

using namespace capseq;
using namespace capseq::cli;

struct Common {
  std::optional<fs::path> config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  bool quiet = false;
  bool verbose = false;

  RunConfig resolve() const {
    if (config) require_exists(*config, "config file");
    std::vector<std::string> overrides = sets;
    if (seed) overrides.push_back("seed=" + std::to_string(*seed));
    return resolve_config(config, overrides, std::getenv("CAPSEQ_SEED"));
  }
};

void setup_logging(const Common& common) {
  auto logger = spdlog::stderr_logger_mt("capseq");
  logger->set_pattern("[%l] %v");
  logger->set_level(common.quiet ? spdlog::level::warn : common.verbose ? spdlog::level::debug : spdlog::level::info);
  spdlog::set_default_logger(logger);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"capseq: two-stage chest X-ray report generation"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_version_flag("--version", "capseq 0.1.0");

  Common common;
  app.add_option("--config", common.config, "key=value config file");
  app.add_option("--set", common.sets, "override a config key, e.g. --set sat.epochs=5 (repeatable)");
  app.add_option("--seed", common.seed, "run seed (overridden by CAPSEQ_SEED)");
  app.add_flag("-q,--quiet", common.quiet, "warnings and errors only");
  app.add_flag("-v,--verbose", common.verbose, "debug logging");

  PrepArgs prep;
  auto* prep_cmd = app.add_subcommand("prep", "parse a JSONL corpus into packed train/validation/test datasets");
  prep_cmd->add_option("--input", prep.input, "JSONL corpus, one study per line")->required();
  prep_cmd->add_option("--lexicon", prep.lexicon, "abbreviation lexicon (abbr<TAB>expansion)");
  prep_cmd->add_option("--out", prep.out, "output directory")->required();
  prep_cmd->add_flag("--overwrite", prep.overwrite, "replace an existing manifest");

  TrainArgs sat_args;
  auto* sat_cmd = app.add_subcommand("train-sat", "train the image captioning model");
  sat_cmd->add_option("--data", sat_args.data, "prep output directory")->required();
  sat_cmd->add_option("--out", sat_args.out, "checkpoint directory")->required();
  sat_cmd->add_flag("--resume", sat_args.resume, "continue from sat_last.csq");
  sat_cmd->add_flag("--overwrite", sat_args.overwrite, "start over, replacing existing checkpoints");

  TrainArgs lm_args;
  auto* lm_cmd = app.add_subcommand("train-lm", "train the report continuation language model");
  auto* lm_data = lm_cmd->add_option("--data", lm_args.data, "prep output directory (training reports)");
  lm_cmd->add_option("--corpus", lm_args.corpus, "plain-text reports, one per line")->excludes(lm_data);
  lm_cmd->add_option("--out", lm_args.out, "checkpoint directory")->required();
  lm_cmd->add_flag("--resume", lm_args.resume, "continue from lm_last.csq");
  lm_cmd->add_flag("--overwrite", lm_args.overwrite, "start over, replacing existing checkpoints");

  GenerateArgs gen;
  auto* gen_cmd = app.add_subcommand("generate", "write one JSONL report record per input image");
  gen_cmd->add_option("--checkpoints", gen.checkpoints, "directory holding both models' checkpoints")->required();
  gen_cmd->add_option("--which", gen.which, "checkpoint to load: best or last")->check(CLI::IsMember({"best", "last"}));
  auto* gen_images = gen_cmd->add_option("--images", gen.images, "PGM images");
  gen_cmd->add_option("--data", gen.dataset, "packed dataset (.csds)")->excludes(gen_images);
  gen_cmd->add_flag("--no-lm", gen.no_lm, "SAT captions only, no continuation");
  gen_cmd->add_option("--heatmaps", gen.heatmaps, "directory for per-word attention heatmaps");
  gen_cmd->add_option("--out", gen.out, "output JSONL file")->required();

  EvaluateArgs eval;
  auto* eval_cmd = app.add_subcommand("evaluate", "BLEU-1..4, ROUGE-L and CIDEr of candidates against references");
  eval_cmd->add_option("--candidates", eval.candidates, "one candidate per line")->required();
  eval_cmd->add_option("--references", eval.references, "tab-separated references per line")->required();
  eval_cmd->add_option("--out", eval.out, "report file (default: stdout)");

  HeatmapArgs heat;
  auto* heat_cmd = app.add_subcommand("heatmap", "caption one image and export its attention maps");
  heat_cmd->add_option("--checkpoints", heat.checkpoints, "directory holding sat_*.csq and vocab.txt")->required();
  heat_cmd->add_option("--which", heat.which, "checkpoint to load: best or last")->check(CLI::IsMember({"best", "last"}));
  heat_cmd->add_option("--image", heat.image, "PGM image")->required();
  heat_cmd->add_option("--out", heat.out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  setup_logging(common);
  try {
    if (*eval_cmd) {
      cmd_evaluate(eval);
      return 0;
    }
    const RunConfig config = common.resolve();
    spdlog::debug("configuration:\n{}", config.to_text());
    if (*prep_cmd) cmd_prep(config, prep);
    if (*sat_cmd) cmd_train_sat(config, sat_args);
    if (*lm_cmd) cmd_train_lm(config, lm_args);
    if (*gen_cmd) cmd_generate(config, gen);
    if (*heat_cmd) cmd_heatmap(config, heat);
    return 0;
  } catch (const ValidationError& e) {
    spdlog::error("{}", e.what());
    return 1;
  } catch (const ShapeError& e) {
    spdlog::error("{}", e.what());
    return 1;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 2;
  }
}
