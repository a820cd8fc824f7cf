#include <cstdio>
#include <fstream>

#include <json.hpp>
#include <spdlog/spdlog.h>

#include "capseq/checkpoint.hpp"
#include "capseq/dataset.hpp"
#include "capseq/error.hpp"
#include "capseq/metrics.hpp"
#include "capseq/pipeline.hpp"
#include "capseq/report_prep.hpp"
#include "commands.hpp"

namespace capseq::cli {
namespace {

struct Input {
  std::string id;
  Image image;
};

fs::path checkpoint_path(const fs::path& dir, const char* model, const std::string& which) {
  if (which != "best" && which != "last") throw ValidationError("--which must be best or last, got '" + which + "'");
  const fs::path p = dir / (std::string(model) + "_" + which + ".csq");
  require_exists(p, "checkpoint");
  return p;
}

struct LoadedSat {
  WordVocabulary vocab;
  SatModel model;
};

LoadedSat load_sat(const RunConfig& config, const fs::path& dir, const std::string& which) {
  const fs::path vocab_path = dir / "vocab.txt";
  require_exists(vocab_path, "word vocabulary");
  WordVocabulary vocab = WordVocabulary::load(vocab_path);
  SatConfig sc = config.sat;
  sc.vocab_size = vocab.size();
  LoadedSat out{std::move(vocab), SatModel(sc, 0)};
  restore(out.model.params(), load_checkpoint(checkpoint_path(dir, "sat", which)));
  return out;
}

std::string step_name(const std::string& id, std::size_t step) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "_%03zu", step);
  return id + buf;
}

// One PGM and one CSV per decoded word; returns the PGM file names.
std::vector<std::string> write_heatmaps(const fs::path& dir, const std::string& id,
                                        const std::vector<std::vector<double>>& attention, const SatConfig& config) {
  fs::create_directories(dir);
  std::vector<std::string> names;
  for (std::size_t t = 0; t < attention.size(); ++t) {
    const Image map = export_heatmap(attention[t], config.pooled_side, config.image_side, config.image_side);
    const std::string stem = step_name(id, t + 1);
    write_heatmap(map, dir / (stem + ".pgm"), dir / (stem + ".csv"));
    names.push_back(stem + ".pgm");
  }
  return names;
}

Image load_image_file(const fs::path& path, std::size_t side) {
  require_exists(path, "image");
  return preprocess_image(read_pgm(path), side);
}

}  // namespace

void cmd_generate(const RunConfig& config, const GenerateArgs& args) {
  if (args.images.empty() == !args.dataset.has_value()) throw ValidationError("generate needs exactly one of --images or --data");
  LoadedSat sat = load_sat(config, args.checkpoints, args.which);

  std::optional<BpeVocabulary> bpe;
  std::optional<GptLm> lm;
  if (!args.no_lm) {
    const fs::path bpe_path = args.checkpoints / "bpe.txt";
    require_exists(bpe_path, "BPE vocabulary");
    bpe = BpeVocabulary::load(bpe_path);
    LmConfig lc = config.lm;
    lc.vocab_size = bpe->size();
    lm.emplace(lc, 0);
    restore(lm->params(), load_checkpoint(checkpoint_path(args.checkpoints, "lm", args.which)));
  }

  std::vector<Input> inputs;
  const std::size_t side = config.sat.image_side;
  if (args.dataset) {
    require_exists(*args.dataset, "packed dataset");
    for (auto& r : load_dataset(*args.dataset)) {
      if (r.image.height != side || r.image.width != side) {
        throw ValidationError(args.dataset->string() + ": images are " + std::to_string(r.image.height) + "x" +
                              std::to_string(r.image.width) + " but sat.image_side is " + std::to_string(side));
      }
      inputs.push_back({std::move(r.id), std::move(r.image)});
    }
  } else {
    for (const auto& p : args.images) inputs.push_back({p.stem().string(), load_image_file(p, side)});
  }

  PipelineOptions options{config.caption, config.continuation, !args.no_lm};
  std::string out;
  for (const auto& input : inputs) {
    const Tensor annotations = encode_frozen(sat.model, input.image);
    PipelineOutput result = two_stage_generate(sat.model, sat.vocab, annotations, lm ? &*lm : nullptr,
                                               bpe ? &*bpe : nullptr, options);
    nlohmann::ordered_json record;
    record["id"] = input.id;
    record["seed"] = result.seed_text;
    record["continuation"] = result.lm_continuation;
    record["combined"] = result.combined;
    record["lm_terminated"] = result.lm_terminated;
    record["heatmaps"] = args.heatmaps ? write_heatmaps(*args.heatmaps, input.id, result.attention, config.sat)
                                       : std::vector<std::string>{};
    record["diagnostics"] = result.diagnostics;
    for (const auto& d : result.diagnostics) spdlog::warn("{}: {}", input.id, d);
    // Byte-level BPE may emit partial UTF-8 sequences; they become U+FFFD.
    out += record.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace) + "\n";
  }
  write_text_file(args.out, out);
  spdlog::info("generate: {} records written to {}", inputs.size(), args.out.string());
}

void cmd_heatmap(const RunConfig& config, const HeatmapArgs& args) {
  LoadedSat sat = load_sat(config, args.checkpoints, args.which);
  const Image image = load_image_file(args.image, config.sat.image_side);
  const SatCaption caption = sat_caption(sat.model, encode_frozen(sat.model, image), config.caption);
  if (caption.diagnostic) spdlog::warn("{}", *caption.diagnostic);
  const std::string id = args.image.stem().string();
  const auto names = write_heatmaps(args.out, id, caption.attention, config.sat);
  std::string index = "step\tword\theatmap\n";
  for (std::size_t t = 0; t < caption.ids.size(); ++t) {
    index += std::to_string(t + 1) + "\t" + sat.vocab.token(caption.ids[t]) + "\t" + names[t] + "\n";
  }
  write_text_file(args.out / (id + "_steps.tsv"), index);
  spdlog::info("heatmap: {} steps written to {}", names.size(), args.out.string());
}

void cmd_evaluate(const EvaluateArgs& args) {
  require_exists(args.candidates, "candidates file");
  require_exists(args.references, "references file");
  const EvalReport report = evaluate(read_eval_corpus(args.candidates, args.references));
  if (args.out) {
    write_text_file(*args.out, report.to_text());
  } else {
    std::fputs(report.to_text().c_str(), stdout);
  }
}

}  // namespace capseq::cli
