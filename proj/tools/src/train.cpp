#include <algorithm>
#include <fstream>
#include <sstream>

#include <spdlog/spdlog.h>

#include "capseq/checkpoint.hpp"
#include "capseq/dataset.hpp"
#include "capseq/error.hpp"
#include "capseq/metrics.hpp"
#include "capseq/pipeline.hpp"
#include "capseq/rng.hpp"
#include "commands.hpp"

namespace capseq::cli {
namespace {

// Model and trainer seed streams derived from the run seed.
constexpr std::uint64_t kSatInitStream = 1;
constexpr std::uint64_t kSatTrainStream = 2;
constexpr std::uint64_t kLmInitStream = 3;
constexpr std::uint64_t kLmTrainStream = 4;

// Tab-separated trace with a header; rows start with the epoch number.
class TraceFile {
 public:
  TraceFile(fs::path path, std::string header) : path_(std::move(path)), header_(std::move(header)) {}

  void start_fresh() const { write_text_file(path_, header_ + "\n"); }

  // Drops rows written after `epoch`, e.g. by an interrupted run.
  void truncate_after(std::size_t epoch) const {
    std::ifstream in(path_);
    if (!in) throw ValidationError("--resume: trace " + path_.string() + " is missing");
    std::string text = header_ + "\n", line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      if (std::stoull(line.substr(0, line.find('\t'))) <= epoch) text += line + "\n";
    }
    write_text_file(path_, text);
  }

  void append(const std::string& rows) const {
    std::ofstream out(path_, std::ios::app | std::ios::binary);
    if (!out) throw Error("cannot append to " + path_.string());
    out << rows;
  }

 private:
  fs::path path_;
  std::string header_;
};

std::vector<DatasetRecord> load_split(const fs::path& dir, const char* name, std::size_t image_side) {
  const fs::path path = dir / (std::string(name) + ".csds");
  require_exists(path, "packed dataset");
  auto records = load_dataset(path);
  for (const auto& r : records) {
    if (r.image.height != image_side || r.image.width != image_side) {
      throw ValidationError(path.string() + ": images are " + std::to_string(r.image.height) + "x" +
                            std::to_string(r.image.width) + " but sat.image_side is " + std::to_string(image_side));
    }
  }
  return records;
}

// Validation reports, falling back to the training split when the
// validation split is empty.
std::vector<DatasetRecord> validation_or_train(const fs::path& dir, const std::vector<DatasetRecord>& train,
                                               std::size_t image_side) {
  auto val = load_split(dir, "validation", image_side);
  if (val.empty()) {
    spdlog::warn("validation split is empty; selecting the best epoch on the training split");
    return train;
  }
  return val;
}

struct BestState {
  std::size_t epoch = 0;  // last completed epoch
  double best_gm = -1.0;
  std::size_t best_epoch = 0;

  std::map<std::string, double> meta() const {
    return {{"epoch", static_cast<double>(epoch)}, {"best_gm", best_gm}, {"best_epoch", static_cast<double>(best_epoch)}};
  }
  static BestState from(const std::map<std::string, double>& meta) {
    BestState s;
    for (const char* key : {"epoch", "best_gm", "best_epoch"})
      if (!meta.contains(key)) throw FormatError(std::string("checkpoint is missing meta.") + key);
    s.epoch = static_cast<std::size_t>(meta.at("epoch"));
    s.best_gm = meta.at("best_gm");
    s.best_epoch = static_cast<std::size_t>(meta.at("best_epoch"));
    return s;
  }
};

std::string metrics_row(std::size_t epoch, const EvalReport& r) {
  std::string row = std::to_string(epoch);
  for (double b : r.bleu) row += "\t" + format_double(b);
  row += "\t" + format_double(r.geometric_mean_bleu) + "\n";
  return row;
}

constexpr const char* kMetricsHeader = "epoch\tbleu_1\tbleu_2\tbleu_3\tbleu_4\tgm_bleu";

// Common epoch loop: train, validate, append traces, keep best and last.
template <typename RunEpoch, typename Validate>
void epoch_loop(std::size_t epochs, BestState state, const TraceFile& trace, const TraceFile& metrics,
                const fs::path& best_path, const fs::path& last_path, ParameterStore& store, Optimizer& optimizer,
                const char* tag, RunEpoch&& run_epoch, Validate&& validate) {
  if (state.epoch >= epochs) spdlog::info("{}: already trained for {} epochs", tag, state.epoch);
  for (std::size_t e = state.epoch + 1; e <= epochs; ++e) {
    const auto [rows, mean_loss] = run_epoch(e);
    trace.append(rows);
    const EvalReport report = validate();
    metrics.append(metrics_row(e, report));
    spdlog::info("{} epoch {}/{}: loss {:.6f}, validation gm-bleu {:.6f}", tag, e, epochs, mean_loss,
                 report.geometric_mean_bleu);
    state.epoch = e;
    if (report.geometric_mean_bleu > state.best_gm) {
      state.best_gm = report.geometric_mean_bleu;
      state.best_epoch = e;
      save_checkpoint(best_path, snapshot(store));
    }
    save_checkpoint(last_path, snapshot_training(store, optimizer, state.meta()));
  }
  spdlog::info("{}: best epoch {} (gm-bleu {:.6f})", tag, state.best_epoch, state.best_gm);
}

void prepare_out_dir(const TrainArgs& args, const fs::path& last_path, const std::vector<fs::path>& produced) {
  check_collision(last_path, args.overwrite, args.resume);
  if (args.resume && !fs::exists(last_path)) {
    throw ValidationError("--resume: no checkpoint at " + last_path.string());
  }
  if (args.overwrite && !args.resume)
    for (const auto& p : produced) fs::remove(p);
  fs::create_directories(args.out);
}

void check_resumed_config(const fs::path& saved, const RunConfig& config) {
  std::ifstream in(saved);
  std::stringstream ss;
  ss << in.rdbuf();
  if (ss.str() != config.to_text()) {
    spdlog::warn("resuming with a configuration that differs from {}; the result will not match an uninterrupted run",
                 saved.string());
  }
}

TokenList first_sentence(const TokenList& report) {
  TokenList head;
  for (const auto& w : report) {
    head.push_back(w);
    if (w == ".") break;
  }
  return head;
}

}  // namespace

void cmd_train_sat(const RunConfig& config, const TrainArgs& args) {
  if (!args.data) throw ValidationError("train-sat needs --data");
  if (args.corpus) throw ValidationError("--corpus applies to train-lm only");
  const std::size_t side = config.sat.image_side;
  const auto train = load_split(*args.data, "train", side);
  if (train.empty()) throw ValidationError("training split in " + args.data->string() + " is empty");
  const auto val = validation_or_train(*args.data, train, side);

  const fs::path last = args.out / "sat_last.csq", best = args.out / "sat_best.csq";
  const fs::path vocab_path = args.out / "vocab.txt", conf_path = args.out / "sat_run.conf";
  const TraceFile trace(args.out / "sat_trace.tsv", "epoch\tbatch\tloss");
  const TraceFile metrics(args.out / "sat_validation.tsv", kMetricsHeader);
  prepare_out_dir(args, last, {best, args.out / "sat_trace.tsv", args.out / "sat_validation.tsv"});

  std::vector<TokenList> reports;
  for (const auto& r : train) reports.push_back(r.tokens);
  WordVocabulary vocab = args.resume ? WordVocabulary::load(vocab_path)
                                     : WordVocabulary::build(reports, config.vocab_min_freq);

  SatConfig sc = config.sat;
  sc.vocab_size = vocab.size();
  SatModel model(sc, derive_seed(config.seed, kSatInitStream));

  std::vector<SatExample> examples;
  for (const auto& r : train) {
    auto ids = encode_words(r.tokens, vocab, config.caption_max_len).ids;
    std::erase(ids, WordVocabulary::kPad);
    examples.push_back({&r.image, nullptr, std::move(ids)});
  }
  SatTrainConfig tc = config.sat_train;
  tc.seed = derive_seed(config.seed, kSatTrainStream);
  SatTrainer trainer(model, examples, tc);

  BestState state;
  if (args.resume) {
    check_resumed_config(conf_path, config);
    state = BestState::from(restore_training(model.params(), trainer.optimizer(), load_checkpoint(last)));
    trainer.set_epoch(state.epoch);
    trace.truncate_after(state.epoch);
    metrics.truncate_after(state.epoch);
    spdlog::info("train-sat: resuming after epoch {}", state.epoch);
  } else {
    vocab.save(vocab_path);
    write_text_file(conf_path, config.to_text());
    trace.start_fresh();
    metrics.start_fresh();
  }

  std::vector<Tensor> val_annotations;
  auto validate = [&] {
    if (model.encoder_finetune() || val_annotations.empty()) {
      val_annotations.clear();
      for (const auto& r : val) val_annotations.push_back(encode_frozen(model, r.image));
    }
    std::vector<EvalPair> corpus;
    for (std::size_t i = 0; i < val.size(); ++i) {
      const SatCaption cap = sat_caption(model, val_annotations[i], config.caption);
      EvalPair pair;
      for (int id : cap.ids) pair.candidate.push_back(vocab.token(id));
      pair.references.push_back(val[i].tokens);
      corpus.push_back(std::move(pair));
    }
    return evaluate(corpus);
  };
  auto run_epoch = [&](std::size_t e) {
    const auto losses = trainer.run_epoch();
    std::string rows;
    double sum = 0.0;
    for (std::size_t b = 0; b < losses.size(); ++b) {
      rows += std::to_string(e) + "\t" + std::to_string(b + 1) + "\t" + format_double(losses[b]) + "\n";
      sum += losses[b];
    }
    return std::pair{rows, sum / static_cast<double>(losses.size())};
  };
  epoch_loop(tc.epochs, state, trace, metrics, best, last, model.params(), trainer.optimizer(), "train-sat", run_epoch,
             validate);
}

void cmd_train_lm(const RunConfig& config, const TrainArgs& args) {
  if (args.data.has_value() == args.corpus.has_value()) throw ValidationError("train-lm needs exactly one of --data or --corpus");

  std::vector<std::string> lines;
  std::vector<TokenList> val_reports;
  if (args.data) {
    const std::size_t side = config.sat.image_side;
    const auto train = load_split(*args.data, "train", side);
    if (train.empty()) throw ValidationError("training split in " + args.data->string() + " is empty");
    std::vector<TokenList> reports;
    for (const auto& r : train) reports.push_back(r.tokens);
    lines = lm_training_lines(reports);
    for (const auto& r : validation_or_train(*args.data, train, side)) val_reports.push_back(r.tokens);
  } else {
    require_exists(*args.corpus, "LM corpus");
    std::ifstream in(*args.corpus);
    if (!in) throw Error("cannot open " + args.corpus->string());
    std::vector<TokenList> reports;
    std::string line;
    while (std::getline(in, line)) {
      TokenList tokens = normalize_text(line);
      if (!tokens.empty()) reports.push_back(std::move(tokens));
    }
    if (reports.empty()) throw ValidationError("LM corpus " + args.corpus->string() + " has no text");
    lines = lm_training_lines(reports);
    val_reports = reports;
  }

  const fs::path last = args.out / "lm_last.csq", best = args.out / "lm_best.csq";
  const fs::path bpe_path = args.out / "bpe.txt", conf_path = args.out / "lm_run.conf";
  const TraceFile trace(args.out / "lm_trace.tsv", "epoch\tbatch\tloss\tgrad_norm\tclipped");
  const TraceFile metrics(args.out / "lm_validation.tsv", kMetricsHeader);
  prepare_out_dir(args, last, {best, args.out / "lm_trace.tsv", args.out / "lm_validation.tsv"});

  BpeVocabulary bpe =
      args.resume ? BpeVocabulary::load(bpe_path) : BpeVocabulary::train(lm_bpe_corpus(lines), config.bpe_merges);

  LmConfig lc = config.lm;
  lc.vocab_size = bpe.size();
  GptLm model(lc, derive_seed(config.seed, kLmInitStream));
  LmTrainConfig tc = config.lm_train;
  tc.seed = derive_seed(config.seed, kLmTrainStream);
  LmTrainer trainer(model, lm_training_windows(lines, bpe, lc.block_size), tc);

  BestState state;
  if (args.resume) {
    check_resumed_config(conf_path, config);
    state = BestState::from(restore_training(model.params(), trainer.optimizer(), load_checkpoint(last)));
    trainer.set_epoch(state.epoch);
    trace.truncate_after(state.epoch);
    metrics.truncate_after(state.epoch);
    spdlog::info("train-lm: resuming after epoch {}", state.epoch);
  } else {
    bpe.save(bpe_path);
    write_text_file(conf_path, config.to_text());
    trace.start_fresh();
    metrics.start_fresh();
  }

  // Seed with the first sentence, continue greedily, score against the full report.
  GenerateOptions greedy = config.continuation;
  greedy.strategy = DecodeStrategy::greedy;
  auto validate = [&] {
    std::vector<EvalPair> corpus;
    for (const auto& report : val_reports) {
      const std::string seed = detokenize(first_sentence(report));
      const TextContinuation cont = continue_text(model, bpe, seed, greedy);
      const std::string combined = cont.text.empty() ? seed : seed + " " + cont.text;
      corpus.push_back({normalize_text(combined), {report}});
    }
    return evaluate(corpus);
  };
  auto run_epoch = [&](std::size_t e) {
    const auto records = trainer.run_epoch();
    std::string rows;
    double sum = 0.0;
    for (std::size_t b = 0; b < records.size(); ++b) {
      const auto& r = records[b];
      rows += std::to_string(e) + "\t" + std::to_string(b + 1) + "\t" + format_double(r.loss) + "\t" +
              format_double(r.step.grad_norm) + "\t" + (r.step.clipped ? "1" : "0") + "\n";
      sum += r.loss;
    }
    return std::pair{rows, sum / static_cast<double>(records.size())};
  };
  epoch_loop(tc.epochs, state, trace, metrics, best, last, model.params(), trainer.optimizer(), "train-lm", run_epoch,
             validate);
}

}  // namespace capseq::cli
