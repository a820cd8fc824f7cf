#include <doctest.h>

#include <algorithm>
#include <fstream>

#include <json.hpp>

#include "capseq/checkpoint.hpp"
#include "support/cli_runner.hpp"

using capseq::testing::CliSandbox;
using capseq::testing::read_file;
namespace fs = std::filesystem;

namespace {

std::size_t count_lines(const std::string& text) { return static_cast<std::size_t>(std::ranges::count(text, '\n')); }

// Parameter entries only, without optimizer state or metadata.
std::vector<capseq::NamedTensor> parameters_of(const fs::path& checkpoint) {
  auto entries = capseq::load_checkpoint(checkpoint);
  std::erase_if(entries, [](const auto& e) { return e.name.starts_with("adam.") || e.name.starts_with("meta."); });
  return entries;
}

bool same_parameters(const fs::path& a, const fs::path& b) {
  const auto pa = parameters_of(a), pb = parameters_of(b);
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (pa[i].name != pb[i].name || pa[i].value.shape() != pb[i].value.shape() ||
        !std::ranges::equal(pa[i].value.values(), pb[i].value.values())) {
      return false;
    }
  }
  return true;
}

// Synthetic corpus plus prep output under data/.
void make_dataset(const CliSandbox& box, const std::string& synth_args = "--count 10 --side 32") {
  REQUIRE(box.synth("--out raw " + synth_args).exit_code == 0);
  const auto r = box.capseq("prep --input raw/corpus.jsonl --lexicon " + std::string(CAPSEQ_SOURCE_DIR) +
                            "/data/abbreviations_sample.tsv --out data");
  REQUIRE_MESSAGE(r.exit_code == 0, r.err);
}

}  // namespace

TEST_CASE("prep counts exclusions and is deterministic") {
  CliSandbox box("prep");
  REQUIRE(box.synth("--out raw --count 8 --empty 2 --side 32").exit_code == 0);
  REQUIRE(box.capseq("prep --input raw/corpus.jsonl --out a").exit_code == 0);
  const auto manifest = nlohmann::json::parse(read_file(box / "a/manifest.json"));
  CHECK(manifest["exclusions"] == 2);
  CHECK(manifest["records_read"] == 10);
  const std::size_t total = manifest["counts"]["train"].get<std::size_t>() +
                            manifest["counts"]["validation"].get<std::size_t>() +
                            manifest["counts"]["test"].get<std::size_t>();
  CHECK(total == 8);

  REQUIRE(box.capseq("prep --input raw/corpus.jsonl --out b").exit_code == 0);
  CHECK(read_file(box / "a/manifest.json") == read_file(box / "b/manifest.json"));
  for (const char* split : {"train.csds", "validation.csds", "test.csds"})
    CHECK(read_file(box / "a" / split) == read_file(box / "b" / split));

  SUBCASE("a different seed changes the split") {
    REQUIRE(box.capseq("--seed 99 prep --input raw/corpus.jsonl --out c").exit_code == 0);
    CHECK(read_file(box / "a/manifest.json") != read_file(box / "c/manifest.json"));
  }
  SUBCASE("an existing manifest is not replaced without --overwrite") {
    const auto r = box.capseq("prep --input raw/corpus.jsonl --out a");
    CHECK(r.exit_code == 1);
    CHECK(r.err.find("--overwrite") != std::string::npos);
    CHECK(box.capseq("prep --input raw/corpus.jsonl --out a --overwrite").exit_code == 0);
  }
}

TEST_CASE("prep warns and continues without a lexicon") {
  CliSandbox box("prep_lexicon");
  REQUIRE(box.synth("--out raw --count 8 --side 32").exit_code == 0);
  const auto r = box.capseq("prep --input raw/corpus.jsonl --lexicon missing.tsv --out data");
  CHECK(r.exit_code == 0);
  CHECK(r.err.find("expansion skipped") != std::string::npos);
}

TEST_CASE("prep skips malformed lines with line numbers and aborts above the threshold") {
  CliSandbox box("prep_skip");
  REQUIRE(box.synth("--out raw --count 12 --malformed 1 --side 32").exit_code == 0);
  auto r = box.capseq("prep --input raw/corpus.jsonl --out ok");
  CHECK(r.exit_code == 0);
  CHECK(r.err.find("corpus.jsonl:2: skipped") != std::string::npos);
  const auto manifest = nlohmann::json::parse(read_file(box / "ok/manifest.json"));
  REQUIRE(manifest["skipped"].size() == 1);
  CHECK(manifest["skipped"][0]["line"] == 2);

  REQUIRE(box.synth("--out bad --count 6 --malformed 2 --side 32").exit_code == 0);
  r = box.capseq("prep --input bad/corpus.jsonl --out nope");
  CHECK(r.exit_code == 2);
  CHECK(r.err.find("skipped 2 of 8") != std::string::npos);
  CHECK_FALSE(fs::exists(box / "nope/manifest.json"));
}

TEST_CASE("validation failures exit with 1 before any work") {
  CliSandbox box("validation");
  CHECK(box.capseq("prep --input nothing.jsonl --out x").exit_code == 1);
  CHECK(box.capseq("--set sat.epochs=0 prep --input nothing.jsonl --out x").exit_code == 1);
  CHECK(box.capseq("--set no.such.key=1 prep --input nothing.jsonl --out x").exit_code == 1);
  CHECK(box.capseq("train-sat --data missing --out x").exit_code == 1);
  CHECK(box.capseq("frobnicate").exit_code == 1);
  CHECK(box.run("--config missing.conf prep --input a --out b").exit_code == 1);
  CHECK_FALSE(fs::exists(box / "x"));
}

TEST_CASE("train-sat writes traces, keeps best apart from last and refuses collisions") {
  CliSandbox box("train_sat");
  make_dataset(box);
  const auto manifest = nlohmann::json::parse(read_file(box / "data/manifest.json"));
  const std::size_t train = manifest["counts"]["train"];
  REQUIRE(box.capseq("--set sat.epochs=3 train-sat --data data --out ck").exit_code == 0);

  const std::size_t batches = (train + 1) / 2;  // desk batch size 2
  CHECK(count_lines(read_file(box / "ck/sat_trace.tsv")) == 1 + 3 * batches);
  CHECK(count_lines(read_file(box / "ck/sat_validation.tsv")) == 1 + 3);
  CHECK(fs::exists(box / "ck/sat_best.csq"));
  CHECK(fs::exists(box / "ck/vocab.txt"));

  // best = first epoch with the highest validation GM-BLEU; a fresh run
  // stopped at that epoch has the same parameters.
  std::ifstream metrics(box / "ck/sat_validation.tsv");
  std::string line;
  std::getline(metrics, line);
  double best = -1.0;
  int best_epoch = 0;
  while (std::getline(metrics, line)) {
    const int epoch = std::stoi(line);
    const double gm = std::stod(line.substr(line.rfind('\t') + 1));
    if (gm > best) best = gm, best_epoch = epoch;
  }
  REQUIRE(box.capseq("--set sat.epochs=" + std::to_string(best_epoch) + " train-sat --data data --out at_best")
              .exit_code == 0);
  CHECK(same_parameters(box / "ck/sat_best.csq", box / "at_best/sat_last.csq"));

  const auto r = box.capseq("--set sat.epochs=3 train-sat --data data --out ck");
  CHECK(r.exit_code == 1);
  CHECK(r.err.find("--overwrite") != std::string::npos);
  CHECK(box.capseq("--set sat.epochs=1 train-sat --data data --out ck --overwrite").exit_code == 0);
  CHECK(count_lines(read_file(box / "ck/sat_trace.tsv")) == 1 + batches);
}

TEST_CASE("an interrupted train-sat run resumes to the uninterrupted result") {
  CliSandbox box("resume_sat");
  make_dataset(box);
  REQUIRE(box.capseq("--set sat.epochs=4 train-sat --data data --out straight").exit_code == 0);
  REQUIRE(box.capseq("--set sat.epochs=2 train-sat --data data --out resumed").exit_code == 0);
  // A crash after the trace was appended but before the checkpoint was written.
  std::ofstream(box / "resumed/sat_trace.tsv", std::ios::app) << "3\t1\t0.5\n";
  const auto r = box.capseq("--set sat.epochs=4 train-sat --data data --out resumed --resume");
  REQUIRE_MESSAGE(r.exit_code == 0, r.err);
  for (const char* f : {"sat_last.csq", "sat_best.csq", "sat_trace.tsv", "sat_validation.tsv", "vocab.txt"}) {
    INFO(f);
    CHECK(read_file(box / "straight" / f) == read_file(box / "resumed" / f));
  }
  CHECK(box.capseq("train-sat --data data --out fresh --resume").exit_code == 1);
}

TEST_CASE("train-lm from packed data and from a text corpus, with resume") {
  CliSandbox box("train_lm");
  make_dataset(box);
  REQUIRE(box.capseq("--set lm.epochs=3 train-lm --data data --out straight").exit_code == 0);
  const std::string trace = read_file(box / "straight/lm_trace.tsv");
  CHECK(trace.starts_with("epoch\tbatch\tloss\tgrad_norm\tclipped\n"));
  CHECK(count_lines(read_file(box / "straight/lm_validation.tsv")) == 4);

  REQUIRE(box.capseq("--set lm.epochs=1 train-lm --data data --out resumed").exit_code == 0);
  REQUIRE(box.capseq("--set lm.epochs=3 train-lm --data data --out resumed --resume").exit_code == 0);
  for (const char* f : {"lm_last.csq", "lm_best.csq", "lm_trace.tsv", "lm_validation.tsv", "bpe.txt"}) {
    INFO(f);
    CHECK(read_file(box / "straight" / f) == read_file(box / "resumed" / f));
  }

  CHECK(box.capseq("--set lm.epochs=1 train-lm --corpus raw/reports.txt --out text").exit_code == 0);
  CHECK(fs::exists(box / "text/lm_best.csq"));
  CHECK(box.capseq("train-lm --out nowhere").exit_code == 1);
}

TEST_CASE("generate writes one record per input, honours --no-lm and rejects mismatched checkpoints") {
  CliSandbox box("generate");
  make_dataset(box, "--count 5 --side 32");
  REQUIRE(box.capseq("--set sat.epochs=2 train-sat --data data --out ck").exit_code == 0);
  REQUIRE(box.capseq("--set lm.epochs=1 train-lm --data data --out ck").exit_code == 0);

  std::string images;
  for (int i = 1; i <= 5; ++i) images += " raw/images/s000" + std::to_string(i) + ".pgm";
  REQUIRE(box.capseq("generate --checkpoints ck --images" + images + " --heatmaps maps --out out.jsonl").exit_code == 0);
  const std::string out = read_file(box / "out.jsonl");
  CHECK(count_lines(out) == 5);
  std::istringstream lines(out);
  std::string line;
  while (std::getline(lines, line)) {
    const auto rec = nlohmann::json::parse(line);
    const std::string seed = rec["seed"], cont = rec["continuation"], combined = rec["combined"];
    CHECK(combined == (cont.empty() ? seed : seed + " " + cont));
    for (const auto& name : rec["heatmaps"]) CHECK(fs::exists(box / "maps" / name.get<std::string>()));
  }

  REQUIRE(box.capseq("generate --no-lm --checkpoints ck --data data/train.csds --out seed.jsonl").exit_code == 0);
  std::istringstream seeds(read_file(box / "seed.jsonl"));
  std::size_t n = 0;
  while (std::getline(seeds, line)) {
    const auto rec = nlohmann::json::parse(line);
    CHECK(rec["continuation"] == "");
    CHECK(rec["combined"] == rec["seed"]);
    ++n;
  }
  CHECK(n > 0);

  const auto r = box.capseq("--set sat.hidden_dim=16 generate --checkpoints ck --images" + images + " --out bad.jsonl");
  CHECK(r.exit_code == 1);
  CHECK(r.err.find("[16") != std::string::npos);
  CHECK(r.err.find("[64") != std::string::npos);
}

TEST_CASE("evaluate reports perfect scores for identical files and names both counts on mismatch") {
  CliSandbox box("evaluate");
  std::ofstream(box / "cand.txt") << "no acute disease.\nheart size is normal.\n";
  std::ofstream(box / "refs.txt") << "no acute disease.\nheart size is normal.\n";
  std::ofstream(box / "short.txt") << "no acute disease.\n";
  REQUIRE(box.run("evaluate --candidates cand.txt --references refs.txt --out eval.txt").exit_code == 0);
  const std::string report = read_file(box / "eval.txt");
  for (const char* key : {"bleu_1=1.000000", "bleu_2=1.000000", "bleu_3=1.000000", "bleu_4=1.000000", "rouge_l=1.000000",
                          "cider="}) {
    CHECK_MESSAGE(report.find(key) != std::string::npos, key);
  }
  const auto r = box.run("evaluate --candidates cand.txt --references short.txt");
  CHECK(r.exit_code == 1);
  CHECK(r.err.find("2 lines") != std::string::npos);
  CHECK(r.err.find("1") != std::string::npos);
}

TEST_CASE("heatmap exports one map per decoded word") {
  CliSandbox box("heatmap");
  make_dataset(box, "--count 5 --side 32");
  REQUIRE(box.capseq("--set sat.epochs=1 train-sat --data data --out ck").exit_code == 0);
  REQUIRE(box.capseq("heatmap --which last --checkpoints ck --image raw/images/s0001.pgm --out maps").exit_code == 0);
  const std::string index = read_file(box / "maps/s0001_steps.tsv");
  REQUIRE(index.starts_with("step\tword\theatmap\n"));
  std::istringstream rows(index);
  std::string row;
  std::getline(rows, row);
  while (std::getline(rows, row)) {
    const std::string name = row.substr(row.rfind('\t') + 1);
    CHECK(fs::exists(box / "maps" / name));
    CHECK(fs::exists(box / "maps" / (name.substr(0, name.size() - 4) + ".csv")));
  }
}
