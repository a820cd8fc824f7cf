#include <fstream>
#include <map>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>
#include <spdlog/spdlog.h>

#include "capseq/dataset.hpp"
#include "capseq/error.hpp"
#include "capseq/report_prep.hpp"
#include "commands.hpp"

namespace capseq::cli {

void cmd_prep(const RunConfig& config, const PrepArgs& args) {
  require_exists(args.input, "input corpus");
  const fs::path manifest_path = args.out / "manifest.json";
  check_collision(manifest_path, args.overwrite, false);

  std::optional<AbbreviationLexicon> lexicon;
  if (args.lexicon) {
    if (fs::exists(*args.lexicon)) {
      lexicon = AbbreviationLexicon::load(*args.lexicon);
      spdlog::info("loaded {} abbreviations", lexicon->size());
    } else {
      spdlog::warn("lexicon {} not found; abbreviation expansion skipped", args.lexicon->string());
    }
  } else {
    spdlog::warn("no lexicon given; abbreviation expansion skipped");
  }

  std::ifstream in(args.input);
  if (!in) throw Error("cannot open " + args.input.string());
  const fs::path base = args.input.parent_path();

  std::vector<DatasetRecord> records;
  std::unordered_set<std::string> seen;
  nlohmann::json skipped = nlohmann::json::array();
  std::vector<std::string> excluded;
  std::size_t lines = 0;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    ++lines;
    try {
      RawStudy study = parse_study_record(line, base);
      if (!seen.insert(study.id).second) throw FormatError("duplicate study id '" + study.id + "'");
      auto report = process_report(study, lexicon ? &*lexicon : nullptr);
      if (!report || report->tokens.empty()) {
        excluded.push_back(study.id);
        continue;
      }
      records.push_back({study.id, study.labels, std::move(report->tokens),
                         preprocess_image(study.image, config.sat.image_side)});
    } catch (const Error& e) {
      spdlog::warn("{}:{}: skipped: {}", args.input.filename().string(), lineno, e.what());
      skipped.push_back({{"line", lineno}, {"reason", e.what()}});
    }
  }
  if (lines == 0) throw ValidationError("input corpus " + args.input.string() + " has no records");
  const double fraction = static_cast<double>(skipped.size()) / static_cast<double>(lines);
  if (fraction > config.max_skip_fraction) {
    throw Error("skipped " + std::to_string(skipped.size()) + " of " + std::to_string(lines) +
                " records, above prep.max_skip_fraction=" + format_double(config.max_skip_fraction) + "; aborting");
  }

  std::vector<std::string> ids;
  for (const auto& r : records) ids.push_back(r.id);
  const DatasetSplit split = split_dataset(ids, config.split_ratios, config.seed);

  std::unordered_map<std::string, const DatasetRecord*> by_id;
  for (const auto& r : records) by_id[r.id] = &r;
  auto pack = [&](const std::vector<std::string>& part, const char* name) {
    std::vector<DatasetRecord> out;
    for (const auto& id : part) out.push_back(*by_id.at(id));
    fs::create_directories(args.out);
    pack_dataset(args.out / (std::string(name) + ".csds"), out);
  };
  pack(split.train, "train");
  pack(split.validation, "validation");
  pack(split.test, "test");

  nlohmann::ordered_json manifest;
  manifest["seed"] = config.seed;
  manifest["ratios"] = split.ratios;
  manifest["image_side"] = config.sat.image_side;
  manifest["lexicon_entries"] = lexicon ? lexicon->size() : 0;
  manifest["records_read"] = lines;
  manifest["skipped"] = skipped;
  manifest["exclusions"] = excluded.size();
  manifest["excluded_ids"] = excluded;
  manifest["counts"] = {{"train", split.train.size()}, {"validation", split.validation.size()}, {"test", split.test.size()}};
  manifest["splits"] = {{"train", split.train}, {"validation", split.validation}, {"test", split.test}};
  write_text_file(manifest_path, manifest.dump(2) + "\n");
  spdlog::info("prep: {} train, {} validation, {} test, {} excluded, {} skipped", split.train.size(),
               split.validation.size(), split.test.size(), excluded.size(), skipped.size());
}

}  // namespace capseq::cli
