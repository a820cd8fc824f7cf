#pragma once

// Raw study records -> normalised, label-prefixed training reports.
//
// Pipeline per study:
//   build_report -> normalize_text -> expand_abbreviations -> prepend_labels
// and, independently, preprocess_image on the study's radiograph.

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "capseq/image.hpp"
#include "capseq/tokenizers.hpp"

namespace capseq {

enum class Polarity : std::uint8_t { present = 0, absent = 1, uncertain = 2 };

std::string_view to_string(Polarity p);
Polarity parse_polarity(std::string_view s);

struct Label {
  std::string pathology;
  Polarity polarity = Polarity::present;

  friend bool operator==(const Label&, const Label&) = default;
};

struct RawStudy {
  std::string id;
  std::string impression;
  std::string findings;
  std::vector<Label> labels;
  RawImage image;
};

struct ProcessedReport {
  TokenList tokens;
  std::string study_id;
};

struct DatasetSplit {
  std::vector<std::string> train;
  std::vector<std::string> validation;
  std::vector<std::string> test;
  std::array<double, 3> ratios{0.75, 0.2475, 0.0025};
};

class AbbreviationLexicon {
 public:
  // Key is lowercased; expansion is run through normalize_text and must
  // not come out empty.
  void add(std::string_view abbreviation, std::string_view expansion);
  const TokenList* find(std::string_view token) const;
  std::size_t size() const noexcept { return entries_.size(); }

  // "abbr<TAB>expansion" lines; blank lines and '#' comments ignored.
  static AbbreviationLexicon read(std::istream& in);
  static AbbreviationLexicon load(const std::filesystem::path& path);

 private:
  std::unordered_map<std::string, TokenList> entries_;
};

// impression + " " + findings; nullopt (excluded) when both are empty.
std::optional<std::string> build_report(const RawStudy& study);

// Whitespace split, lowercase, non-alphanumeric characters stripped, tokens
// left empty dropped. A token whose trailing punctuation contains '.'
// contributes a standalone "." sentence marker after its text.
TokenList normalize_text(std::string_view text);

// Single left-to-right pass; produced tokens are never re-expanded.
TokenList expand_abbreviations(std::span<const std::string> tokens, const AbbreviationLexicon& lexicon);

// One sentence per label, in input order:
//   present   -> "<pathology> present ."
//   absent    -> "no <pathology> ."
//   uncertain -> "uncertain <pathology> ."
ProcessedReport prepend_labels(std::span<const Label> labels, std::span<const std::string> body,
                               std::string study_id = {});

// Full text pipeline for one study; nullopt when the report is excluded.
std::optional<ProcessedReport> process_report(const RawStudy& study, const AbbreviationLexicon* lexicon);

// Deterministic seeded shuffle, then validation = floor(r1*N),
// test = floor(r2*N), train takes the remainder.
DatasetSplit split_dataset(std::span<const std::string> ids, std::array<double, 3> ratios, std::uint64_t seed);

// Bilinear resize to side x side, then divide by the image's max value.
Image preprocess_image(const RawImage& image, std::size_t side = 224);

// One JSON object per line:
//   {"id": "...", "impression": "...", "findings": "...",
//    "labels": [{"pathology": "edema", "polarity": "absent"}, ...],
//    "image": "relative/or/absolute.pgm"}
// Image paths resolve against `base_dir`. Throws FormatError on malformed
// records.
RawStudy parse_study_record(std::string_view line, const std::filesystem::path& base_dir);

}  // namespace capseq
