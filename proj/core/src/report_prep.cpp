#include "capseq/report_prep.hpp"

#include <cctype>
#include <cmath>
#include <fstream>
#include <istream>

#include <json.hpp>

#include "capseq/error.hpp"
#include "capseq/rng.hpp"

namespace capseq {

std::string_view to_string(Polarity p) {
  switch (p) {
    case Polarity::present: return "present";
    case Polarity::absent: return "absent";
    case Polarity::uncertain: return "uncertain";
  }
  return "present";
}

Polarity parse_polarity(std::string_view s) {
  if (s == "present" || s == "positive") return Polarity::present;
  if (s == "absent" || s == "negative") return Polarity::absent;
  if (s == "uncertain") return Polarity::uncertain;
  throw ValidationError("unknown label polarity '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------

void AbbreviationLexicon::add(std::string_view abbreviation, std::string_view expansion) {
  std::string key;
  for (unsigned char c : abbreviation) key += static_cast<char>(std::tolower(c));
  TokenList tokens = normalize_text(expansion);
  if (key.empty() || tokens.empty()) {
    throw ValidationError("abbreviation '" + std::string(abbreviation) + "' needs a non-empty expansion");
  }
  entries_[key] = std::move(tokens);
}

const TokenList* AbbreviationLexicon::find(std::string_view token) const {
  auto it = entries_.find(std::string(token));
  return it == entries_.end() ? nullptr : &it->second;
}

AbbreviationLexicon AbbreviationLexicon::read(std::istream& in) {
  AbbreviationLexicon lex;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw FormatError("lexicon line " + std::to_string(lineno) + ": expected abbr<TAB>expansion");
    lex.add(std::string_view(line).substr(0, tab), std::string_view(line).substr(tab + 1));
  }
  return lex;
}

AbbreviationLexicon AbbreviationLexicon::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open lexicon " + path.string());
  return read(in);
}

// ---------------------------------------------------------------------------

std::optional<std::string> build_report(const RawStudy& study) {
  if (study.impression.empty() && study.findings.empty()) return std::nullopt;
  if (study.impression.empty()) return study.findings;
  if (study.findings.empty()) return study.impression;
  return study.impression + " " + study.findings;
}

TokenList normalize_text(std::string_view text) {
  TokenList out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    const std::size_t start = i;
    while (i < text.size() && !std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    if (start == i) break;
    const std::string_view raw = text.substr(start, i - start);

    std::string core;
    std::size_t last_alnum = std::string_view::npos;
    for (std::size_t k = 0; k < raw.size(); ++k) {
      const auto c = static_cast<unsigned char>(raw[k]);
      if (c < 0x80 && std::isalnum(c)) {
        core += static_cast<char>(std::tolower(c));
        last_alnum = k;
      }
    }
    const std::string_view tail = last_alnum == std::string_view::npos ? raw : raw.substr(last_alnum + 1);
    if (!core.empty()) out.push_back(std::move(core));
    if (tail.find('.') != std::string_view::npos) out.emplace_back(".");
  }
  return out;
}

TokenList expand_abbreviations(std::span<const std::string> tokens, const AbbreviationLexicon& lexicon) {
  TokenList out;
  out.reserve(tokens.size());
  for (const auto& tok : tokens) {
    if (const TokenList* expansion = lexicon.find(tok)) {
      out.insert(out.end(), expansion->begin(), expansion->end());
    } else {
      out.push_back(tok);
    }
  }
  return out;
}

ProcessedReport prepend_labels(std::span<const Label> labels, std::span<const std::string> body, std::string study_id) {
  ProcessedReport report;
  report.study_id = std::move(study_id);
  for (const auto& label : labels) {
    TokenList name = normalize_text(label.pathology);
    std::erase(name, std::string("."));
    if (name.empty()) continue;
    switch (label.polarity) {
      case Polarity::present:
        report.tokens.insert(report.tokens.end(), name.begin(), name.end());
        report.tokens.emplace_back("present");
        break;
      case Polarity::absent:
        report.tokens.emplace_back("no");
        report.tokens.insert(report.tokens.end(), name.begin(), name.end());
        break;
      case Polarity::uncertain:
        report.tokens.emplace_back("uncertain");
        report.tokens.insert(report.tokens.end(), name.begin(), name.end());
        break;
    }
    report.tokens.emplace_back(".");
  }
  report.tokens.insert(report.tokens.end(), body.begin(), body.end());
  return report;
}

std::optional<ProcessedReport> process_report(const RawStudy& study, const AbbreviationLexicon* lexicon) {
  auto text = build_report(study);
  if (!text) return std::nullopt;
  TokenList body = normalize_text(*text);
  if (lexicon != nullptr) body = expand_abbreviations(body, *lexicon);
  return prepend_labels(study.labels, body, study.id);
}

DatasetSplit split_dataset(std::span<const std::string> ids, std::array<double, 3> ratios, std::uint64_t seed) {
  double total = 0.0;
  std::size_t parts = 0;
  for (double r : ratios) {
    if (!(r >= 0.0)) throw ValidationError("split ratios must be non-negative");
    total += r;
    parts += r > 0.0;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ValidationError("split ratios must sum to 1, got " + std::to_string(total));
  if (ids.size() < parts) {
    throw ValidationError("cannot split " + std::to_string(ids.size()) + " ids into " + std::to_string(parts) + " parts");
  }
  std::vector<std::string> order(ids.begin(), ids.end());
  Rng rng(seed);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

  const auto n = static_cast<double>(order.size());
  const auto n_val = static_cast<std::size_t>(std::floor(ratios[1] * n + 1e-9));
  const auto n_test = static_cast<std::size_t>(std::floor(ratios[2] * n + 1e-9));
  const std::size_t n_train = order.size() - n_val - n_test;

  DatasetSplit split;
  split.ratios = ratios;
  split.train.assign(order.begin(), order.begin() + n_train);
  split.validation.assign(order.begin() + n_train, order.begin() + n_train + n_val);
  split.test.assign(order.begin() + n_train + n_val, order.end());
  return split;
}

Image preprocess_image(const RawImage& image, std::size_t side) {
  if (image.height == 0 || image.width == 0 || image.pixels.size() != image.height * image.width) {
    throw ValidationError("preprocess_image: zero-area or inconsistent image");
  }
  if (image.max_value == 0) throw ValidationError("preprocess_image: max intensity must be positive");
  Image src{image.height, image.width, std::vector<double>(image.pixels.begin(), image.pixels.end())};
  Image out = resize_bilinear(src, side, side);
  const double scale = 1.0 / static_cast<double>(image.max_value);
  for (double& v : out.values) v = std::clamp(v * scale, 0.0, 1.0);
  return out;
}

RawStudy parse_study_record(std::string_view line, const std::filesystem::path& base_dir) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("malformed JSON: ") + e.what());
  }
  if (!j.is_object()) throw FormatError("record is not a JSON object");
  auto text_field = [&](const char* key, bool required) -> std::string {
    if (!j.contains(key) || j[key].is_null()) {
      if (required) throw FormatError(std::string("missing field '") + key + "'");
      return {};
    }
    if (!j[key].is_string()) throw FormatError(std::string("field '") + key + "' must be a string");
    return j[key].get<std::string>();
  };
  RawStudy study;
  study.id = text_field("id", true);
  if (study.id.empty()) throw FormatError("empty study id");
  study.impression = text_field("impression", false);
  study.findings = text_field("findings", false);
  if (j.contains("labels")) {
    if (!j["labels"].is_array()) throw FormatError("field 'labels' must be an array");
    for (const auto& l : j["labels"]) {
      if (!l.is_object() || !l.contains("pathology") || !l.contains("polarity") || !l["pathology"].is_string() ||
          !l["polarity"].is_string()) {
        throw FormatError("each label needs string fields 'pathology' and 'polarity'");
      }
      try {
        study.labels.push_back({l["pathology"].get<std::string>(), parse_polarity(l["polarity"].get<std::string>())});
      } catch (const ValidationError& e) {
        throw FormatError(e.what());
      }
    }
  }
  std::filesystem::path image = text_field("image", true);
  if (image.is_relative()) image = base_dir / image;
  study.image = read_pgm(image);
  return study;
}

}  // namespace capseq
