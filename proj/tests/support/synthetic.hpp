#pragma once

// Small synthetic image-caption corpus shared by unit and acceptance tests.
// Each image carries one bright blob whose placement and brightness identify
// its caption.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "capseq/image.hpp"
#include "capseq/rng.hpp"
#include "capseq/sat_model.hpp"
#include "capseq/tokenizers.hpp"

namespace capseq::testing {

inline const std::vector<std::string>& synthetic_captions() {
  static const std::vector<std::string> captions{
      "no acute cardiopulmonary process .",
      "pleural effusion present . lungs clear .",
      "no edema . heart size normal .",
      "lung opacity present . no pneumothorax .",
      "cardiomegaly present . mild pulmonary edema .",
      "no focal consolidation . no pleural effusion .",
      "uncertain pneumonia . right lower lobe opacity .",
      "stable mediastinal contours . no fracture .",
  };
  return captions;
}

// Free-text report lines for the language model (about 205 BPE tokens with
// 40 merges).
inline const std::vector<std::string>& report_lines() {
  static const std::vector<std::string> lines{
      "no acute cardiopulmonary process.",
      "heart size is normal. lungs are clear.",
      "small left pleural effusion. no pneumothorax.",
      "mild pulmonary edema. stable cardiomegaly.",
      "no focal consolidation. no pleural effusion.",
      "right lower lobe opacity may reflect pneumonia.",
      "mediastinal contours are stable. no fracture.",
      "lines and tubes in standard position.",
  };
  return lines;
}

inline TokenList split_words(const std::string& s) {
  TokenList out;
  std::string cur;
  for (char c : s) {
    if (c == ' ') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

inline Image synthetic_image(std::size_t index, std::size_t side, std::uint64_t seed) {
  Rng rng(derive_seed(seed, index));
  Image img{side, side, std::vector<double>(side * side)};
  // Outer cells of a 3x3 grid, so every blob falls in different pooled regions.
  static constexpr double kCells[8][2] = {{0.2, 0.2}, {0.2, 0.5}, {0.2, 0.8}, {0.5, 0.2},
                                          {0.5, 0.8}, {0.8, 0.2}, {0.8, 0.5}, {0.8, 0.8}};
  const double cy = side * kCells[index % 8][0];
  const double cx = side * kCells[index % 8][1];
  const double radius = side * 0.15;
  for (std::size_t y = 0; y < side; ++y)
    for (std::size_t x = 0; x < side; ++x) {
      const double d = std::hypot(static_cast<double>(y) + 0.5 - cy, static_cast<double>(x) + 0.5 - cx);
      const double blob = d < radius ? 1.0 : 0.0;
      img.values[y * side + x] = std::clamp(0.1 + (0.3 + 0.08 * static_cast<double>(index)) * blob + rng.uniform(-0.05, 0.05), 0.0, 1.0);
    }
  return img;
}

// The 8 image-caption pairs, ready for teacher forcing.
struct SyntheticCorpus {
  std::vector<TokenList> captions;
  WordVocabulary vocab;
  std::vector<Image> images;
  std::vector<SatExample> examples;

  explicit SyntheticCorpus(std::size_t side = 32, std::uint64_t seed = 1) {
    for (const auto& s : synthetic_captions()) captions.push_back(split_words(s));
    vocab = WordVocabulary::build(captions, 1);
    for (std::size_t i = 0; i < captions.size(); ++i) images.push_back(synthetic_image(i, side, seed));
    for (std::size_t i = 0; i < captions.size(); ++i) {
      auto ids = encode_words(captions[i], vocab, 64).ids;
      while (ids.back() == WordVocabulary::kPad) ids.pop_back();
      examples.push_back({&images[i], nullptr, ids});
    }
  }
  SyntheticCorpus(const SyntheticCorpus&) = delete;
  SyntheticCorpus& operator=(const SyntheticCorpus&) = delete;
};

}  // namespace capseq::testing
