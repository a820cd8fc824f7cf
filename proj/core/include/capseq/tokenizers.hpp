#pragma once

// Two vocabularies: a word-level one for the caption model and a byte-level
// BPE one for the language model.

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace capseq {

enum class VocabKind { word, bpe };

struct TokenSequence {
  std::vector<int> ids;
  VocabKind kind = VocabKind::word;

  friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

using TokenList = std::vector<std::string>;

// ---------------------------------------------------------------------------
// Word vocabulary

class WordVocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kStart = 1;
  static constexpr int kEnd = 2;
  static constexpr int kUnk = 3;
  static constexpr std::string_view kPadToken = "<pad>";
  static constexpr std::string_view kStartToken = "<start>";
  static constexpr std::string_view kEndToken = "<end>";
  static constexpr std::string_view kUnkToken = "<unk>";

  // Specials first, then tokens with frequency >= min_freq ordered by
  // descending frequency, ties lexicographic.
  static WordVocabulary build(std::span<const TokenList> corpus, std::size_t min_freq = 1);
  // Tokens listed in id order; the four specials must occupy ids 0..3.
  static WordVocabulary from_tokens(std::vector<std::string> tokens);

  std::size_t size() const noexcept { return tokens_.size(); }
  int id(std::string_view token) const;  // kUnk when absent
  std::optional<int> find(std::string_view token) const;
  const std::string& token(int id) const;
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }
  static bool is_special(int id) noexcept { return id >= 0 && id <= kUnk; }

  void write(std::ostream& out) const;
  static WordVocabulary read(std::istream& in);
  void save(const std::filesystem::path& path) const;
  static WordVocabulary load(const std::filesystem::path& path);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

// <start> tokens... <end> then <pad> up to max_len. When the text does not
// fit, it is cut so that <end> is still the last content token.
TokenSequence encode_words(std::span<const std::string> text, const WordVocabulary& vocab, std::size_t max_len);
// Drops <start>, <pad> and everything from <end> onwards.
TokenList decode_words(std::span<const int> ids, const WordVocabulary& vocab);
// Joins words with single spaces, attaching "." to the preceding word.
std::string detokenize(std::span<const std::string> words);

// ---------------------------------------------------------------------------
// Byte-level BPE

class BpeVocabulary {
 public:
  static constexpr int kByteCount = 256;
  static constexpr int kEndOfText = 256;
  static constexpr std::string_view kEndOfTextToken = "<|endoftext|>";

  struct Merge {
    int left;
    int right;
    int merged;
  };

  // Greedy training: each round merges the most frequent adjacent pair
  // (overlapping occurrences counted), ties broken by the lexicographic
  // order of (left bytes, right bytes). Stops early once no pair occurs
  // twice.
  static BpeVocabulary train(std::string_view corpus, std::size_t num_merges);
  static BpeVocabulary from_merges(std::vector<std::pair<int, int>> merges);

  std::size_t size() const noexcept { return symbols_.size(); }
  const std::vector<Merge>& merges() const noexcept { return merges_; }
  const std::string& bytes(int id) const;
  bool contains(int id) const noexcept { return id >= 0 && static_cast<std::size_t>(id) < symbols_.size(); }

  TokenSequence encode(std::string_view text) const;
  // Throws ValidationError on ids outside the vocabulary. The end-of-text
  // id decodes to its literal marker.
  std::string decode(std::span<const int> ids) const;

  void write(std::ostream& out) const;
  static BpeVocabulary read(std::istream& in);
  void save(const std::filesystem::path& path) const;
  static BpeVocabulary load(const std::filesystem::path& path);

 private:
  std::vector<std::string> symbols_;
  std::vector<Merge> merges_;
  std::unordered_map<std::uint64_t, int> rank_;  // packed (left,right) -> merge index
};

}  // namespace capseq
