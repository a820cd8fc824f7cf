#include "capseq/tokenizers.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>

#include "capseq/error.hpp"

namespace capseq {

namespace {

constexpr std::string_view kWordHeader = "capseq-word-vocab v1";
constexpr std::string_view kBpeHeader = "capseq-bpe-vocab v1";

std::uint64_t pack(int left, int right) {
  return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(left)) << 32) | static_cast<std::uint32_t>(right);
}

template <typename T>
T parse_number(std::string_view s, std::string_view what) {
  T v{};
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw FormatError("bad " + std::string(what) + " '" + std::string(s) + "'");
  }
  return v;
}

std::string escape_bytes(std::string_view s) {
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned char c : s) {
    if (c > 0x20 && c < 0x7F && c != '\\') {
      out += static_cast<char>(c);
    } else {
      out += "\\x";
      out += kHex[c >> 4];
      out += kHex[c & 0xF];
    }
  }
  return out;
}

std::string unescape_bytes(std::string_view s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '\\') {
      out += s[i];
      continue;
    }
    if (s.substr(i, 2) != "\\x" || i + 4 > s.size()) throw FormatError("bad escape in '" + std::string(s) + "'");
    unsigned value = 0;
    auto [ptr, ec] = std::from_chars(s.data() + i + 2, s.data() + i + 4, value, 16);
    if (ec != std::errc() || ptr != s.data() + i + 4) throw FormatError("bad escape in '" + std::string(s) + "'");
    out += static_cast<char>(value);
    i += 3;
  }
  return out;
}

std::string read_header(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw FormatError("empty vocabulary file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  return line;
}

}  // namespace

// ---------------------------------------------------------------------------
// WordVocabulary

WordVocabulary WordVocabulary::build(std::span<const TokenList> corpus, std::size_t min_freq) {
  if (corpus.empty()) throw ValidationError("build_word_vocab: empty corpus");
  std::map<std::string, std::size_t> counts;
  for (const auto& sentence : corpus)
    for (const auto& tok : sentence) ++counts[tok];
  std::vector<std::pair<std::string, std::size_t>> kept;
  for (auto& [tok, n] : counts) {
    if (n < std::max<std::size_t>(min_freq, 1)) continue;
    if (tok == kPadToken || tok == kStartToken || tok == kEndToken || tok == kUnkToken) continue;
    kept.emplace_back(tok, n);
  }
  std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> tokens{std::string(kPadToken), std::string(kStartToken), std::string(kEndToken),
                                  std::string(kUnkToken)};
  for (auto& [tok, n] : kept) tokens.push_back(tok);
  return from_tokens(std::move(tokens));
}

WordVocabulary WordVocabulary::from_tokens(std::vector<std::string> tokens) {
  if (tokens.size() < 4 || tokens[kPad] != kPadToken || tokens[kStart] != kStartToken || tokens[kEnd] != kEndToken ||
      tokens[kUnk] != kUnkToken) {
    throw ValidationError("word vocabulary must start with <pad>, <start>, <end>, <unk>");
  }
  WordVocabulary v;
  v.tokens_ = std::move(tokens);
  for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
    if (!v.ids_.emplace(v.tokens_[i], static_cast<int>(i)).second) {
      throw ValidationError("duplicate token '" + v.tokens_[i] + "' in word vocabulary");
    }
  }
  return v;
}

std::optional<int> WordVocabulary::find(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  if (it == ids_.end()) return std::nullopt;
  return it->second;
}

int WordVocabulary::id(std::string_view token) const { return find(token).value_or(kUnk); }

const std::string& WordVocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw ValidationError("word id " + std::to_string(id) + " outside vocabulary of size " +
                          std::to_string(tokens_.size()));
  }
  return tokens_[id];
}

void WordVocabulary::write(std::ostream& out) const {
  out << kWordHeader << '\n';
  for (std::size_t i = 0; i < tokens_.size(); ++i) out << tokens_[i] << '\t' << i << '\n';
}

WordVocabulary WordVocabulary::read(std::istream& in) {
  if (read_header(in) != kWordHeader) throw FormatError("word vocabulary: missing '" + std::string(kWordHeader) + "' header");
  std::vector<std::string> tokens;
  std::string line;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.rfind('\t');
    if (tab == std::string::npos) throw FormatError("word vocabulary line " + std::to_string(lineno) + ": no tab");
    const auto id = parse_number<std::size_t>(std::string_view(line).substr(tab + 1), "token id");
    if (id != tokens.size()) {
      throw FormatError("word vocabulary line " + std::to_string(lineno) + ": ids must be dense and ordered");
    }
    tokens.push_back(line.substr(0, tab));
  }
  return from_tokens(std::move(tokens));
}

void WordVocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  write(out);
}

WordVocabulary WordVocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  return read(in);
}

TokenSequence encode_words(std::span<const std::string> text, const WordVocabulary& vocab, std::size_t max_len) {
  if (max_len < 2) throw ValidationError("encode_words: max_len must be at least 2");
  TokenSequence seq{{}, VocabKind::word};
  seq.ids.reserve(max_len);
  seq.ids.push_back(WordVocabulary::kStart);
  const std::size_t room = std::min(text.size(), max_len - 2);
  for (std::size_t i = 0; i < room; ++i) seq.ids.push_back(vocab.id(text[i]));
  seq.ids.push_back(WordVocabulary::kEnd);
  seq.ids.resize(max_len, WordVocabulary::kPad);
  return seq;
}

TokenList decode_words(std::span<const int> ids, const WordVocabulary& vocab) {
  TokenList out;
  for (int id : ids) {
    if (id == WordVocabulary::kEnd) break;
    if (id == WordVocabulary::kStart || id == WordVocabulary::kPad) continue;
    out.push_back(vocab.token(id));
  }
  return out;
}

std::string detokenize(std::span<const std::string> words) {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty() && w != ".") out += ' ';
    out += w;
  }
  return out;
}

// ---------------------------------------------------------------------------
// BpeVocabulary

namespace {

// Replaces every left-to-right, non-overlapping occurrence of (left,right).
void apply_merge(std::vector<int>& seq, int left, int right, int merged) {
  std::size_t w = 0;
  for (std::size_t r = 0; r < seq.size();) {
    if (r + 1 < seq.size() && seq[r] == left && seq[r + 1] == right) {
      seq[w++] = merged;
      r += 2;
    } else {
      seq[w++] = seq[r++];
    }
  }
  seq.resize(w);
}

std::vector<int> to_bytes(std::string_view text) {
  std::vector<int> seq;
  seq.reserve(text.size());
  for (unsigned char c : text) seq.push_back(c);
  return seq;
}

}  // namespace

BpeVocabulary BpeVocabulary::from_merges(std::vector<std::pair<int, int>> merges) {
  BpeVocabulary v;
  v.symbols_.reserve(kByteCount + 1 + merges.size());
  for (int b = 0; b < kByteCount; ++b) v.symbols_.emplace_back(1, static_cast<char>(b));
  v.symbols_.emplace_back(kEndOfTextToken);
  for (auto [left, right] : merges) {
    const int merged = static_cast<int>(v.symbols_.size());
    if (left < 0 || right < 0 || left >= merged || right >= merged || left == kEndOfText || right == kEndOfText) {
      throw ValidationError("BPE merge (" + std::to_string(left) + "," + std::to_string(right) +
                            ") references an unknown symbol");
    }
    if (!v.rank_.emplace(pack(left, right), static_cast<int>(v.merges_.size())).second) {
      throw ValidationError("duplicate BPE merge (" + std::to_string(left) + "," + std::to_string(right) + ")");
    }
    v.merges_.push_back({left, right, merged});
    v.symbols_.push_back(v.symbols_[left] + v.symbols_[right]);
  }
  return v;
}

BpeVocabulary BpeVocabulary::train(std::string_view corpus, std::size_t num_merges) {
  std::vector<std::pair<int, int>> merges;
  std::vector<std::string> symbols;
  for (int b = 0; b < kByteCount; ++b) symbols.emplace_back(1, static_cast<char>(b));
  symbols.emplace_back(kEndOfTextToken);

  std::vector<int> seq = to_bytes(corpus);
  std::unordered_map<std::uint64_t, std::size_t> counts;
  for (std::size_t step = 0; step < num_merges; ++step) {
    counts.clear();
    for (std::size_t i = 0; i + 1 < seq.size(); ++i) ++counts[pack(seq[i], seq[i + 1])];
    std::uint64_t best = 0;
    std::size_t best_count = 0;
    for (const auto& [key, n] : counts) {
      if (n < best_count) continue;
      if (n > best_count) {
        best = key;
        best_count = n;
        continue;
      }
      const int l = static_cast<int>(key >> 32), r = static_cast<int>(key & 0xFFFFFFFFu);
      const int bl = static_cast<int>(best >> 32), br = static_cast<int>(best & 0xFFFFFFFFu);
      if (std::tie(symbols[l], symbols[r]) < std::tie(symbols[bl], symbols[br])) best = key;
    }
    if (best_count < 2) break;
    const int left = static_cast<int>(best >> 32), right = static_cast<int>(best & 0xFFFFFFFFu);
    const int merged = static_cast<int>(symbols.size());
    symbols.push_back(symbols[left] + symbols[right]);
    merges.emplace_back(left, right);
    apply_merge(seq, left, right, merged);
  }
  return from_merges(std::move(merges));
}

const std::string& BpeVocabulary::bytes(int id) const {
  if (!contains(id)) {
    throw ValidationError("BPE id " + std::to_string(id) + " outside vocabulary of size " +
                          std::to_string(symbols_.size()));
  }
  return symbols_[id];
}

TokenSequence BpeVocabulary::encode(std::string_view text) const {
  // Repeatedly merge the lowest-ranked pair present. A merged symbol only
  // appears in merges ranked after the one that created it, so ranks are
  // applied in increasing order.
  std::vector<int> seq = to_bytes(text);
  while (seq.size() > 1) {
    int best_rank = -1;
    for (std::size_t i = 0; i + 1 < seq.size(); ++i) {
      auto it = rank_.find(pack(seq[i], seq[i + 1]));
      if (it != rank_.end() && (best_rank < 0 || it->second < best_rank)) best_rank = it->second;
    }
    if (best_rank < 0) break;
    const Merge& m = merges_[best_rank];
    apply_merge(seq, m.left, m.right, m.merged);
  }
  return {std::move(seq), VocabKind::bpe};
}

std::string BpeVocabulary::decode(std::span<const int> ids) const {
  std::string out;
  for (int id : ids) out += bytes(id);
  return out;
}

void BpeVocabulary::write(std::ostream& out) const {
  out << kBpeHeader << '\n';
  out << "merges " << merges_.size() << '\n';
  for (const auto& m : merges_) out << m.left << ' ' << m.right << '\n';
  out << "subwords " << symbols_.size() << '\n';
  for (std::size_t i = 0; i < symbols_.size(); ++i) {
    out << i << '\t' << (static_cast<int>(i) == kEndOfText ? symbols_[i] : escape_bytes(symbols_[i])) << '\n';
  }
}

BpeVocabulary BpeVocabulary::read(std::istream& in) {
  if (read_header(in) != kBpeHeader) throw FormatError("BPE vocabulary: missing '" + std::string(kBpeHeader) + "' header");
  std::string line;
  auto next_line = [&](std::string_view what) {
    if (!std::getline(in, line)) throw FormatError("BPE vocabulary truncated before " + std::string(what));
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return std::string_view(line);
  };
  auto count_line = [&](std::string_view key) {
    auto l = next_line(key);
    if (l.substr(0, key.size() + 1) != std::string(key) + " ") throw FormatError("BPE vocabulary: expected '" + std::string(key) + " <n>'");
    return parse_number<std::size_t>(l.substr(key.size() + 1), key);
  };
  const std::size_t merge_count = count_line("merges");
  std::vector<std::pair<int, int>> merges;
  for (std::size_t i = 0; i < merge_count; ++i) {
    auto l = next_line("merge list");
    const auto sp = l.find(' ');
    if (sp == std::string_view::npos) throw FormatError("BPE merge line '" + std::string(l) + "' lacks a space");
    merges.emplace_back(parse_number<int>(l.substr(0, sp), "merge left"), parse_number<int>(l.substr(sp + 1), "merge right"));
  }
  BpeVocabulary v = from_merges(std::move(merges));
  const std::size_t symbol_count = count_line("subwords");
  if (symbol_count != v.size()) throw FormatError("BPE subword table size disagrees with the merge list");
  for (std::size_t i = 0; i < symbol_count; ++i) {
    auto l = next_line("subword table");
    const auto tab = l.find('\t');
    if (tab == std::string_view::npos) throw FormatError("BPE subword line lacks a tab");
    if (parse_number<std::size_t>(l.substr(0, tab), "subword id") != i) throw FormatError("BPE subword ids out of order");
    const std::string text = static_cast<int>(i) == kEndOfText ? std::string(l.substr(tab + 1)) : unescape_bytes(l.substr(tab + 1));
    if (text != v.symbols_[i]) throw FormatError("BPE subword " + std::to_string(i) + " disagrees with the merge list");
  }
  return v;
}

void BpeVocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  write(out);
}

BpeVocabulary BpeVocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return read(in);
}

}  // namespace capseq
