#pragma once

#include <vector>

namespace capseq::testing {

struct Sequence {
  std::vector<int> tokens;
  bool finished = false;
};

// Every distinct sequence the decoder can emit within max_len tokens.
inline void enumerate(std::size_t vocab, std::size_t max_len, int end, Sequence cur, std::vector<Sequence>& out) {
  if (cur.tokens.size() == max_len) {
    out.push_back(cur);
    return;
  }
  for (std::size_t v = 0; v < vocab; ++v) {
    Sequence next = cur;
    if (static_cast<int>(v) == end) {
      next.finished = true;
      out.push_back(next);
    } else {
      next.tokens.push_back(static_cast<int>(v));
      enumerate(vocab, max_len, end, next, out);
    }
  }
}

}  // namespace capseq::testing
