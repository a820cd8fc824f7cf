#pragma once

// Greedy and K-beam decoding over an abstract step function.
//
// A decoder state is expanded once per step:
//   expand(state)          -> Step{log_probs over the vocabulary, pending}
//   append(pending, token) -> state ready for the next expansion
// so models compute their recurrent update once and share it between all
// candidate tokens.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "capseq/error.hpp"

namespace capseq {

template <typename State>
struct Step {
  std::vector<double> log_probs;
  State next;
};

template <typename State>
struct Beam {
  std::vector<int> tokens;  // emitted tokens, terminator excluded
  double log_prob = 0.0;
  bool finished = false;  // ended with the terminator
  State state{};

  // Token count used for length normalisation; the terminator counts.
  std::size_t length() const noexcept { return tokens.size() + (finished ? 1 : 0); }
};

enum class BeamScoring { length_normalized, raw };

template <typename State>
double beam_score(const Beam<State>& b, BeamScoring scoring) {
  if (scoring == BeamScoring::raw || b.length() == 0) return b.log_prob;
  return b.log_prob / static_cast<double>(b.length());
}

struct DecodeOptions {
  std::size_t max_len = 20;  // emitted tokens including the terminator
  int end_token = -1;        // negative: no terminator
};

template <typename State>
struct BeamSearchResult {
  std::vector<Beam<State>> beams;  // best first
  std::size_t width = 0;           // K after clamping
  std::optional<std::string> diagnostic;
};

namespace detail {

inline std::size_t argmax_lowest(const std::vector<double>& v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

inline void check_log_probs(const std::vector<double>& lp, std::size_t vocab) {
  if (lp.size() != vocab || lp.empty()) throw ValidationError("decode: step returned a log-prob vector of the wrong size");
}

// Distinct token sequences of at most max_len tokens, saturating at cap.
// With a terminator, sequences stop at it: (V-1)^(l-1) end at length l and
// (V-1)^max_len run to the cap unfinished.
inline std::size_t reachable_sequences(std::size_t vocab, std::size_t max_len, bool has_end, std::size_t cap) {
  const double v = static_cast<double>(vocab);
  double total = 0.0;
  if (!has_end) {
    total = std::pow(v, static_cast<double>(max_len));
  } else {
    for (std::size_t l = 1; l <= max_len && total < cap; ++l) total += std::pow(v - 1.0, static_cast<double>(l - 1));
    total += std::pow(v - 1.0, static_cast<double>(max_len));
  }
  return total >= static_cast<double>(cap) ? cap : static_cast<std::size_t>(total);
}

}  // namespace detail

template <typename State, typename Expand, typename Append>
Beam<State> greedy_decode(Expand&& expand, Append&& append, State start, const DecodeOptions& options) {
  if (options.max_len < 1) throw ValidationError("greedy_decode: max_len must be >= 1");
  Beam<State> beam;
  beam.state = std::move(start);
  std::size_t vocab = 0;
  while (beam.tokens.size() < options.max_len) {
    Step<State> step = expand(beam.state);
    if (vocab == 0) vocab = step.log_probs.size();
    detail::check_log_probs(step.log_probs, vocab);
    const std::size_t tok = detail::argmax_lowest(step.log_probs);
    beam.log_prob += step.log_probs[tok];
    if (static_cast<int>(tok) == options.end_token) {
      beam.finished = true;
      break;
    }
    beam.state = append(std::move(step.next), static_cast<int>(tok));
    beam.tokens.push_back(static_cast<int>(tok));
  }
  return beam;
}

// Standard beam search. Each step extends every live beam by every token
// and keeps the K best of (finished beams + extensions) by cumulative
// log-probability, ties to the lexicographically smaller token sequence.
// Finished beams stay in the pool and count against K. The result is sorted
// by `scoring`.
template <typename State, typename Expand, typename Append>
BeamSearchResult<State> beam_search(Expand&& expand, Append&& append, State start, std::size_t K,
                                    const DecodeOptions& options, BeamScoring scoring = BeamScoring::length_normalized) {
  if (K < 1) throw ValidationError("beam_search: K must be >= 1");
  if (options.max_len < 1) throw ValidationError("beam_search: max_len must be >= 1");

  struct Candidate {
    std::size_t parent;
    int token;  // -1 for a carried finished beam
    double log_prob;
    const std::vector<int>* prefix;
  };

  BeamSearchResult<State> result;
  std::vector<Beam<State>> pool(1);
  pool[0].state = std::move(start);
  std::size_t vocab = 0;

  for (std::size_t t = 0; t < options.max_len; ++t) {
    if (std::none_of(pool.begin(), pool.end(), [](const auto& b) { return !b.finished; })) break;
    std::vector<std::optional<Step<State>>> steps(pool.size());
    std::vector<Candidate> cands;
    for (std::size_t i = 0; i < pool.size(); ++i) {
      if (pool[i].finished) {
        cands.push_back({i, -1, pool[i].log_prob, &pool[i].tokens});
        continue;
      }
      steps[i] = expand(pool[i].state);
      const auto& lp = steps[i]->log_probs;
      if (vocab == 0) {
        vocab = lp.size();
        const std::size_t reachable = detail::reachable_sequences(vocab, options.max_len, options.end_token >= 0, K);
        if (reachable < K) {
          result.diagnostic = "beam width " + std::to_string(K) + " exceeds the " + std::to_string(reachable) +
                              " reachable sequences; clamped";
          K = reachable;
        }
      }
      detail::check_log_probs(lp, vocab);
      for (std::size_t v = 0; v < vocab; ++v) cands.push_back({i, static_cast<int>(v), pool[i].log_prob + lp[v], &pool[i].tokens});
    }
    auto better = [&](const Candidate& a, const Candidate& b) {
      if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
      std::vector<int> sa(*a.prefix), sb(*b.prefix);
      if (a.token >= 0) sa.push_back(a.token);
      if (b.token >= 0) sb.push_back(b.token);
      return sa < sb;
    };
    const std::size_t keep = std::min(K, cands.size());
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(), better);

    std::vector<Beam<State>> next;
    next.reserve(keep);
    for (std::size_t k = 0; k < keep; ++k) {
      const Candidate& c = cands[k];
      const Beam<State>& parent = pool[c.parent];
      Beam<State> b;
      b.tokens = parent.tokens;
      b.log_prob = c.log_prob;
      if (c.token < 0) {
        b = parent;
      } else if (c.token == options.end_token) {
        b.finished = true;
        b.state = parent.state;
      } else {
        b.tokens.push_back(c.token);
        b.state = append(State(steps[c.parent]->next), c.token);
      }
      next.push_back(std::move(b));
    }
    pool = std::move(next);
  }

  std::stable_sort(pool.begin(), pool.end(),
                   [&](const auto& a, const auto& b) { return beam_score(a, scoring) > beam_score(b, scoring); });
  result.width = K;
  result.beams = std::move(pool);
  return result;
}

// beams[rank - 1]; rank is 1-based.
template <typename State>
const Beam<State>& select_beam(const std::vector<Beam<State>>& beams, std::size_t rank) {
  if (rank < 1 || rank > beams.size()) {
    throw ValidationError("select_beam: rank " + std::to_string(rank) + " outside 1.." + std::to_string(beams.size()));
  }
  return beams[rank - 1];
}

}  // namespace capseq
