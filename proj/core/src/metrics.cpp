#include "capseq/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>

#include "capseq/error.hpp"
#include "capseq/report_prep.hpp"

namespace capseq {

namespace {

using NGram = std::vector<std::string>;
using Counts = std::map<NGram, std::size_t>;

Counts ngrams(std::span<const std::string> tokens, std::size_t n) {
  Counts out;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) ++out[NGram(tokens.begin() + i, tokens.begin() + i + n)];
  return out;
}

void check_corpus(std::span<const EvalPair> corpus, const char* what) {
  if (corpus.empty()) throw ValidationError(std::string(what) + ": empty corpus");
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto& refs = corpus[i].references;
    if (std::none_of(refs.begin(), refs.end(), [](const TokenList& r) { return !r.empty(); })) {
      throw ValidationError(std::string(what) + ": pair " + std::to_string(i) + " has no non-empty reference");
    }
  }
}

void check_order(std::size_t n) {
  if (n < 1 || n > 4) throw ValidationError("bleu: n must be in 1..4, got " + std::to_string(n));
}

}  // namespace

EvalPair make_eval_pair(std::string_view candidate, std::span<const std::string> references) {
  EvalPair p;
  p.candidate = normalize_text(candidate);
  for (const auto& r : references) p.references.push_back(normalize_text(r));
  return p;
}

ClippedCounts modified_precision(std::span<const EvalPair> corpus, std::size_t n) {
  check_order(n);
  check_corpus(corpus, "bleu");
  ClippedCounts c;
  for (const auto& pair : corpus) {
    Counts cand = ngrams(pair.candidate, n);
    Counts max_ref;
    for (const auto& ref : pair.references)
      for (const auto& [g, k] : ngrams(ref, n)) max_ref[g] = std::max(max_ref[g], k);
    for (const auto& [g, k] : cand) {
      auto it = max_ref.find(g);
      c.matched += std::min(k, it == max_ref.end() ? 0 : it->second);
      c.total += k;
    }
  }
  return c;
}

double brevity_penalty(std::span<const EvalPair> corpus) {
  check_corpus(corpus, "bleu");
  double c = 0.0, r = 0.0;
  for (const auto& pair : corpus) {
    const auto len = pair.candidate.size();
    std::size_t best = pair.references.front().size();
    for (const auto& ref : pair.references) {
      const auto d = [&](std::size_t x) { return x > len ? x - len : len - x; };
      if (d(ref.size()) < d(best) || (d(ref.size()) == d(best) && ref.size() < best)) best = ref.size();
    }
    c += static_cast<double>(len);
    r += static_cast<double>(best);
  }
  if (c == 0.0) return 0.0;
  return c >= r ? 1.0 : std::exp(1.0 - r / c);
}

double bleu_n(std::span<const EvalPair> corpus, std::size_t n) {
  check_order(n);
  double log_sum = 0.0;
  for (std::size_t k = 1; k <= n; ++k) {
    const ClippedCounts c = modified_precision(corpus, k);
    if (c.matched == 0) return 0.0;
    log_sum += std::log(static_cast<double>(c.matched) / static_cast<double>(c.total));
  }
  return brevity_penalty(corpus) * std::exp(log_sum / static_cast<double>(n));
}

std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rouge_l(std::span<const EvalPair> corpus, double beta) {
  check_corpus(corpus, "rouge_l");
  if (!(beta > 0.0)) throw ValidationError("rouge_l: beta must be > 0");
  const double b2 = beta * beta;
  double sum = 0.0;
  for (const auto& pair : corpus) {
    double best = 0.0;
    for (const auto& ref : pair.references) {
      const auto lcs = static_cast<double>(lcs_length(pair.candidate, ref));
      if (lcs == 0.0) continue;
      const double rec = lcs / static_cast<double>(ref.size());
      const double prec = lcs / static_cast<double>(pair.candidate.size());
      best = std::max(best, (1.0 + b2) * rec * prec / (rec + b2 * prec));
    }
    sum += best;
  }
  return sum / static_cast<double>(corpus.size());
}

double cider(std::span<const EvalPair> corpus) {
  if (corpus.size() < 2) {
    throw ValidationError("cider: needs at least 2 pairs to estimate document frequencies; evaluate a larger corpus");
  }
  check_corpus(corpus, "cider");
  const double N = static_cast<double>(corpus.size());
  std::vector<double> per_pair(corpus.size(), 0.0);
  for (std::size_t n = 1; n <= 4; ++n) {
    std::map<NGram, std::size_t> df;
    for (const auto& pair : corpus) {
      std::set<NGram> seen;
      for (const auto& ref : pair.references)
        for (const auto& [g, k] : ngrams(ref, n)) seen.insert(g);
      for (const auto& g : seen) ++df[g];
    }
    auto vec = [&](const TokenList& s) {
      std::map<NGram, double> v;
      for (const auto& [g, k] : ngrams(s, n)) {
        auto it = df.find(g);
        const double d = it == df.end() ? 1.0 : static_cast<double>(it->second);
        v[g] = static_cast<double>(k) * std::log(N / d);
      }
      return v;
    };
    auto norm = [](const std::map<NGram, double>& v) {
      double s = 0.0;
      for (const auto& [g, x] : v) s += x * x;
      return std::sqrt(s);
    };
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      const auto c = vec(corpus[i].candidate);
      const double nc = norm(c);
      double sim = 0.0;
      for (const auto& ref : corpus[i].references) {
        const auto r = vec(ref);
        const double nr = norm(r);
        if (nc == 0.0 || nr == 0.0) continue;
        double dot = 0.0;
        for (const auto& [g, x] : c) {
          auto it = r.find(g);
          if (it != r.end()) dot += x * it->second;
        }
        sim += dot / (nc * nr);
      }
      per_pair[i] += sim / static_cast<double>(corpus[i].references.size()) / 4.0;
    }
  }
  double total = 0.0;
  for (double v : per_pair) total += v;
  return 10.0 * total / N;
}

double geometric_mean_bleu(std::span<const double> bleu) {
  if (bleu.empty()) throw ValidationError("geometric_mean_bleu: no values");
  double log_sum = 0.0;
  for (double b : bleu) {
    if (!(b >= 0.0)) throw ValidationError("geometric_mean_bleu: values must be >= 0");
    if (b == 0.0) return 0.0;
    log_sum += std::log(b);
  }
  return std::exp(log_sum / static_cast<double>(bleu.size()));
}

std::string EvalReport::to_text() const {
  char buf[64];
  std::string out = "corpus_size=" + std::to_string(corpus_size) + "\n";
  auto line = [&](const char* key, double v) {
    std::snprintf(buf, sizeof buf, "%s=%.6f\n", key, v);
    out += buf;
  };
  line("bleu_1", bleu[0]);
  line("bleu_2", bleu[1]);
  line("bleu_3", bleu[2]);
  line("bleu_4", bleu[3]);
  line("rouge_l", rouge_l);
  if (cider) {
    line("cider", *cider);
  } else {
    out += "cider=n/a\n";
  }
  line("geometric_mean_bleu", geometric_mean_bleu);
  return out;
}

EvalReport evaluate(std::span<const EvalPair> corpus) {
  EvalReport r;
  r.corpus_size = corpus.size();
  for (std::size_t n = 1; n <= 4; ++n) r.bleu[n - 1] = bleu_n(corpus, n);
  r.rouge_l = rouge_l(corpus);
  if (corpus.size() >= 2) r.cider = cider(corpus);
  r.geometric_mean_bleu = capseq::geometric_mean_bleu(r.bleu);
  return r;
}

std::vector<EvalPair> read_eval_corpus(const std::filesystem::path& candidates, const std::filesystem::path& references) {
  auto lines = [](const std::filesystem::path& p) {
    std::ifstream in(p);
    if (!in) throw Error("cannot open " + p.string());
    std::vector<std::string> out;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      out.push_back(line);
    }
    return out;
  };
  const auto cand = lines(candidates), ref = lines(references);
  if (cand.size() != ref.size()) {
    throw ValidationError("candidates have " + std::to_string(cand.size()) + " lines but references have " +
                          std::to_string(ref.size()));
  }
  std::vector<EvalPair> corpus;
  for (std::size_t i = 0; i < cand.size(); ++i) {
    std::vector<std::string> alts;
    std::size_t start = 0;
    while (true) {
      const auto tab = ref[i].find('\t', start);
      alts.push_back(ref[i].substr(start, tab == std::string::npos ? std::string::npos : tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    corpus.push_back(make_eval_pair(cand[i], alts));
  }
  return corpus;
}

}  // namespace capseq
