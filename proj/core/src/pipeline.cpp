#include "capseq/pipeline.hpp"

#include <algorithm>
#include <cmath>

#include "capseq/error.hpp"

namespace capseq {

namespace {

std::string trim(std::string s) {
  const auto first = s.find_first_not_of(" \t\n");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\n");
  return s.substr(first, last - first + 1);
}

}  // namespace

SatCaption sat_caption(SatModel& model, const Tensor& annotations, const CaptionOptions& options) {
  const SatConfig& cfg = model.config();
  const std::size_t R = cfg.pooled_side * cfg.pooled_side;
  if (annotations.rank() != 2 || annotations.dim(0) != R || annotations.dim(1) != cfg.features) {
    throw ShapeError("sat_caption: expected annotations " + to_string({R, cfg.features}) + ", got " +
                     to_string(annotations.shape()));
  }
  Rng unused(0);

  auto expand = [&](const SatDecodeState& s) {
    Tape tape(false);
    AnnotationGrid grid = model.annotations(tape, annotations, 1);
    DecoderState state{tape.constant(s.h), tape.constant(s.c)};
    AttentionOutput att = model.attend(grid, state.h);
    const int prev[] = {s.prev};
    DecoderState next = model.lstm_step(prev, state, att.context);
    Var probs = model.output_distribution(next.h, att.context, prev, false, unused);
    std::vector<double> lp(cfg.vocab_size);
    for (std::size_t v = 0; v < lp.size(); ++v) lp[v] = std::log(std::max(probs.value()[v], 1e-300));
    SatDecodeState pending{next.h.value(), next.c.value(), s.prev, s.alphas};
    const Tensor& a = att.alpha.value();
    pending.alphas.emplace_back(a.data(), a.data() + a.size());
    return Step<SatDecodeState>{std::move(lp), std::move(pending)};
  };
  auto append = [](SatDecodeState s, int token) {
    s.prev = token;
    return s;
  };

  SatDecodeState start;
  {
    Tape tape(false);
    DecoderState init = model.init_state(model.annotations(tape, annotations, 1));
    start.h = init.h.value();
    start.c = init.c.value();
  }
  const DecodeOptions decode{options.max_len, WordVocabulary::kEnd};
  SatCaption out;
  Beam<SatDecodeState> chosen;
  if (options.strategy == DecodeStrategy::greedy) {
    chosen = greedy_decode(expand, append, start, decode);
  } else {
    auto result = beam_search(expand, append, start, options.beam_width, decode, options.scoring);
    out.diagnostic = result.diagnostic;
    chosen = select_beam(result.beams, options.rank);
  }
  out.ids = chosen.tokens;
  out.terminated = chosen.finished;
  out.log_prob = chosen.log_prob;
  out.attention = std::move(chosen.state.alphas);
  return out;
}

SatCaption sat_caption(SatModel& model, const Image& image, const CaptionOptions& options) {
  return sat_caption(model, encode_frozen(model, image), options);
}

TextContinuation continue_text(GptLm& lm, const BpeVocabulary& bpe, std::string_view seed_text,
                               const GenerateOptions& options) {
  TextContinuation out;
  std::vector<int> seed = bpe.encode(std::string(seed_text) + " " + std::string(kLmStartMarker)).ids;
  const std::size_t block = lm.config().block_size;
  if (seed.size() >= block) {
    out.diagnostics.push_back("LM seed of " + std::to_string(seed.size()) + " tokens truncated to the last " +
                              std::to_string(block - 1));
    seed.erase(seed.begin(), seed.end() - static_cast<std::ptrdiff_t>(block - 1));
  }
  Continuation cont = generate_continuation(lm, seed, options);
  if (cont.diagnostic) out.diagnostics.push_back(*cont.diagnostic);
  out.tokens = std::move(cont.tokens);
  out.terminated = cont.terminated;
  out.text = trim(bpe.decode(out.tokens));
  return out;
}

PipelineOutput two_stage_generate(SatModel& sat, const WordVocabulary& words, const Tensor& annotations, GptLm* lm,
                                  const BpeVocabulary* bpe, const PipelineOptions& options) {
  if (options.use_lm && (lm == nullptr || bpe == nullptr)) {
    throw ValidationError("two_stage_generate: language model and BPE vocabulary required unless the LM is disabled");
  }
  if (sat.config().vocab_size != words.size()) {
    throw ValidationError("two_stage_generate: SAT vocabulary size " + std::to_string(sat.config().vocab_size) +
                          " does not match word vocabulary of " + std::to_string(words.size()));
  }
  PipelineOutput out;
  SatCaption caption = sat_caption(sat, annotations, options.sat);
  if (caption.diagnostic) out.diagnostics.push_back(*caption.diagnostic);
  for (int id : caption.ids) out.sat_seed.push_back(words.token(id));
  out.attention = std::move(caption.attention);
  out.seed_text = detokenize(out.sat_seed);
  out.combined = out.seed_text;
  if (out.sat_seed.empty()) {
    out.diagnostics.emplace_back("SAT produced an empty caption; returning the seed only");
    return out;
  }
  if (!options.use_lm) return out;

  TextContinuation cont = continue_text(*lm, *bpe, out.seed_text, options.lm);
  out.diagnostics.insert(out.diagnostics.end(), cont.diagnostics.begin(), cont.diagnostics.end());
  out.lm_tokens = std::move(cont.tokens);
  out.lm_terminated = cont.terminated;
  out.lm_continuation = std::move(cont.text);
  if (!out.lm_continuation.empty()) out.combined = out.seed_text + " " + out.lm_continuation;
  return out;
}

std::vector<std::string> lm_training_lines(std::span<const TokenList> reports) {
  std::vector<std::string> lines;
  for (const auto& report : reports) {
    std::vector<TokenList> sentences(1);
    for (const auto& w : report) {
      sentences.back().push_back(w);
      if (w == ".") sentences.emplace_back();
    }
    if (sentences.back().empty()) sentences.pop_back();
    for (std::size_t j = 1; j <= sentences.size(); ++j) {
      TokenList head, tail;
      for (std::size_t s = 0; s < sentences.size(); ++s)
        (s < j ? head : tail).insert((s < j ? head : tail).end(), sentences[s].begin(), sentences[s].end());
      std::string line = detokenize(head) + " " + std::string(kLmStartMarker);
      if (!tail.empty()) line += " " + detokenize(tail);
      lines.push_back(std::move(line));
    }
  }
  return lines;
}

namespace {

std::pair<std::string_view, std::string_view> split_at_marker(std::string_view line) {
  const auto pos = line.find(kLmStartMarker);
  if (pos == std::string_view::npos) return {line, {}};
  const auto cut = pos + kLmStartMarker.size();
  return {line.substr(0, cut), line.substr(cut)};
}

}  // namespace

std::vector<std::string> lm_line_segments(std::span<const std::string> lines) {
  std::vector<std::string> out;
  for (const auto& line : lines) {
    const auto [seed, rest] = split_at_marker(line);
    out.emplace_back(seed);
    if (!rest.empty()) out.emplace_back(rest);
  }
  return out;
}

std::string lm_bpe_corpus(std::span<const std::string> lines) {
  std::string text;
  for (const auto& seg : lm_line_segments(lines)) text += seg + "\n";
  return text;
}

std::vector<std::vector<int>> lm_training_windows(std::span<const std::string> lines, const BpeVocabulary& bpe,
                                                  std::size_t block) {
  std::vector<std::vector<int>> windows;
  for (const auto& line : lines) {
    const auto [seed, rest] = split_at_marker(line);
    std::vector<int> ids;
    for (auto part : {seed, rest}) {
      const auto enc = bpe.encode(part).ids;
      ids.insert(ids.end(), enc.begin(), enc.end());
    }
    ids.push_back(BpeVocabulary::kEndOfText);
    if (ids.size() <= block) {
      windows.push_back(std::move(ids));
    } else {
      for (auto& w : make_windows(ids, block)) windows.push_back(std::move(w));
    }
  }
  return windows;
}

}  // namespace capseq
