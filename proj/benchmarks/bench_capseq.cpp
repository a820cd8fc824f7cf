#include <benchmark/benchmark.h>

#include <string>
#include <vector>

#include "capseq/decoding.hpp"
#include "capseq/gpt_lm.hpp"
#include "capseq/metrics.hpp"
#include "capseq/pipeline.hpp"
#include "capseq/sat_model.hpp"
#include "capseq/tokenizers.hpp"
#include "support/metric_oracles.hpp"
#include "support/random_model.hpp"
#include "support/synthetic.hpp"

using namespace capseq;
using namespace capseq::testing;

namespace {

void BM_SatForwardBackward(benchmark::State& state) {
  SyntheticCorpus corpus;
  SatConfig c;
  c.vocab_size = corpus.vocab.size();
  SatModel model(c, 1);
  std::vector<Tensor> cache;
  for (const auto& img : corpus.images) cache.push_back(encode_frozen(model, img));
  std::vector<SatExample> batch;
  for (std::size_t i = 0; i < static_cast<std::size_t>(state.range(0)); ++i)
    batch.push_back({nullptr, &cache[i % 8], corpus.examples[i % 8].caption});
  Rng rng(1);
  for (auto _ : state) {
    Tape tape;
    auto fwd = sat_forward(model, tape, batch, true, rng);
    tape.backward(fwd.loss);
    benchmark::DoNotOptimize(fwd.loss.value().item());
  }
}
BENCHMARK(BM_SatForwardBackward)->Arg(1)->Arg(8);

void BM_SatEncode(benchmark::State& state) {
  SyntheticCorpus corpus(static_cast<std::size_t>(state.range(0)));
  SatConfig c;
  c.vocab_size = corpus.vocab.size();
  c.image_side = static_cast<std::size_t>(state.range(0));
  SatModel model(c, 1);
  for (auto _ : state) benchmark::DoNotOptimize(encode_frozen(model, corpus.images[0]));
}
BENCHMARK(BM_SatEncode)->Arg(32)->Arg(64);

void BM_SatCaptionBeam(benchmark::State& state) {
  SyntheticCorpus corpus;
  SatConfig c;
  c.vocab_size = corpus.vocab.size();
  SatModel model(c, 1);
  Tensor annotations = encode_frozen(model, corpus.images[0]);
  CaptionOptions opts{DecodeStrategy::beam, static_cast<std::size_t>(state.range(0)), 1, 12};
  for (auto _ : state) benchmark::DoNotOptimize(sat_caption(model, annotations, opts));
}
BENCHMARK(BM_SatCaptionBeam)->Arg(1)->Arg(5);

void BM_LmForward(benchmark::State& state) {
  LmConfig c;
  c.vocab_size = 300;
  GptLm lm(c, 1);
  std::vector<int> ids(static_cast<std::size_t>(state.range(0)));
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<int>(i * 7 % 300);
  for (auto _ : state) benchmark::DoNotOptimize(lm_logits(lm, ids));
}
BENCHMARK(BM_LmForward)->Arg(16)->Arg(64);

void BM_LmTrainStep(benchmark::State& state) {
  LmConfig c;
  c.vocab_size = 300;
  GptLm lm(c, 1);
  std::vector<int> ids(64);
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<int>(i * 7 % 300);
  for (auto _ : state) {
    Tape tape;
    Var loss = lm_loss(lm, tape, ids);
    tape.backward(loss);
    benchmark::DoNotOptimize(loss.value().item());
  }
}
BENCHMARK(BM_LmTrainStep);

void BM_BpeTrain(benchmark::State& state) {
  std::string text;
  for (int r = 0; r < 20; ++r)
    for (const auto& l : report_lines()) text += l + "\n";
  for (auto _ : state) benchmark::DoNotOptimize(BpeVocabulary::train(text, static_cast<std::size_t>(state.range(0))));
}
BENCHMARK(BM_BpeTrain)->Arg(50)->Arg(200);

void BM_BpeEncode(benchmark::State& state) {
  std::string text;
  for (const auto& l : report_lines()) text += l + "\n";
  auto bpe = BpeVocabulary::train(text, 100);
  std::string input;
  while (input.size() < static_cast<std::size_t>(state.range(0))) input += text;
  for (auto _ : state) benchmark::DoNotOptimize(bpe.encode(input));
  state.SetBytesProcessed(state.iterations() * static_cast<std::int64_t>(input.size()));
}
BENCHMARK(BM_BpeEncode)->Arg(1 << 10)->Arg(1 << 14);

void BM_BeamSearch(benchmark::State& state) {
  RandomModel m{1, 50, 1.0};
  const auto K = static_cast<std::size_t>(state.range(0));
  for (auto _ : state)
    benchmark::DoNotOptimize(beam_search(m.expand(), RandomModel::append(), std::vector<int>{}, K, DecodeOptions{12, 0}));
}
BENCHMARK(BM_BeamSearch)->Arg(1)->Arg(5)->Arg(20);

void BM_Metrics(benchmark::State& state) {
  Rng rng(1);
  std::vector<EvalPair> corpus;
  for (int i = 0; i < state.range(0); ++i) corpus.push_back({random_sentence(rng, 5, 30), {random_sentence(rng, 5, 30)}});
  for (auto _ : state) benchmark::DoNotOptimize(evaluate(corpus));
}
BENCHMARK(BM_Metrics)->Arg(100)->Arg(1000);

}  // namespace

BENCHMARK_MAIN();
