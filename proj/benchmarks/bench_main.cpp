#include <benchmark/benchmark.h>

#include <filesystem>

#include "actadd/model.hpp"
#include "actadd/rng.hpp"
#include "actadd/sampler.hpp"
#include "actadd/steering.hpp"
#include "actadd/tokenizer.hpp"

namespace {

using namespace actadd;

const BpeVocab& vocab() {
  static const BpeVocab v = BpeVocab::load(std::filesystem::path(ACTADD_GPT2_DIR) / "vocab.json",
                                           std::filesystem::path(ACTADD_GPT2_DIR) / "merges.txt");
  return v;
}

// GPT-2 vocabulary with a reduced trunk so the benchmark runs without weights.
const Model& bench_model() {
  static const Model m = random_model({4, 256, 4, 50257, 256, 1e-5f}, 1);
  return m;
}

std::vector<TokenId> random_tokens(std::size_t n, std::uint64_t seed) {
  Xoshiro256pp rng(seed);
  std::vector<TokenId> out(n);
  for (auto& t : out) t = static_cast<TokenId>(rng.next() % 50257);
  return out;
}

void BM_Forward(benchmark::State& state) {
  const auto tokens = random_tokens(static_cast<std::size_t>(state.range(0)), 1);
  for (auto _ : state) benchmark::DoNotOptimize(forward(bench_model(), tokens));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Forward)->Arg(16)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_ForwardWithInjection(benchmark::State& state) {
  const auto tokens = random_tokens(static_cast<std::size_t>(state.range(0)), 1);
  HookSet hooks;
  hooks.injections.push_back({2, Matrix(3, 256, 0.5f), 1});
  for (auto _ : state) benchmark::DoNotOptimize(forward(bench_model(), tokens, hooks));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_ForwardWithInjection)->Arg(16)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_CachedDecodeStep(benchmark::State& state) {
  const auto prompt = random_tokens(32, 2);
  for (auto _ : state) {
    state.PauseTiming();
    InferenceState s(bench_model());
    s.extend(prompt, {}, true);
    state.ResumeTiming();
    const TokenId one[1] = {42};
    benchmark::DoNotOptimize(s.extend(one, {}, true));
  }
}
BENCHMARK(BM_CachedDecodeStep)->Unit(benchmark::kMicrosecond);

void BM_Encode(benchmark::State& state) {
  const std::string text =
      "The wedding took place in a small chapel by the sea. Guests threw rice as the couple left, and the "
      "band played until midnight. Nobody expected the groom's speech to be so funny!";
  std::size_t bytes = 0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(encode(vocab(), text, true));
    bytes += text.size();
  }
  state.SetBytesProcessed(static_cast<std::int64_t>(bytes));
}
BENCHMARK(BM_Encode);

void BM_BuildSteeringVector(benchmark::State& state) {
  const SteeringSpec spec{ContrastPair::make("Love", "Hate"), 2, 4.0, 1, std::nullopt};
  for (auto _ : state) benchmark::DoNotOptimize(build_steering_vector(bench_model(), vocab(), spec));
}
BENCHMARK(BM_BuildSteeringVector)->Unit(benchmark::kMicrosecond);

void BM_SampleNext(benchmark::State& state) {
  Xoshiro256pp rng(3);
  std::vector<float> logits(50257);
  for (auto& x : logits) x = static_cast<float>(rng.normal());
  GenerationParams p = scoring_params();
  TokenCounts history{{1, 2}, {7, 1}};
  for (auto _ : state) benchmark::DoNotOptimize(sample_next(logits, history, p, rng));
}
BENCHMARK(BM_SampleNext)->Unit(benchmark::kMicrosecond);

}  // namespace

BENCHMARK_MAIN();
