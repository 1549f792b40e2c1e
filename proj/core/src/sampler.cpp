#include "actadd/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "actadd/error.hpp"
#include "actadd/parallel.hpp"

namespace actadd {

void GenerationParams::validate() const {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw ValidationError("temperature", "must be > 0");
  }
  if (!(top_p > 0.0 && top_p <= 1.0)) throw ValidationError("top_p", "must lie in (0, 1]");
  if (!(frequency_penalty >= 0.0) || !std::isfinite(frequency_penalty)) {
    throw ValidationError("frequency_penalty", "must be >= 0");
  }
  if (max_new_tokens < 0) throw ValidationError("max_new_tokens", "must be >= 0");
}

GenerationParams scoring_params() {
  GenerationParams p;
  p.temperature = 1.0;
  p.frequency_penalty = 1.0;
  p.top_p = 0.3;
  p.max_new_tokens = 40;
  p.seed = 0;
  return p;
}

std::vector<double> penalized_logits(std::span<const float> logits, const TokenCounts& history, double penalty) {
  std::vector<double> out(logits.begin(), logits.end());
  if (penalty == 0.0) return out;
  for (const auto& [id, count] : history) {
    if (id >= 0 && static_cast<std::size_t>(id) < out.size()) out[static_cast<std::size_t>(id)] -= penalty * count;
  }
  return out;
}

std::vector<double> tempered_softmax(std::span<const double> logits, double temperature) {
  std::vector<double> out(logits.size());
  double max_v = -INFINITY;
  for (double v : logits) max_v = std::max(max_v, v / temperature);
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] / temperature - max_v);
    total += out[i];
  }
  for (auto& p : out) p /= total;
  return out;
}

std::vector<NucleusEntry> nucleus(std::span<const double> probabilities, double top_p) {
  std::vector<NucleusEntry> entries(probabilities.size());
  for (std::size_t i = 0; i < probabilities.size(); ++i) entries[i] = {static_cast<TokenId>(i), probabilities[i]};
  std::sort(entries.begin(), entries.end(), [](const NucleusEntry& a, const NucleusEntry& b) {
    return a.probability != b.probability ? a.probability > b.probability : a.id < b.id;
  });
  double mass = 0.0;
  std::size_t keep = entries.size();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    mass += entries[i].probability;
    if (mass >= top_p) {
      keep = i + 1;
      break;
    }
  }
  keep = std::max<std::size_t>(keep, 1);
  entries.resize(keep);
  double kept = 0.0;
  for (const auto& e : entries) kept += e.probability;
  for (auto& e : entries) e.probability /= kept;
  return entries;
}

TokenId sample_next(std::span<const float> logits, const TokenCounts& history, const GenerationParams& params,
                    Xoshiro256pp& rng) {
  const auto adjusted = penalized_logits(logits, history, params.frequency_penalty);
  const auto probs = tempered_softmax(adjusted, params.temperature);
  const auto kept = nucleus(probs, params.top_p);
  const double u = rng.uniform();
  double cum = 0.0;
  for (const auto& e : kept) {
    cum += e.probability;
    if (u < cum) return e.id;
  }
  return kept.back().id;
}

Completion generate(const Model& model, const BpeVocab& vocab, std::string_view prompt, const GenerationParams& params,
                    const SteeringVector* steering) {
  params.validate();
  Completion completion;
  completion.seed = params.seed;
  completion.prompt = encode(vocab, prompt, true);
  if (completion.prompt.size() < 2) throw ValidationError("prompt", "prompt is empty");
  if (completion.prompt.size() > static_cast<std::size_t>(model.config.max_positions)) {
    throw ValidationError("prompt", "prompt has " + std::to_string(completion.prompt.size()) +
                                        " tokens, more than max_positions");
  }
  if (steering) {
    completion.steering = SteeringSpec{steering->pair.value_or(ContrastPair{}), steering->layer,
                                       steering->coefficient, steering->alignment, steering->dim_cutoff};
  }

  const HookSet hooks = steering ? steering->hooks(completion.prompt.size()) : HookSet{};
  Xoshiro256pp rng(params.seed);
  InferenceState state(model);
  TokenCounts history;
  auto result = state.extend(completion.prompt.ids, hooks, true);
  const auto limit = static_cast<std::size_t>(model.config.max_positions);
  for (int step = 0; step < params.max_new_tokens; ++step) {
    const TokenId next = sample_next(result.logits.row(0), history, params, rng);
    if (next == vocab.eot_id()) break;
    completion.generated.ids.push_back(next);
    ++history[next];
    if (step + 1 == params.max_new_tokens || state.length() >= limit) break;
    const TokenId one[1] = {next};
    result = state.extend(one, hooks, true);
  }
  completion.text = decode(vocab, completion.generated);
  return completion;
}

Completion generate(const Model& model, const BpeVocab& vocab, std::string_view prompt, const GenerationParams& params,
                    const SteeringSpec& spec) {
  const auto vec = build_steering_vector(model, vocab, spec);
  auto completion = generate(model, vocab, prompt, params, &vec);
  completion.steering = spec;
  return completion;
}

std::vector<Completion> generate_many(const Model& model, const BpeVocab& vocab, std::string_view prompt,
                                      const GenerationParams& params, const SteeringVector* steering, int n,
                                      std::size_t workers) {
  if (n < 0) throw ValidationError("n_completions", "must be >= 0");
  std::vector<Completion> out(static_cast<std::size_t>(n));
  parallel_for(out.size(), workers, [&](std::size_t i) {
    GenerationParams p = params;
    p.seed = params.seed + i;
    out[i] = generate(model, vocab, prompt, p, steering);
  });
  return out;
}

}  // namespace actadd
