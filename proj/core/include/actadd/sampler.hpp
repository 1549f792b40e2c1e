#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "actadd/model.hpp"
#include "actadd/rng.hpp"
#include "actadd/steering.hpp"
#include "actadd/tokenizer.hpp"

namespace actadd {

struct GenerationParams {
  double temperature = 1.0;
  double top_p = 1.0;
  double frequency_penalty = 0.0;
  int max_new_tokens = 40;
  std::uint64_t seed = 0;

  void validate() const;
};

// Settings of the generation-scoring experiment.
GenerationParams scoring_params();

using TokenCounts = std::unordered_map<TokenId, int>;

struct NucleusEntry {
  TokenId id;
  double probability;
};

// Pipeline steps of sample_next, exposed for tests.
std::vector<double> penalized_logits(std::span<const float> logits, const TokenCounts& history, double penalty);
std::vector<double> tempered_softmax(std::span<const double> logits, double temperature);
// Tokens sorted by probability descending (ties: lower id first), truncated to
// the shortest prefix whose mass reaches top_p, renormalized. Never empty.
std::vector<NucleusEntry> nucleus(std::span<const double> probabilities, double top_p);

// penalty -> temperature -> softmax -> nucleus -> inverse-CDF draw.
TokenId sample_next(std::span<const float> logits, const TokenCounts& history, const GenerationParams& params,
                    Xoshiro256pp& rng);

struct Completion {
  TokenSequence prompt;
  TokenSequence generated;
  std::string text;
  std::optional<SteeringSpec> steering;
  std::uint64_t seed = 0;
};

// Prompt is encoded with BOS. The steering vector, when given, is injected on
// every forward pass at fixed prompt positions; generated positions are never
// modified. Stops at max_new_tokens or when end-of-text is sampled (the
// end-of-text token is not kept).
Completion generate(const Model& model, const BpeVocab& vocab, std::string_view prompt, const GenerationParams& params,
                    const SteeringVector* steering = nullptr);

Completion generate(const Model& model, const BpeVocab& vocab, std::string_view prompt, const GenerationParams& params,
                    const SteeringSpec& spec);

// n completions; completion i uses seed params.seed + i. Runs on up to
// `workers` threads, output in seed order.
std::vector<Completion> generate_many(const Model& model, const BpeVocab& vocab, std::string_view prompt,
                                      const GenerationParams& params, const SteeringVector* steering, int n,
                                      std::size_t workers);

}  // namespace actadd
