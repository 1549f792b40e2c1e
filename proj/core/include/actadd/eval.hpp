#pragma once

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "actadd/corpus.hpp"
#include "actadd/model.hpp"
#include "actadd/sampler.hpp"
#include "actadd/steering.hpp"
#include "actadd/tokenizer.hpp"

namespace actadd {

inline constexpr int kReportVersion = 1;

// How a sentence is laid out and which predictions count.
// Sequence: BOS, prefix..., sentence tokens. Predictions emitted from logits
// rows < masked_rows are dropped; BOS is never a target.
struct ScoringPlan {
  std::vector<TokenId> prefix;
  std::size_t masked_rows = 1;

  // Space padding after BOS that exactly covers the vector's modified
  // positions, with every row up to the last modified one masked.
  static ScoringPlan for_vector(const BpeVocab& vocab, const SteeringVector& vec);
  // `prefix_tokens` after BOS, masking rows up to and including the last
  // prefix position.
  static ScoringPlan for_prefix(std::vector<TokenId> prefix_tokens);
};

// Per-token log-probabilities of one sentence under a plan, paired with the
// scored target ids.
struct SentenceScores {
  std::vector<TokenId> targets;
  std::vector<double> logprobs;
};

SentenceScores score_sentence(const Model& model, const BpeVocab& vocab, std::string_view sentence,
                              const ScoringPlan& plan, const SteeringVector* steering);

// Mean log-probability over every surviving token of every sentence.
double doc_mean_logprob(const Model& model, const BpeVocab& vocab, const Document& doc,
                        const SteeringVector* steering, const ScoringPlan& plan);

struct BinResult {
  double lo = 0.0;
  double hi = 0.0;
  std::size_t documents = 0;
  bool excluded = false;
  double mean_delta = 0.0;  // mean over docs of (L_condition - L_baseline)
  double ratio = 1.0;       // exp(-mean_delta)
};

struct GroupResult {
  std::string name;  // "related" (f_w > 0) or "unrelated" (f_w == 0)
  std::size_t documents = 0;
  double mean_delta = 0.0;
  double ratio = 1.0;
};

struct DocumentDelta {
  std::string id;
  double topic_freq = 0.0;
  double baseline = 0.0;
  double condition = 0.0;
};

struct PerplexityReport {
  std::string condition;  // "actadd", "prompting-baseline" or "none"
  std::vector<BinResult> bins;
  std::vector<GroupResult> groups;
  std::vector<DocumentDelta> documents;
};

// Compares L under `steering` against the unsteered model with the same
// scoring plan. `docs` must already be tagged (tag_and_bin).
PerplexityReport perplexity_ratio(const Model& model, const BpeVocab& vocab, const std::vector<Document>& docs,
                                  const std::vector<FrequencyBin>& bins, const SteeringVector* steering,
                                  std::size_t workers);

// Condition prepends `prefix` tokens after BOS; baseline scores the bare
// sentence. Both score the same sentence tokens.
PerplexityReport prompting_baseline(const Model& model, const BpeVocab& vocab, const std::vector<Document>& docs,
                                    const std::vector<FrequencyBin>& bins, std::string_view prefix,
                                    std::size_t workers);

struct TokenShift {
  TokenId id = 0;
  std::string text;
  std::size_t count = 0;
  double mean_delta = 0.0;
};

struct TokenShiftReport {
  std::vector<TokenShift> tokens;  // sorted by mean_delta descending, ties by id
  std::vector<TokenShift> top;     // up to 10 largest
  std::vector<TokenShift> bottom;  // up to 10 smallest
  // (standard normal quantile, observed mean delta) for each kept token,
  // observed values ascending.
  std::vector<std::pair<double, double>> qq;
  std::size_t min_instances = 20;
  std::size_t total_tokens = 0;
};

TokenShiftReport token_shift(const Model& model, const BpeVocab& vocab, const std::vector<Document>& docs,
                             const SteeringVector& steering, std::size_t min_instances, std::size_t workers);

struct GenerationScore {
  std::optional<int> layer;  // nullopt for the unsteered baseline
  double coefficient = 0.0;
  std::optional<int> dim_cutoff;
  std::size_t n = 0;
  double mean_count = 0.0;
  double fraction = 0.0;
  std::vector<std::size_t> counts;
};

GenerationScore score_completions(const std::vector<Completion>& completions,
                                  const std::vector<std::string>& keywords);

struct SweepReport {
  GenerationScore baseline;
  std::vector<GenerationScore> steered;
};

SweepReport generation_sweep(const Model& model, const BpeVocab& vocab, std::string_view prompt,
                             const ContrastPair& pair, double coefficient, const std::vector<int>& layers, int n,
                             const GenerationParams& params, const std::vector<std::string>& keywords,
                             std::size_t workers);

// Same completions count at each fraction f of the residual dimensions kept
// (n = round(f * d_model)).
SweepReport partial_sweep(const Model& model, const BpeVocab& vocab, std::string_view prompt,
                          const SteeringSpec& spec, const std::vector<double>& fractions, int n,
                          const GenerationParams& params, const std::vector<std::string>& keywords,
                          std::size_t workers);

// Average ranks, Pearson on ranks.
double spearman(std::span<const double> x, std::span<const double> y);

struct PAtKReport {
  std::vector<int> ks;
  std::vector<double> baseline;
  std::vector<double> steered;
  std::size_t items = 0;
};

// Rank of `target` in a logit row: the number of tokens ranked strictly
// ahead of it (higher logit, or equal logit and lower id).
std::size_t target_rank(std::span<const float> logits, TokenId target);

PAtKReport p_at_k(const Model& model, const BpeVocab& vocab, const std::vector<KnowledgeItem>& items,
                  const SteeringVector* steering, const std::vector<int>& ks, std::size_t workers);

// KL(P || Q) over one logit row pair, clamped at 0.
double kl_divergence(std::span<const float> p_logits, std::span<const float> q_logits);

struct KlEntry {
  std::string prompt;
  double kl_a = 0.0;
  double kl_b = 0.0;
};

struct KlReport {
  std::vector<KlEntry> prompts;
  double median_a = 0.0;
  double median_b = 0.0;
};

KlReport kl_shift(const Model& model, const BpeVocab& vocab, const std::vector<std::string>& prompts,
                  const SteeringVector& vec_a, const SteeringVector& vec_b, std::size_t workers);

double median(std::vector<double> values);

// ---- inference-time premium ------------------------------------------------

// Anything that can run forward passes. The premium benchmark times it.
class ForwardBackend {
 public:
  virtual ~ForwardBackend() = default;
  virtual std::string name() const = 0;
  virtual const ModelConfig& config() const = 0;
  virtual ForwardResult run(std::span<const TokenId> tokens, const HookSet& hooks) = 0;
};

class ModelBackend final : public ForwardBackend {
 public:
  ModelBackend(std::string name, const Model& model) : name_(std::move(name)), model_(&model) {}
  std::string name() const override { return name_; }
  const ModelConfig& config() const override { return model_->config; }
  ForwardResult run(std::span<const TokenId> tokens, const HookSet& hooks) override {
    return forward(*model_, tokens, hooks);
  }

 private:
  std::string name_;
  const Model* model_;
};

struct PremiumOptions {
  int reps = 100;
  int warmup = 2;
  int seeds = 10;
  int batch = 32;
  int seq_len = 64;
  int layer = 6;  // clamped to n_layers - 1
  // ActAdd condition runs the baseline workload unchanged. Measures noise.
  bool null_control = false;
};

struct PremiumMeasurement {
  std::string model;
  std::vector<double> baseline_seconds;  // mean pass time per seed
  std::vector<double> actadd_seconds;
  double mean_baseline = 0.0;
  double mean_actadd = 0.0;
  double median_baseline = 0.0;
  double median_actadd = 0.0;
  double premium = 0.0;         // mean_actadd / mean_baseline - 1
  double median_premium = 0.0;  // from medians over every timed pass
  bool low_resolution = false;  // mean pass under 1 ms
};

// Baseline: `batch` forward passes of random tokens. ActAdd: the two contrast
// passes building the vector, then the same batch with the vector injected at
// `layer`. One "pass" below means one such batch.
PremiumMeasurement measure_premium(ForwardBackend& backend, const std::pair<TokenSequence, TokenSequence>& contrast,
                                   const PremiumOptions& options);

struct PremiumReport {
  std::vector<PremiumMeasurement> models;
};

}  // namespace actadd
