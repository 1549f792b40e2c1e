#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "actadd/error.hpp"
#include "actadd/eval.hpp"
#include "stub_backend.hpp"
#include "support.hpp"

namespace actadd {
namespace {

using testing::data_dir;
using testing::load_json;
using testing::oracle_dir;
using testing::toy_model;
using testing::toy_vocab;

const nlohmann::json& toy_expected() {
  static const auto j = load_json(oracle_dir() / "toy_expected.json");
  return j;
}

SteeringVector love_hate(double c = 4.0) {
  return build_steering_vector(toy_model(), toy_vocab(),
                               SteeringSpec{ContrastPair::make("Love", "Hate"), 2, c, 1, std::nullopt});
}

Document toy_doc() {
  Document d;
  d.id = "toy";
  d.sentences = toy_expected()["doc"]["sentences"].get<std::vector<std::string>>();
  return d;
}

// Relative tolerance on log-probabilities computed in float32 against a
// float64 oracle.
constexpr double kLogprobTol = 2e-4;

TEST(Scoring, PlanLayout) {
  const auto vec = love_hate();
  const auto plan = ScoringPlan::for_vector(toy_vocab(), vec);
  EXPECT_EQ(plan.prefix, std::vector<TokenId>(3, *toy_vocab().find_bytes(" ")));
  EXPECT_EQ(plan.masked_rows, 4u);
  const auto bare = ScoringPlan::for_prefix({});
  EXPECT_EQ(bare.masked_rows, 1u);
}

TEST(Scoring, PerSentenceScoresMatchOracle) {
  const auto vec = love_hate();
  const auto plan = ScoringPlan::for_vector(toy_vocab(), vec);
  for (const auto& s : toy_expected()["doc"]["per_sentence"]) {
    const auto text = s["sentence"].get<std::string>();
    const auto base = score_sentence(toy_model(), toy_vocab(), text, plan, nullptr);
    const auto steered = score_sentence(toy_model(), toy_vocab(), text, plan, &vec);
    const auto eb = s["baseline"].get<std::vector<double>>();
    const auto es = s["steered"].get<std::vector<double>>();
    ASSERT_EQ(base.logprobs.size(), eb.size());
    ASSERT_EQ(steered.logprobs.size(), es.size());
    EXPECT_EQ(base.targets, steered.targets);
    for (std::size_t i = 0; i < eb.size(); ++i) {
      EXPECT_NEAR(base.logprobs[i], eb[i], kLogprobTol * std::abs(eb[i]));
      EXPECT_NEAR(steered.logprobs[i], es[i], kLogprobTol * std::abs(es[i]));
    }
  }
}

TEST(Scoring, DocMeansMatchOracle) {
  const auto vec = love_hate();
  const auto plan = ScoringPlan::for_vector(toy_vocab(), vec);
  const auto& fx = toy_expected()["doc"];
  EXPECT_NEAR(doc_mean_logprob(toy_model(), toy_vocab(), toy_doc(), nullptr, plan), fx["baseline"].get<double>(),
              1e-4);
  EXPECT_NEAR(doc_mean_logprob(toy_model(), toy_vocab(), toy_doc(), &vec, plan), fx["steered"].get<double>(), 1e-4);
}

TEST(Scoring, PromptingMatchesOracle) {
  const auto& fx = toy_expected()["prompting"];
  const auto prefix = encode(toy_vocab(), fx["prefix"].get<std::string>(), false).ids;
  EXPECT_EQ(prefix, fx["prefix_tokens"].get<std::vector<TokenId>>());
  EXPECT_NEAR(doc_mean_logprob(toy_model(), toy_vocab(), toy_doc(), nullptr, ScoringPlan::for_prefix({})),
              fx["baseline"].get<double>(), 1e-4);
  EXPECT_NEAR(doc_mean_logprob(toy_model(), toy_vocab(), toy_doc(), nullptr, ScoringPlan::for_prefix(prefix)),
              fx["condition"].get<double>(), 1e-4);
}

std::vector<Document> small_corpus(std::size_t per_group) {
  auto all = load_corpus((data_dir() / "corpus.jsonl").string());
  std::vector<Document> docs(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(per_group));
  docs.insert(docs.end(), all.end() - static_cast<std::ptrdiff_t>(per_group), all.end());
  return docs;
}

TEST(Perplexity, ZeroCoefficientGivesUnitRatios) {
  auto docs = small_corpus(6);
  const auto bins = tag_and_bin(docs, default_topic_keywords(), 0.005, 0);
  const auto zero = love_hate(0.0);
  const auto report = perplexity_ratio(toy_model(), toy_vocab(), docs, bins, &zero, 2);
  EXPECT_EQ(report.condition, "actadd");
  ASSERT_EQ(report.documents.size(), docs.size());
  for (const auto& d : report.documents) EXPECT_EQ(d.baseline, d.condition) << d.id;
  for (const auto& b : report.bins) {
    if (!b.excluded) EXPECT_EQ(b.ratio, 1.0);
  }
  ASSERT_EQ(report.groups.size(), 2u);
  for (const auto& g : report.groups) EXPECT_EQ(g.ratio, 1.0);
}

TEST(Perplexity, RatioIsExpOfNegativeMeanDelta) {
  auto docs = small_corpus(4);
  const auto bins = tag_and_bin(docs, default_topic_keywords(), 0.005, 0);
  const auto vec = love_hate();
  const auto report = perplexity_ratio(toy_model(), toy_vocab(), docs, bins, &vec, 3);
  for (const auto& g : report.groups) {
    EXPECT_NEAR(g.ratio, std::exp(-g.mean_delta), 1e-12);
    EXPECT_EQ(g.documents, 4u);
  }
  double related = 0.0;
  for (const auto& d : report.documents) {
    if (d.topic_freq > 0.0) related += d.condition - d.baseline;
  }
  EXPECT_NEAR(report.groups[0].name == "related" ? report.groups[0].mean_delta : report.groups[1].mean_delta,
              related / 4.0, 1e-12);
  // Same answer on one worker.
  const auto serial = perplexity_ratio(toy_model(), toy_vocab(), docs, bins, &vec, 1);
  for (std::size_t i = 0; i < docs.size(); ++i) {
    EXPECT_EQ(serial.documents[i].condition, report.documents[i].condition);
  }
}

TEST(Perplexity, ExcludedBinsAreReportedButNotAggregated) {
  auto docs = small_corpus(3);
  const auto bins = tag_and_bin(docs, default_topic_keywords(), 0.005, 2);
  const auto vec = love_hate();
  const auto report = perplexity_ratio(toy_model(), toy_vocab(), docs, bins, &vec, 2);
  ASSERT_EQ(report.bins.size(), bins.size());
  for (std::size_t i = 0; i < bins.size(); ++i) EXPECT_EQ(report.bins[i].excluded, bins[i].excluded());
}

TEST(Perplexity, PromptingBaselineUsesPrefix) {
  auto docs = small_corpus(2);
  const auto bins = tag_and_bin(docs, default_topic_keywords(), 0.005, 0);
  const auto report = prompting_baseline(toy_model(), toy_vocab(), docs, bins, " weddings", 2);
  EXPECT_EQ(report.condition, "prompting-baseline");
  const auto prefix = encode(toy_vocab(), " weddings", false).ids;
  EXPECT_EQ(report.documents[0].condition,
            doc_mean_logprob(toy_model(), toy_vocab(), docs[0], nullptr, ScoringPlan::for_prefix(prefix)));
  EXPECT_EQ(report.documents[0].baseline,
            doc_mean_logprob(toy_model(), toy_vocab(), docs[0], nullptr, ScoringPlan::for_prefix({})));
}

TEST(TokenShift, CountsSortingAndQq) {
  const auto docs = small_corpus(5);
  const auto vec = love_hate();
  const auto report = token_shift(toy_model(), toy_vocab(), docs, vec, 5, 2);
  ASSERT_FALSE(report.tokens.empty());
  for (std::size_t i = 1; i < report.tokens.size(); ++i) {
    EXPECT_GE(report.tokens[i - 1].mean_delta, report.tokens[i].mean_delta);
  }
  for (const auto& t : report.tokens) EXPECT_GT(t.count, 5u);
  EXPECT_LE(report.top.size(), 10u);
  EXPECT_EQ(report.top.front().id, report.tokens.front().id);
  EXPECT_EQ(report.bottom.front().id, report.tokens.back().id);
  ASSERT_EQ(report.qq.size(), report.tokens.size());
  for (std::size_t i = 1; i < report.qq.size(); ++i) {
    EXPECT_LT(report.qq[i - 1].first, report.qq[i].first);
    EXPECT_LE(report.qq[i - 1].second, report.qq[i].second);
  }
  EXPECT_NEAR(report.qq.front().first, -report.qq.back().first, 1e-12);
}

TEST(TokenShift, ZeroVectorShiftsNothing) {
  const auto docs = small_corpus(2);
  const auto report = token_shift(toy_model(), toy_vocab(), docs, love_hate(0.0), 0, 2);
  for (const auto& t : report.tokens) EXPECT_EQ(t.mean_delta, 0.0);
}

TEST(Generation, KeywordCounting) {
  std::vector<Completion> cs(3);
  cs[0].text = "A wedding and a bride.";
  cs[1].text = "Nothing here.";
  cs[2].text = "Weddings!";
  const auto score = score_completions(cs, default_topic_keywords());
  EXPECT_EQ(score.n, 3u);
  EXPECT_EQ(score.counts, (std::vector<std::size_t>{2, 0, 1}));
  EXPECT_DOUBLE_EQ(score.mean_count, 1.0);
  EXPECT_DOUBLE_EQ(score.fraction, 2.0 / 3.0);
}

TEST(Generation, SweepShapes) {
  GenerationParams p = scoring_params();
  p.max_new_tokens = 8;
  const auto pair = ContrastPair::make("weddings", "");
  const auto sweep = generation_sweep(toy_model(), toy_vocab(), "I went up to my friend and said", pair, 1.0,
                                      {0, 2}, 3, p, default_topic_keywords(), 2);
  EXPECT_FALSE(sweep.baseline.layer.has_value());
  ASSERT_EQ(sweep.steered.size(), 2u);
  EXPECT_EQ(sweep.steered[1].layer, 2);
  EXPECT_EQ(sweep.steered[1].n, 3u);

  const SteeringSpec spec{pair, 1, 4.0, 1, std::nullopt};
  const auto partial = partial_sweep(toy_model(), toy_vocab(), "I went up to my friend and said", spec,
                                     {0.0, 0.5, 1.0}, 2, p, default_topic_keywords(), 2);
  ASSERT_EQ(partial.steered.size(), 3u);
  EXPECT_EQ(partial.steered[0].dim_cutoff, 0);
  EXPECT_EQ(partial.steered[1].dim_cutoff, 16);
  // No injection at f = 0, so the completions equal the baseline.
  EXPECT_EQ(partial.steered[0].counts, partial.baseline.counts);
}

TEST(Stats, Spearman) {
  const std::vector<double> x{1, 2, 3, 4, 5};
  EXPECT_DOUBLE_EQ(spearman(x, std::vector<double>{2, 4, 6, 8, 10}), 1.0);
  EXPECT_DOUBLE_EQ(spearman(x, std::vector<double>{5, 4, 3, 2, 1}), -1.0);
  // Ties take average ranks: ranks of y are 1.5, 1.5, 3, 4, 5.
  EXPECT_NEAR(spearman(x, std::vector<double>{1, 1, 2, 3, 4}), 0.9746794344808963, 1e-12);
  EXPECT_TRUE(std::isnan(spearman(x, std::vector<double>{1, 1, 1, 1, 1})));
}

TEST(Stats, Median) {
  EXPECT_DOUBLE_EQ(median({3, 1, 2}), 2.0);
  EXPECT_DOUBLE_EQ(median({4, 1, 3, 2}), 2.5);
}

TEST(Stats, KlDivergence) {
  const std::vector<float> p{1.0f, 2.0f, 3.0f};
  EXPECT_EQ(kl_divergence(p, p), 0.0);
  const std::vector<float> q{3.0f, 2.0f, 1.0f};
  EXPECT_GT(kl_divergence(p, q), 0.0);
  const std::vector<float> shifted{11.0f, 12.0f, 13.0f};
  EXPECT_NEAR(kl_divergence(p, shifted), 0.0, 1e-12);
}

TEST(Kl, MatchesOracle) {
  const auto& fx = toy_expected()["kl"];
  const auto b = build_steering_vector(
      toy_model(), toy_vocab(),
      SteeringSpec{ContrastPair::make(fx["vector_b"]["plus"].get<std::string>(),
                                      fx["vector_b"]["minus"].get<std::string>()),
                   2, 4.0, 1, std::nullopt});
  std::vector<std::string> prompts;
  for (const auto& e : fx["entries"]) prompts.push_back(e["prompt"].get<std::string>());
  const auto report = kl_shift(toy_model(), toy_vocab(), prompts, love_hate(), b, 2);
  ASSERT_EQ(report.prompts.size(), prompts.size());
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const auto ea = fx["entries"][i]["kl_a"].get<double>();
    const auto eb = fx["entries"][i]["kl_b"].get<double>();
    EXPECT_NEAR(report.prompts[i].kl_a, ea, 1e-3 * ea + 1e-6);
    EXPECT_NEAR(report.prompts[i].kl_b, eb, 1e-3 * eb + 1e-6);
  }
  EXPECT_DOUBLE_EQ(report.median_a, (report.prompts[0].kl_a + report.prompts[1].kl_a) / 2);
  auto other_layer = b;
  other_layer.layer = 1;
  EXPECT_THROW(kl_shift(toy_model(), toy_vocab(), prompts, love_hate(), other_layer, 1), ValidationError);
}

TEST(PAtK, TargetRankBreaksTiesById) {
  const std::vector<float> logits{1.0f, 3.0f, 3.0f, 0.5f};
  EXPECT_EQ(target_rank(logits, 1), 0u);
  EXPECT_EQ(target_rank(logits, 2), 1u);
  EXPECT_EQ(target_rank(logits, 0), 2u);
  EXPECT_EQ(target_rank(logits, 3), 3u);
}

TEST(PAtK, ZeroVectorMatchesBaseline) {
  std::vector<KnowledgeItem> items;
  for (const char* p : {"I went up to my friend and said", "The weather today is", "The wedding was"}) {
    items.push_back({p, "the", *toy_vocab().find_bytes(" the")});
  }
  const std::vector<int> ks{1, 10, 100, 657};
  const auto zero = love_hate(0.0);
  const auto report = p_at_k(toy_model(), toy_vocab(), items, &zero, ks, 2);
  EXPECT_EQ(report.items, 3u);
  EXPECT_EQ(report.baseline, report.steered);
  EXPECT_EQ(report.baseline.back(), 1.0);
  for (std::size_t i = 1; i < ks.size(); ++i) EXPECT_GE(report.baseline[i], report.baseline[i - 1]);
}

TEST(Premium, StubMatchesAnalyticPremium) {
  ModelConfig cfg = toy_model().config;
  service::StubBackend stub(cfg, std::chrono::microseconds(300), std::chrono::microseconds(30));
  const auto contrast = pad_contrast_pair(toy_vocab(), ContrastPair::make("Love", "Hate"));
  PremiumOptions opt;
  opt.reps = 9;
  opt.seeds = 2;
  opt.batch = 8;
  opt.seq_len = 16;
  const auto m = measure_premium(stub, contrast, opt);
  const double expected = stub.expected_premium(opt.batch);
  EXPECT_NEAR(m.median_premium, expected, 0.05 * expected);
  EXPECT_EQ(m.baseline_seconds.size(), 2u);
  EXPECT_FALSE(m.low_resolution);

  opt.null_control = true;
  const auto null = measure_premium(stub, contrast, opt);
  EXPECT_NEAR(null.median_premium, 0.0, 0.05);
}

TEST(Premium, RealModelRuns) {
  ModelBackend backend("toy", toy_model());
  const auto contrast = pad_contrast_pair(toy_vocab(), ContrastPair::make("Love", "Hate"));
  PremiumOptions opt;
  opt.reps = 2;
  opt.seeds = 1;
  opt.batch = 2;
  opt.seq_len = 8;
  opt.layer = 99;
  const auto m = measure_premium(backend, contrast, opt);
  EXPECT_GT(m.mean_baseline, 0.0);
  EXPECT_TRUE(std::isfinite(m.premium));
  opt.seq_len = 2;
  EXPECT_THROW(measure_premium(backend, contrast, opt), ValidationError);
}

}  // namespace
}  // namespace actadd
