#include "actadd/eval.hpp"

#include <algorithm>
#include <boost/math/distributions/normal.hpp>
#include <cmath>
#include <map>
#include <numeric>

#include "actadd/error.hpp"
#include "actadd/log.hpp"
#include "actadd/parallel.hpp"
#include "actadd/rng.hpp"

namespace actadd {

ScoringPlan ScoringPlan::for_vector(const BpeVocab& vocab, const SteeringVector& vec) {
  const auto space = vocab.find_bytes(" ");
  if (!space) throw Error("vocabulary has no single-space token for padding");
  const auto [first, last] = vec.modified_range();
  (void)first;
  return for_prefix(std::vector<TokenId>(last > 0 ? last - 1 : 0, *space));
}

ScoringPlan ScoringPlan::for_prefix(std::vector<TokenId> prefix_tokens) {
  ScoringPlan plan;
  plan.masked_rows = prefix_tokens.size() + 1;
  plan.prefix = std::move(prefix_tokens);
  return plan;
}

SentenceScores score_sentence(const Model& model, const BpeVocab& vocab, std::string_view sentence,
                              const ScoringPlan& plan, const SteeringVector* steering) {
  std::vector<TokenId> ids;
  ids.push_back(vocab.eot_id());
  ids.insert(ids.end(), plan.prefix.begin(), plan.prefix.end());
  const auto body = encode(vocab, sentence, false);
  ids.insert(ids.end(), body.ids.begin(), body.ids.end());
  const auto limit = static_cast<std::size_t>(model.config.max_positions);
  if (ids.size() > limit) {
    warn("sentence of " + std::to_string(ids.size()) + " tokens truncated to max_positions " + std::to_string(limit));
    ids.resize(limit);
  }

  const HookSet hooks = steering ? steering->hooks(ids.size()) : HookSet{};
  const auto result = forward(model, ids, hooks);
  const auto lps = logprobs(result, ids);

  SentenceScores scores;
  for (std::size_t k = 1; k < ids.size(); ++k) {
    if (k - 1 < plan.masked_rows) continue;
    scores.targets.push_back(ids[k]);
    scores.logprobs.push_back(lps[k - 1]);
  }
  return scores;
}

namespace {

std::optional<double> mean_logprob(const Model& model, const BpeVocab& vocab, const Document& doc,
                                   const SteeringVector* steering, const ScoringPlan& plan) {
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& sentence : doc.sentences) {
    const auto s = score_sentence(model, vocab, sentence, plan, steering);
    for (double lp : s.logprobs) total += lp;
    count += s.logprobs.size();
  }
  if (count == 0) return std::nullopt;
  return total / static_cast<double>(count);
}

PerplexityReport compare_conditions(const Model& model, const BpeVocab& vocab, const std::vector<Document>& docs,
                                    const std::vector<FrequencyBin>& bins, const ScoringPlan& base_plan,
                                    const ScoringPlan& cond_plan, const SteeringVector* steering,
                                    std::string condition, std::size_t workers) {
  std::vector<std::optional<DocumentDelta>> per_doc(docs.size());
  parallel_for(docs.size(), workers, [&](std::size_t i) {
    const auto& doc = docs[i];
    const auto base = mean_logprob(model, vocab, doc, nullptr, base_plan);
    if (!base) return;
    const auto cond = mean_logprob(model, vocab, doc, steering, cond_plan);
    if (!cond) return;
    per_doc[i] = DocumentDelta{doc.id, doc.topic_freq, *base, *cond};
  });

  PerplexityReport report;
  report.condition = std::move(condition);
  std::map<std::string, const DocumentDelta*> by_id;
  for (std::size_t i = 0; i < docs.size(); ++i) {
    if (!per_doc[i]) {
      warn("document " + docs[i].id + " has no scorable tokens; skipped");
      continue;
    }
    report.documents.push_back(*per_doc[i]);
  }
  for (const auto& d : report.documents) by_id.emplace(d.id, &d);

  for (const auto& bin : bins) {
    BinResult r;
    r.lo = bin.lo;
    r.hi = bin.hi;
    r.excluded = bin.excluded();
    double sum = 0.0;
    for (const auto& id : bin.documents) {
      auto it = by_id.find(id);
      if (it == by_id.end()) continue;
      sum += it->second->condition - it->second->baseline;
      ++r.documents;
    }
    r.mean_delta = r.documents ? sum / static_cast<double>(r.documents) : 0.0;
    r.ratio = std::exp(-r.mean_delta);
    report.bins.push_back(r);
  }

  for (const char* name : {"related", "unrelated"}) {
    GroupResult g;
    g.name = name;
    const bool related = g.name == "related";
    double sum = 0.0;
    for (const auto& d : report.documents) {
      if ((d.topic_freq > 0.0) != related) continue;
      sum += d.condition - d.baseline;
      ++g.documents;
    }
    g.mean_delta = g.documents ? sum / static_cast<double>(g.documents) : 0.0;
    g.ratio = std::exp(-g.mean_delta);
    report.groups.push_back(g);
  }
  return report;
}

}  // namespace

double doc_mean_logprob(const Model& model, const BpeVocab& vocab, const Document& doc,
                        const SteeringVector* steering, const ScoringPlan& plan) {
  if (doc.sentences.empty()) throw ValidationError("document", "document " + doc.id + " is empty");
  auto mean = mean_logprob(model, vocab, doc, steering, plan);
  if (!mean) throw ValidationError("document", "document " + doc.id + " has no scorable tokens");
  return *mean;
}

PerplexityReport perplexity_ratio(const Model& model, const BpeVocab& vocab, const std::vector<Document>& docs,
                                  const std::vector<FrequencyBin>& bins, const SteeringVector* steering,
                                  std::size_t workers) {
  if (bins.empty()) throw ValidationError("bins", "no frequency bins");
  const ScoringPlan plan = steering ? ScoringPlan::for_vector(vocab, *steering) : ScoringPlan::for_prefix({});
  return compare_conditions(model, vocab, docs, bins, plan, plan, steering, steering ? "actadd" : "none", workers);
}

PerplexityReport prompting_baseline(const Model& model, const BpeVocab& vocab, const std::vector<Document>& docs,
                                    const std::vector<FrequencyBin>& bins, std::string_view prefix,
                                    std::size_t workers) {
  if (bins.empty()) throw ValidationError("bins", "no frequency bins");
  const auto tokens = encode(vocab, prefix, false);
  return compare_conditions(model, vocab, docs, bins, ScoringPlan::for_prefix({}), ScoringPlan::for_prefix(tokens.ids),
                            nullptr, "prompting-baseline", workers);
}

TokenShiftReport token_shift(const Model& model, const BpeVocab& vocab, const std::vector<Document>& docs,
                             const SteeringVector& steering, std::size_t min_instances, std::size_t workers) {
  if (docs.empty()) throw ValidationError("docs", "empty document sample");
  const auto plan = ScoringPlan::for_vector(vocab, steering);

  struct Partial {
    std::vector<TokenId> ids;
    std::vector<double> deltas;
  };
  std::vector<Partial> partials(docs.size());
  parallel_for(docs.size(), workers, [&](std::size_t i) {
    for (const auto& sentence : docs[i].sentences) {
      const auto base = score_sentence(model, vocab, sentence, plan, nullptr);
      const auto steered = score_sentence(model, vocab, sentence, plan, &steering);
      for (std::size_t k = 0; k < base.targets.size(); ++k) {
        partials[i].ids.push_back(base.targets[k]);
        partials[i].deltas.push_back(steered.logprobs[k] - base.logprobs[k]);
      }
    }
  });

  std::map<TokenId, std::pair<std::size_t, double>> acc;
  TokenShiftReport report;
  report.min_instances = min_instances;
  for (const auto& p : partials) {
    for (std::size_t k = 0; k < p.ids.size(); ++k) {
      auto& [count, sum] = acc[p.ids[k]];
      ++count;
      sum += p.deltas[k];
      ++report.total_tokens;
    }
  }
  for (const auto& [id, cs] : acc) {
    if (cs.first <= min_instances) continue;
    report.tokens.push_back({id, vocab.token_bytes(id), cs.first, cs.second / static_cast<double>(cs.first)});
  }
  std::sort(report.tokens.begin(), report.tokens.end(), [](const TokenShift& a, const TokenShift& b) {
    return a.mean_delta != b.mean_delta ? a.mean_delta > b.mean_delta : a.id < b.id;
  });
  const std::size_t k = std::min<std::size_t>(10, report.tokens.size());
  report.top.assign(report.tokens.begin(), report.tokens.begin() + static_cast<std::ptrdiff_t>(k));
  report.bottom.assign(report.tokens.rbegin(), report.tokens.rbegin() + static_cast<std::ptrdiff_t>(k));

  const boost::math::normal_distribution<double> standard;
  const std::size_t n = report.tokens.size();
  for (std::size_t i = 0; i < n; ++i) {
    const double q = boost::math::quantile(standard, (static_cast<double>(i) + 0.5) / static_cast<double>(n));
    report.qq.emplace_back(q, report.tokens[n - 1 - i].mean_delta);
  }
  return report;
}

GenerationScore score_completions(const std::vector<Completion>& completions,
                                  const std::vector<std::string>& keywords) {
  GenerationScore score;
  score.n = completions.size();
  std::size_t total = 0;
  std::size_t hit = 0;
  for (const auto& c : completions) {
    const auto count = count_keywords(c.text, keywords);
    score.counts.push_back(count);
    total += count;
    if (count > 0) ++hit;
  }
  if (score.n > 0) {
    score.mean_count = static_cast<double>(total) / static_cast<double>(score.n);
    score.fraction = static_cast<double>(hit) / static_cast<double>(score.n);
  }
  return score;
}

SweepReport generation_sweep(const Model& model, const BpeVocab& vocab, std::string_view prompt,
                             const ContrastPair& pair, double coefficient, const std::vector<int>& layers, int n,
                             const GenerationParams& params, const std::vector<std::string>& keywords,
                             std::size_t workers) {
  if (n < 1) throw ValidationError("n", "at least one completion per setting is required");
  SweepReport report;
  report.baseline = score_completions(generate_many(model, vocab, prompt, params, nullptr, n, workers), keywords);
  for (int layer : layers) {
    const SteeringSpec spec{pair, layer, coefficient, 1, std::nullopt};
    const auto vec = build_steering_vector(model, vocab, spec);
    auto score = score_completions(generate_many(model, vocab, prompt, params, &vec, n, workers), keywords);
    score.layer = layer;
    score.coefficient = coefficient;
    report.steered.push_back(std::move(score));
  }
  return report;
}

SweepReport partial_sweep(const Model& model, const BpeVocab& vocab, std::string_view prompt,
                          const SteeringSpec& spec, const std::vector<double>& fractions, int n,
                          const GenerationParams& params, const std::vector<std::string>& keywords,
                          std::size_t workers) {
  if (n < 1) throw ValidationError("n", "at least one completion per setting is required");
  SteeringSpec full = spec;
  full.dim_cutoff.reset();
  const auto vec = build_steering_vector(model, vocab, full);
  SweepReport report;
  report.baseline = score_completions(generate_many(model, vocab, prompt, params, nullptr, n, workers), keywords);
  for (double f : fractions) {
    if (!(f >= 0.0 && f <= 1.0)) throw ValidationError("fractions", "fractions must lie in [0, 1]");
    const int dims = static_cast<int>(std::lround(f * model.config.d_model));
    const auto partial = truncate_dimensions(vec, dims);
    auto score = score_completions(generate_many(model, vocab, prompt, params, &partial, n, workers), keywords);
    score.layer = spec.layer;
    score.coefficient = spec.coefficient;
    score.dim_cutoff = dims;
    report.steered.push_back(std::move(score));
  }
  return report;
}

namespace {

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw ValidationError("spearman", "need two equal-length samples of size >= 2");
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return std::nan("");
  return sxy / std::sqrt(sxx * syy);
}

std::size_t target_rank(std::span<const float> logits, TokenId target) {
  const float t = logits[static_cast<std::size_t>(target)];
  std::size_t ahead = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (logits[i] > t || (logits[i] == t && static_cast<TokenId>(i) < target)) ++ahead;
  }
  return ahead;
}

namespace {

Matrix last_logits(const Model& model, std::span<const TokenId> ids, const SteeringVector* steering) {
  const HookSet hooks = steering ? steering->hooks(ids.size()) : HookSet{};
  InferenceState state(model);
  return state.extend(ids, hooks, true).logits;
}

}  // namespace

PAtKReport p_at_k(const Model& model, const BpeVocab& vocab, const std::vector<KnowledgeItem>& items,
                  const SteeringVector* steering, const std::vector<int>& ks, std::size_t workers) {
  for (int k : ks) {
    if (k < 1) throw ValidationError("ks", "K must be >= 1");
  }
  std::vector<std::size_t> base_rank(items.size());
  std::vector<std::size_t> steer_rank(items.size());
  parallel_for(items.size(), workers, [&](std::size_t i) {
    const auto ids = encode(vocab, items[i].prompt, true);
    base_rank[i] = target_rank(last_logits(model, ids.ids, nullptr).row(0), items[i].target_id);
    steer_rank[i] = steering ? target_rank(last_logits(model, ids.ids, steering).row(0), items[i].target_id)
                             : base_rank[i];
  });
  PAtKReport report;
  report.ks = ks;
  report.items = items.size();
  for (int k : ks) {
    const auto kk = static_cast<std::size_t>(k);
    const auto b = std::count_if(base_rank.begin(), base_rank.end(), [&](std::size_t r) { return r < kk; });
    const auto s = std::count_if(steer_rank.begin(), steer_rank.end(), [&](std::size_t r) { return r < kk; });
    const double n = items.empty() ? 1.0 : static_cast<double>(items.size());
    report.baseline.push_back(static_cast<double>(b) / n);
    report.steered.push_back(static_cast<double>(s) / n);
  }
  return report;
}

double kl_divergence(std::span<const float> p_logits, std::span<const float> q_logits) {
  const auto lp = log_softmax(p_logits);
  const auto lq = log_softmax(q_logits);
  double kl = 0.0;
  for (std::size_t i = 0; i < lp.size(); ++i) {
    if (lp[i] == lq[i]) continue;
    kl += std::exp(lp[i]) * (lp[i] - lq[i]);
  }
  return std::max(0.0, kl);
}

double median(std::vector<double> values) {
  if (values.empty()) return std::nan("");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

KlReport kl_shift(const Model& model, const BpeVocab& vocab, const std::vector<std::string>& prompts,
                  const SteeringVector& vec_a, const SteeringVector& vec_b, std::size_t workers) {
  if (vec_a.delta.cols != vec_b.delta.cols || vec_a.layer != vec_b.layer) {
    throw ValidationError("vectors", "KL comparison needs two vectors at the same layer");
  }
  KlReport report;
  report.prompts.resize(prompts.size());
  parallel_for(prompts.size(), workers, [&](std::size_t i) {
    const auto ids = encode(vocab, prompts[i], true);
    const auto clean = last_logits(model, ids.ids, nullptr);
    const auto a = last_logits(model, ids.ids, &vec_a);
    const auto b = last_logits(model, ids.ids, &vec_b);
    report.prompts[i] = {prompts[i], kl_divergence(clean.row(0), a.row(0)), kl_divergence(clean.row(0), b.row(0))};
  });
  std::vector<double> as, bs;
  for (const auto& e : report.prompts) {
    as.push_back(e.kl_a);
    bs.push_back(e.kl_b);
  }
  report.median_a = median(as);
  report.median_b = median(bs);
  return report;
}

PremiumMeasurement measure_premium(ForwardBackend& backend, const std::pair<TokenSequence, TokenSequence>& contrast,
                                   const PremiumOptions& options) {
  using Clock = std::chrono::steady_clock;
  if (options.reps < 1 || options.seeds < 1 || options.batch < 1 || options.seq_len < 1 || options.warmup < 0) {
    throw ValidationError("premium", "reps, seeds, batch and seq_len must be positive");
  }
  if (options.warmup < 2) warn("premium: fewer than 2 warmup passes");
  const auto& cfg = backend.config();
  const int layer = std::clamp(options.layer, 0, cfg.n_layers - 1);
  if (contrast.first.size() != contrast.second.size()) {
    throw ValidationError("contrast", "contrast sequences must be padded to equal length");
  }
  if (contrast.first.size() > static_cast<std::size_t>(options.seq_len)) {
    throw ValidationError("seq_len", "batch sequences are shorter than the contrast pair");
  }

  PremiumMeasurement m;
  m.model = backend.name();
  std::vector<double> base_reps, actadd_reps;

  for (int seed = 0; seed < options.seeds; ++seed) {
    Xoshiro256pp rng(static_cast<std::uint64_t>(seed));
    std::vector<std::vector<TokenId>> batch(static_cast<std::size_t>(options.batch));
    for (auto& seq : batch) {
      seq.resize(static_cast<std::size_t>(options.seq_len));
      for (auto& t : seq) t = static_cast<TokenId>(rng.next() % static_cast<std::uint64_t>(cfg.vocab_size));
    }

    auto baseline_pass = [&] {
      for (const auto& seq : batch) backend.run(seq, {});
    };
    auto actadd_pass = [&] {
      if (options.null_control) {
        baseline_pass();
        return;
      }
      HookSet capture;
      capture.capture_layers = {layer};
      const auto plus = backend.run(contrast.first.ids, capture);
      const auto minus = backend.run(contrast.second.ids, capture);
      const auto& hp = plus.captured.at(0).activations;
      const auto& hm = minus.captured.at(0).activations;
      HookSet inject;
      Injection inj;
      inj.layer = layer;
      inj.position = 1;
      inj.delta = Matrix(hp.rows - 1, hp.cols);
      for (std::size_t i = 0; i < inj.delta.data.size(); ++i) {
        inj.delta.data[i] = hp.data[i + hp.cols] - hm.data[i + hm.cols];
      }
      inject.injections.push_back(std::move(inj));
      for (const auto& seq : batch) backend.run(seq, inject);
    };
    auto time_reps = [&](auto&& pass, std::vector<double>& all) {
      for (int w = 0; w < options.warmup; ++w) pass();
      double total = 0.0;
      for (int r = 0; r < options.reps; ++r) {
        const auto t0 = Clock::now();
        pass();
        const double s = std::chrono::duration<double>(Clock::now() - t0).count();
        all.push_back(s);
        total += s;
      }
      return total / options.reps;
    };
    m.baseline_seconds.push_back(time_reps(baseline_pass, base_reps));
    m.actadd_seconds.push_back(time_reps(actadd_pass, actadd_reps));
  }

  m.mean_baseline = std::accumulate(m.baseline_seconds.begin(), m.baseline_seconds.end(), 0.0) / options.seeds;
  m.mean_actadd = std::accumulate(m.actadd_seconds.begin(), m.actadd_seconds.end(), 0.0) / options.seeds;
  m.median_baseline = median(base_reps);
  m.median_actadd = median(actadd_reps);
  m.premium = m.mean_actadd / m.mean_baseline - 1.0;
  m.median_premium = m.median_actadd / m.median_baseline - 1.0;
  m.low_resolution = m.mean_baseline < 1e-3;
  if (m.low_resolution) warn("premium: mean pass time under 1 ms; timer resolution may dominate");
  return m;
}

}  // namespace actadd
