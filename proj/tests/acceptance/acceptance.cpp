#include <CLI11.hpp>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <iomanip>
#include <iostream>
#include <random>
#include <sstream>

#include "actadd/eval.hpp"
#include "actadd/model.hpp"
#include "actadd/steering.hpp"
#include "actadd/tokenizer.hpp"
#include "engine.hpp"
#include "stub_backend.hpp"
#include "support.hpp"

namespace {

using namespace actadd;
using actadd::service::Engine;
using actadd::service::json;
namespace t = actadd::testing;

// Tolerances and thresholds.
constexpr double kLogitTol = 1e-5;
constexpr double kLayerNormTol = 1e-6;
constexpr double kResumeTol = 1e-6;
constexpr int kResumeSpecs = 10;
constexpr int kRoundTrips = 1000;
constexpr double kParityTol = 1e-3;
constexpr int kCompletions = 100;
constexpr double kSteeringMargin = 0.10;
constexpr double kUnrelatedLo = 0.9;
constexpr double kUnrelatedHi = 1.1;
constexpr double kPkTol = 0.05;
constexpr double kSpearmanMin = 0.5;
constexpr double kStubPremiumRelTol = 0.05;
constexpr double kRealPremiumMax = 0.5;

enum class Status { pass, fail, skip };

struct Outcome {
  Status status;
  std::string detail;
};

struct Criterion {
  std::string id;
  std::string title;
  double budget_seconds;
  std::function<Outcome()> run;
};

std::string fmt(double v) {
  std::ostringstream s;
  s << std::setprecision(4) << v;
  return s.str();
}

Outcome verdict(bool ok, const std::string& detail) { return {ok ? Status::pass : Status::fail, detail}; }

// ---- GPT-2-small ------------------------------------------------------------

const char* gpt2_path() {
  const char* p = std::getenv("ACTADD_GPT2_SMALL");
  return p && *p ? p : nullptr;
}

const std::string kNoWeights = "GPT-2-small weights not available; set ACTADD_GPT2_SMALL to a converted AAWF file";

Engine& gpt2_engine() {
  static std::unique_ptr<Engine> engine = [] {
    service::ServiceConfig cfg;
    cfg.model_path = gpt2_path();
    cfg.vocab_path = t::gpt2_dir() / "vocab.json";
    cfg.merges_path = t::gpt2_dir() / "merges.txt";
    cfg.max_completions = kCompletions;
    return Engine::load(cfg);
  }();
  return *engine;
}

// ---- criteria ----------------------------------------------------------------

Outcome oracle_equivalence() {
  const auto fx = t::load_json(t::oracle_dir() / "tiny_expected.json");
  const auto& model = t::tiny_model();
  const auto tokens = fx["tokens"].get<std::vector<TokenId>>();
  const double logit_err = t::max_abs_diff(forward(model, tokens).logits, fx["logits"]);

  const auto in = t::to_matrix(fx["layer_norm"]["input"]);
  double ln_err = 0.0;
  for (std::size_t r = 0; r < in.rows; ++r) {
    std::vector<float> out(in.cols);
    layer_norm(in.row(r), out, model.weights.blocks[0].ln1, model.config.layernorm_epsilon);
    for (std::size_t c = 0; c < in.cols; ++c) {
      ln_err = std::max(ln_err, std::abs(out[c] - fx["layer_norm"]["output"][r][c].get<double>()));
    }
  }
  return verdict(logit_err <= kLogitTol && ln_err <= kLayerNormTol,
                 "max |logit err| " + fmt(logit_err) + " (tol " + fmt(kLogitTol) + "), max |layernorm err| " +
                     fmt(ln_err) + " (tol " + fmt(kLayerNormTol) + ")");
}

json cli_json(const std::string& args) {
  const auto r = t::run_command(t::toy_cli() + " " + args + " 2>/dev/null");
  if (r.exit_code != 0) throw Error("CLI exited with " + std::to_string(r.exit_code) + ": " + args);
  return json::parse(r.out);
}

Outcome identity_suite() {
  const std::string common =
      "--prompt 'I went up to my friend and said' -n 4 --seed 5 --max-new-tokens 20 --temperature 1 --top-p 1";
  const auto plain = cli_json("generate " + common)["completions"];
  struct Case {
    std::string name;
    std::string flags;
  };
  const std::vector<Case> zero_cases = {
      {"c=0", "--plus Love --minus Hate --layer 2 --coef 0"},
      {"p+==p-", "--plus Love --minus Love --layer 2 --coef 10"},
      {"zero injection", "--plus Love --minus Hate --layer 2 --coef 4 --dim-cutoff 0"},
  };
  std::vector<std::string> failures;
  for (const auto& c : zero_cases) {
    const auto r = cli_json("steer " + common + " " + c.flags);
    if (r["steered"] != plain || r["baseline"] != plain || !r["identical"].get<bool>()) failures.push_back(c.name);
  }
  // Keeping every dimension is the untruncated vector.
  const auto full = cli_json("steer " + common + " --plus Love --minus Hate --layer 2 --coef 4");
  const auto kept = cli_json("steer " + common + " --plus Love --minus Hate --layer 2 --coef 4 --dim-cutoff 32");
  if (kept["steered"] != full["steered"]) failures.push_back("dim_cutoff=d_model");
  if (full["identical"].get<bool>()) failures.push_back("control vector had no effect");

  // The same identities on raw logits.
  const auto& model = t::toy_model();
  const auto& vocab = t::toy_vocab();
  const auto prompt = encode(vocab, "I went up to my friend and said", true);
  const auto base = forward(model, prompt.ids).logits;
  auto logits_with = [&](const SteeringSpec& spec) {
    return forward(model, prompt.ids, build_steering_vector(model, vocab, spec).hooks(prompt.size())).logits;
  };
  const auto love = ContrastPair::make("Love", "Hate");
  if (logits_with({love, 2, 0.0, 1, std::nullopt}) != base) failures.push_back("logits c=0");
  if (logits_with({ContrastPair::make("Love", "Love"), 2, 10.0, 1, std::nullopt}) != base) {
    failures.push_back("logits p+==p-");
  }
  if (logits_with({love, 2, 4.0, 1, 0}) != base) failures.push_back("logits zero injection");
  if (logits_with({love, 2, 4.0, 1, 32}) != logits_with({love, 2, 4.0, 1, std::nullopt})) {
    failures.push_back("logits dim_cutoff=d_model");
  }

  std::string detail = failures.empty() ? "all identities bit-exact through CLI JSON and logits" : "failed:";
  for (const auto& f : failures) detail += " [" + f + "]";
  return verdict(failures.empty(), detail);
}

Outcome resume_equivalence() {
  const auto& model = t::tiny_model();
  const auto tokens = t::load_json(t::oracle_dir() / "tiny_expected.json")["tokens"].get<std::vector<TokenId>>();
  std::mt19937 rng(20240);
  double worst = 0.0;
  for (int trial = 0; trial < kResumeSpecs; ++trial) {
    const int layer = std::uniform_int_distribution<int>(0, model.config.n_layers - 1)(rng);
    const std::size_t rows = std::uniform_int_distribution<std::size_t>(1, 4)(rng);
    const std::size_t pos = std::uniform_int_distribution<std::size_t>(1, tokens.size() - rows)(rng);
    const float c = std::uniform_real_distribution<float>(-10.0f, 10.0f)(rng);
    Matrix delta(rows, static_cast<std::size_t>(model.config.d_model));
    std::normal_distribution<float> n(0.0f, 1.0f);
    for (auto& x : delta.data) x = c * n(rng);

    HookSet inject;
    inject.injections.push_back({layer, delta, pos});
    const auto direct = forward(model, tokens, inject).logits;

    HookSet capture;
    capture.capture_layers = {layer};
    auto stream = forward(model, tokens, capture).captured.front().activations;
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t k = 0; k < delta.cols; ++k) stream(pos + r, k) += delta(r, k);
    }
    const auto resumed = resume_forward(model, layer, stream);
    for (std::size_t i = 0; i < resumed.data.size(); ++i) {
      worst = std::max(worst, static_cast<double>(std::abs(resumed.data[i] - direct.data[i])));
    }
  }
  return verdict(worst <= kResumeTol, std::to_string(kResumeSpecs) + " random specs, max |diff| " + fmt(worst) +
                                          " (tol " + fmt(kResumeTol) + ")");
}

Outcome tokenizer_suite() {
  const auto& vocab = t::gpt2_vocab();
  std::mt19937 rng(7);
  int round_trip_failures = 0;
  for (int i = 0; i < kRoundTrips; ++i) {
    const auto text = t::random_utf8(rng, 60);
    if (decode(vocab, encode(vocab, text, false)) != text) ++round_trip_failures;
  }
  const auto goldens = t::load_json(t::oracle_dir() / "tokenizer_goldens.json");
  int golden_failures = 0;
  for (const auto& g : goldens) {
    if (encode(vocab, g["text"].get<std::string>(), false).ids != g["ids"].get<std::vector<TokenId>>()) {
      ++golden_failures;
    }
  }
  const auto w = encode(vocab, "I like weddings", false);
  std::vector<std::string> pieces;
  for (auto id : w.ids) pieces.push_back(vocab.token_bytes(id));
  const bool weddings_ok = pieces == std::vector<std::string>{"I", " like", " weddings"};
  return verdict(round_trip_failures == 0 && golden_failures == 0 && weddings_ok && goldens.size() == 20,
                 std::to_string(kRoundTrips - round_trip_failures) + "/" + std::to_string(kRoundTrips) +
                     " round trips, " + std::to_string(goldens.size() - golden_failures) + "/" +
                     std::to_string(goldens.size()) + " goldens, 'I like weddings' -> " +
                     (weddings_ok ? "[I| like| weddings]" : "wrong split"));
}

Outcome gpt2_parity() {
  if (!gpt2_path()) return {Status::skip, kNoWeights};
  const auto golden_path = t::data_dir() / "gpt2_small_logits.json";
  if (!std::filesystem::exists(golden_path)) {
    return {Status::skip, "golden logits " + golden_path.string() + " missing; export with gpt2_to_aawf.py --golden"};
  }
  const auto golden = t::load_json(golden_path);
  const auto& engine = gpt2_engine();
  double worst = 0.0;
  std::size_t prompts = 0;
  for (const auto& p : golden["prompts"]) {
    const auto ids = encode(engine.vocab(), p["text"].get<std::string>(), true).ids;
    if (ids != p["tokens"].get<std::vector<TokenId>>()) {
      return {Status::fail, "tokenization of '" + p["text"].get<std::string>() + "' differs from the reference"};
    }
    worst = std::max(worst, t::max_abs_diff(forward(engine.model(), ids).logits, p["logits"]));
    ++prompts;
  }
  return verdict(prompts == 5 && worst <= kParityTol, std::to_string(prompts) + " prompts, max |logit err| " +
                                                          fmt(worst) + " (tol " + fmt(kParityTol) + ")");
}

Outcome steering_effect() {
  if (!gpt2_path()) return {Status::skip, kNoWeights};
  auto& engine = gpt2_engine();
  std::vector<int> layers(static_cast<std::size_t>(engine.model().config.n_layers));
  std::iota(layers.begin(), layers.end(), 0);
  const auto r = engine.sweep_layers({{"layers", layers}, {"n", kCompletions}, {"seed", 0}});
  const int best = r["best_layer"].get<int>();
  double best_fraction = 0.0;
  for (const auto& s : r["steered"]) {
    if (s["layer"] == best) best_fraction = s["fraction"].get<double>();
  }
  const double base = r["baseline"]["fraction"].get<double>();
  return verdict(best_fraction >= base + kSteeringMargin,
                 "best layer " + std::to_string(best) + ": steered fraction " + fmt(best_fraction) +
                     " vs baseline " + fmt(base) + " (need +" + fmt(kSteeringMargin) + ")");
}

double group_ratio(const json& report, const std::string& name) {
  for (const auto& g : report["groups"]) {
    if (g["name"] == name) return g["ratio"].get<double>();
  }
  throw Error("report lacks group " + name);
}

Outcome perplexity_direction() {
  if (!gpt2_path()) return {Status::skip, kNoWeights};
  auto& engine = gpt2_engine();
  const json req = {{"corpus", (t::data_dir() / "corpus.jsonl").string()}};
  const auto actadd = engine.eval_perplexity(req);
  const auto prompting = engine.eval_prompting(req);
  const double related = group_ratio(actadd, "related");
  const double unrelated = group_ratio(actadd, "unrelated");
  return verdict(related < 1.0 && unrelated >= kUnrelatedLo && unrelated <= kUnrelatedHi,
                 "ActAdd related " + fmt(related) + ", unrelated " + fmt(unrelated) + "; prompting related " +
                     fmt(group_ratio(prompting, "related")) + ", unrelated " +
                     fmt(group_ratio(prompting, "unrelated")));
}

Outcome control_comparison() {
  if (!gpt2_path()) return {Status::skip, kNoWeights};
  auto& engine = gpt2_engine();
  const auto r = engine.eval_kl({{"prompts", (t::data_dir() / "kl_prompts.json").string()}});
  const double a = r["median_a"].get<double>();
  const double b = r["median_b"].get<double>();
  return verdict(r["prompts"].size() == 20 && a <= b, std::to_string(r["prompts"].size()) +
                                                          " prompts, median KL topic " + fmt(a) + " vs random " +
                                                          fmt(b));
}

Outcome knowledge_preservation() {
  if (!gpt2_path()) return {Status::skip, kNoWeights};
  auto& engine = gpt2_engine();
  const auto r = engine.eval_pk({{"knowledge", (t::data_dir() / "knowledge.jsonl").string()}, {"k", {1, 5, 10, 50}}});
  double worst = 0.0;
  std::string detail;
  for (std::size_t i = 0; i < r["k"].size(); ++i) {
    const double d = r["steered"][i].get<double>() - r["baseline"][i].get<double>();
    worst = std::max(worst, std::abs(d));
    detail += "P@" + r["k"][i].dump() + " " + fmt(r["baseline"][i].get<double>()) + "->" +
              fmt(r["steered"][i].get<double>()) + " ";
  }
  return verdict(worst <= kPkTol, detail + "(" + r["items"].dump() + " items, max |dP| " + fmt(worst) + ")");
}

Outcome partial_trend() {
  if (!gpt2_path()) return {Status::skip, kNoWeights};
  auto& engine = gpt2_engine();
  const auto r = engine.sweep_partial({{"fractions", {0.0, 0.25, 0.5, 0.75, 1.0}}, {"n", kCompletions}, {"seed", 0}});
  const double rho = r["spearman"].is_number() ? r["spearman"].get<double>() : std::nan("");

  // f = 1 must be the untruncated vector, completion for completion.
  const auto& model = engine.model();
  const auto& vocab = engine.vocab();
  const int layer = r["steered"][4]["layer"].get<int>();
  const double c = r["steered"][4]["coefficient"].get<double>();
  const SteeringSpec spec{ContrastPair::make(" weddings", " "), layer, c, 1, std::nullopt};
  const auto vec = build_steering_vector(model, vocab, spec);
  const auto kept = truncate_dimensions(vec, model.config.d_model);
  GenerationParams p = scoring_params();
  const auto a = generate_many(model, vocab, "I went up to my friend and said", p, &vec, 10, 0);
  const auto b = generate_many(model, vocab, "I went up to my friend and said", p, &kept, 10, 0);
  bool same = kept.delta == vec.delta;
  for (std::size_t i = 0; i < a.size(); ++i) same = same && a[i].generated == b[i].generated;
  return verdict(std::isfinite(rho) && rho >= kSpearmanMin && same,
                 "spearman " + fmt(rho) + " (need >= " + fmt(kSpearmanMin) + "), f=1 " +
                     (same ? "bit-equal to full ActAdd" : "DIFFERS from full ActAdd"));
}

Outcome stub_premium() {
  ModelConfig cfg = t::toy_model().config;
  service::StubBackend stub(cfg, std::chrono::microseconds(2000), std::chrono::microseconds(200));
  const auto contrast = pad_contrast_pair(t::toy_vocab(), ContrastPair::make(" weddings", " "));
  PremiumOptions opt;
  opt.reps = 9;
  opt.seeds = 3;
  opt.batch = 8;
  opt.seq_len = 16;
  const auto m = measure_premium(stub, contrast, opt);
  const double expected = stub.expected_premium(opt.batch);
  const double rel = std::abs(m.median_premium - expected) / expected;
  return verdict(rel <= kStubPremiumRelTol, "stub premium " + fmt(m.median_premium) + " vs injected overhead " +
                                                fmt(expected) + " (rel err " + fmt(rel) + ", tol " +
                                                fmt(kStubPremiumRelTol) + ")");
}

Outcome real_premium() {
  if (!gpt2_path()) return {Status::skip, kNoWeights};
  auto& engine = gpt2_engine();
  const auto r = engine.bench_premium({{"batch", 32}, {"seq_len", 64}, {"reps", 3}, {"seeds", 2}, {"warmup", 1}});
  const double premium = r["models"][0]["premium"].get<double>();
  return verdict(premium < kRealPremiumMax,
                 "GPT-2-small premium " + fmt(premium) + " at batch 32x64 (need < " + fmt(kRealPremiumMax) + ")");
}

const char* status_name(Status s) {
  switch (s) {
    case Status::pass: return "PASS";
    case Status::fail: return "FAIL";
    case Status::skip: return "SKIP";
  }
  return "?";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ActAdd acceptance criteria"};
  std::string only;
  app.add_option("--criterion", only, "Run one criterion (1..10, 11a, 11b)");
  CLI11_PARSE(app, argc, argv);

  const std::vector<Criterion> criteria = {
      {"1", "oracle equivalence", 60, oracle_equivalence},
      {"2", "identity suite", 60, identity_suite},
      {"3", "resume equivalence", 60, resume_equivalence},
      {"4", "tokenizer", 60, tokenizer_suite},
      {"5", "GPT-2-small logit parity", 300, gpt2_parity},
      {"6", "steering effect", 1800, steering_effect},
      {"7", "perplexity direction", 1800, perplexity_direction},
      {"8", "control comparison", 600, control_comparison},
      {"9", "knowledge preservation", 600, knowledge_preservation},
      {"10", "partial ActAdd trend", 2700, partial_trend},
      {"11a", "premium benchmark (stub)", 600, stub_premium},
      {"11b", "premium benchmark (GPT-2-small)", 600, real_premium},
  };

  bool any_fail = false;
  bool ran = false;
  Status last = Status::pass;
  for (const auto& c : criteria) {
    if (!only.empty() && c.id != only) continue;
    ran = true;
    const auto start = std::chrono::steady_clock::now();
    Outcome out;
    try {
      out = c.run();
    } catch (const std::exception& e) {
      out = {Status::fail, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (out.status == Status::pass && secs > c.budget_seconds) {
      out = {Status::fail, out.detail + "; over the " + fmt(c.budget_seconds) + " s budget"};
    }
    std::cout << "criterion " << c.id << " " << status_name(out.status) << " " << c.title << ": " << out.detail
              << " [" << std::fixed << std::setprecision(1) << secs << " s]" << std::defaultfloat << std::endl;
    any_fail = any_fail || out.status == Status::fail;
    last = out.status;
  }
  if (!ran) {
    std::cerr << "unknown criterion " << only << '\n';
    return 2;
  }
  if (any_fail) return 1;
  return !only.empty() && last == Status::skip ? 77 : 0;
}
