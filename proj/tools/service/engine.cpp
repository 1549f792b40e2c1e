#include "engine.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "actadd/corpus.hpp"
#include "actadd/log.hpp"
#include "actadd/parallel.hpp"
#include "actadd/report_json.hpp"
#include "actadd/rng.hpp"
#include "stub_backend.hpp"

namespace actadd::service {
namespace {

constexpr const char* kGenerationPrompt = "I went up to my friend and said";

std::string fnv1a_hex(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, h >>= 4) out[static_cast<std::size_t>(i)] = digits[h & 0xf];
  return out;
}

json completion_json(const Completion& c) {
  return {{"seed", c.seed}, {"text", to_valid_utf8(c.text)}, {"tokens", c.generated.ids}};
}

json completions_json(const std::vector<Completion>& cs) {
  json out = json::array();
  for (const auto& c : cs) out.push_back(completion_json(c));
  return out;
}

std::vector<std::string> read_keywords(const Fields& f) {
  if (!f.has("keywords")) return default_topic_keywords();
  const json& k = f.object("keywords");
  if (k.is_string()) return load_keywords(k.get<std::string>());
  return f.strings("keywords");
}

std::vector<Document> sample_documents(std::vector<Document> docs, std::size_t n, std::uint64_t seed) {
  if (n == 0 || n >= docs.size()) return docs;
  Xoshiro256pp rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.next() % (docs.size() - i));
    std::swap(docs[i], docs[j]);
  }
  docs.resize(n);
  return docs;
}

}  // namespace

void ServiceConfig::validate() const {
  if (max_concurrent < 1) throw ValidationError("max_concurrent", "concurrency limit must be >= 1");
  if (max_completions < 1) throw ValidationError("max_completions", "must be >= 1");
  if (port < 0 || port > 65535) throw ValidationError("port", "must lie in [0, 65535]");
  defaults.validate();
}

int default_eval_layer(const ModelConfig& config) {
  const int scaled = static_cast<int>(std::lround(16.0 * config.n_layers / 48.0));
  return std::clamp(scaled, 0, config.n_layers - 1);
}

// ---- Fields ----------------------------------------------------------------

Fields::Fields(const json& object) : obj_(object) {
  if (!obj_.is_object()) throw ValidationError("body", "request body must be a JSON object");
}

const json* Fields::find(const char* key) const {
  auto it = obj_.find(key);
  if (it == obj_.end() || it->is_null()) return nullptr;
  return &*it;
}

bool Fields::has(const char* key) const { return find(key) != nullptr; }

std::string Fields::string(const char* key) const {
  const json* v = find(key);
  if (!v) throw ValidationError(key, "required");
  if (!v->is_string()) throw ValidationError(key, "must be a string");
  return v->get<std::string>();
}

std::string Fields::string(const char* key, const std::string& fallback) const {
  return has(key) ? string(key) : fallback;
}

double Fields::number(const char* key) const {
  const json* v = find(key);
  if (!v) throw ValidationError(key, "required");
  if (!v->is_number()) throw ValidationError(key, "must be a number");
  return v->get<double>();
}

double Fields::number(const char* key, double fallback) const { return has(key) ? number(key) : fallback; }

int Fields::integer(const char* key) const {
  const json* v = find(key);
  if (!v) throw ValidationError(key, "required");
  if (!v->is_number_integer()) throw ValidationError(key, "must be an integer");
  return v->get<int>();
}

int Fields::integer(const char* key, int fallback) const { return has(key) ? integer(key) : fallback; }

std::uint64_t Fields::seed(const char* key, std::uint64_t fallback) const {
  const json* v = find(key);
  if (!v) return fallback;
  if (v->is_number_unsigned()) return v->get<std::uint64_t>();
  if (v->is_number_integer() && v->get<std::int64_t>() >= 0) return static_cast<std::uint64_t>(v->get<std::int64_t>());
  throw ValidationError(key, "must be a non-negative integer");
}

bool Fields::boolean(const char* key, bool fallback) const {
  const json* v = find(key);
  if (!v) return fallback;
  if (!v->is_boolean()) throw ValidationError(key, "must be true or false");
  return v->get<bool>();
}

std::optional<int> Fields::optional_integer(const char* key) const {
  if (!has(key)) return std::nullopt;
  return integer(key);
}

std::vector<int> Fields::integers(const char* key, std::vector<int> fallback) const {
  const json* v = find(key);
  if (!v) return fallback;
  if (!v->is_array()) throw ValidationError(key, "must be an array of integers");
  std::vector<int> out;
  for (const auto& x : *v) {
    if (!x.is_number_integer()) throw ValidationError(key, "must be an array of integers");
    out.push_back(x.get<int>());
  }
  return out;
}

std::vector<double> Fields::numbers(const char* key, std::vector<double> fallback) const {
  const json* v = find(key);
  if (!v) return fallback;
  if (!v->is_array()) throw ValidationError(key, "must be an array of numbers");
  std::vector<double> out;
  for (const auto& x : *v) {
    if (!x.is_number()) throw ValidationError(key, "must be an array of numbers");
    out.push_back(x.get<double>());
  }
  return out;
}

std::vector<std::string> Fields::strings(const char* key) const {
  const json* v = find(key);
  if (!v) throw ValidationError(key, "required");
  if (!v->is_array()) throw ValidationError(key, "must be an array of strings");
  std::vector<std::string> out;
  for (const auto& x : *v) {
    if (!x.is_string()) throw ValidationError(key, "must be an array of strings");
    out.push_back(x.get<std::string>());
  }
  return out;
}

const json& Fields::object(const char* key) const {
  const json* v = find(key);
  if (!v) throw ValidationError(key, "required");
  return *v;
}

std::string render(const json& result) { return result.dump(2, ' ', false, json::error_handler_t::replace) + "\n"; }

// ---- Engine ----------------------------------------------------------------

Engine::Engine(Model model, BpeVocab vocab, ServiceConfig config)
    : model_(std::move(model)), vocab_(std::move(vocab)), config_(std::move(config)) {
  config_.validate();
  if (vocab_.size() != static_cast<std::size_t>(model_.config.vocab_size)) {
    throw Error("vocabulary has " + std::to_string(vocab_.size()) + " tokens but the model expects " +
                std::to_string(model_.config.vocab_size));
  }
}

std::unique_ptr<Engine> Engine::load(const ServiceConfig& config) {
  if (config.model_path.empty()) throw ValidationError("model", "a model file is required");
  auto vocab = BpeVocab::load(config.vocab_path, config.merges_path);
  auto model = load_model(config.model_path);
  return std::make_unique<Engine>(std::move(model), std::move(vocab), config);
}

std::size_t Engine::workers() const { return config_.workers ? config_.workers : default_workers(); }

Engine::Slot::Slot(Engine& engine) : engine_(engine) {
  if (engine_.active_generations_.fetch_add(1) >= engine_.config_.max_concurrent) {
    engine_.active_generations_.fetch_sub(1);
    throw BusyError("concurrency limit of " + std::to_string(engine_.config_.max_concurrent) +
                    " generations reached; retry later");
  }
}

Engine::Slot::~Slot() { engine_.active_generations_.fetch_sub(1); }

std::unique_lock<std::mutex> Engine::exclusive_eval() {
  std::unique_lock lock(eval_mutex_, std::try_to_lock);
  if (!lock.owns_lock()) throw BusyError("an evaluation is already running; retry later");
  return lock;
}

GenerationParams Engine::read_params(const json& request) const {
  GenerationParams p = config_.defaults;
  if (request.contains("params") && !request["params"].is_null()) {
    const Fields f(request["params"]);
    p.temperature = f.number("temperature", p.temperature);
    p.top_p = f.number("top_p", p.top_p);
    p.frequency_penalty = f.number("frequency_penalty", p.frequency_penalty);
    p.max_new_tokens = f.integer("max_new_tokens", p.max_new_tokens);
    p.seed = f.seed("seed", p.seed);
  }
  p.validate();
  return p;
}

SteeringSpec Engine::read_spec(const json& request, std::optional<double> default_coefficient,
                               bool layer_required) const {
  const Fields f(request);
  SteeringSpec spec;
  spec.pair = ContrastPair::make(f.string("p_plus", ""), f.string("p_minus", ""));
  spec.layer = layer_required ? f.integer("layer") : f.integer("layer", default_eval_layer(model_.config));
  spec.coefficient = default_coefficient ? f.number("coefficient", *default_coefficient) : f.number("coefficient");
  spec.alignment = f.integer("alignment", 1);
  spec.dim_cutoff = f.optional_integer("dim_cutoff");
  spec.validate(model_.config);
  return spec;
}

std::string Engine::vector_id(const SteeringSpec& spec) const {
  const json key = {{"p_plus", spec.pair.plus},   {"p_minus", spec.pair.minus}, {"layer", spec.layer},
                    {"coefficient", spec.coefficient}, {"alignment", spec.alignment},
                    {"dim_cutoff", spec.dim_cutoff ? json(*spec.dim_cutoff) : json(nullptr)},
                    {"model", model_.hash}};
  return fnv1a_hex(key.dump(-1, ' ', false, json::error_handler_t::replace));
}

std::shared_ptr<const SteeringVector> Engine::cached_vector(const SteeringSpec& spec, std::string* id, bool* hit) {
  const auto key = vector_id(spec);
  if (id) *id = key;
  {
    std::lock_guard lock(cache_mutex_);
    auto it = cache_.find(key);
    if (it != cache_.end()) {
      if (hit) *hit = true;
      return it->second.second;
    }
  }
  if (hit) *hit = false;
  std::shared_ptr<const SteeringVector> vec;
  const auto file = config_.vector_cache_dir.empty() ? std::filesystem::path{}
                                                      : config_.vector_cache_dir / (key + ".aawf");
  if (!file.empty() && std::filesystem::exists(file)) {
    vec = std::make_shared<const SteeringVector>(load_vector(file));
  } else {
    vec = std::make_shared<const SteeringVector>(build_steering_vector(model_, vocab_, spec));
    if (!file.empty()) {
      std::filesystem::create_directories(config_.vector_cache_dir);
      save_vector(*vec, file, model_.hash);
    }
  }
  std::lock_guard lock(cache_mutex_);
  return cache_.try_emplace(key, spec, vec).first->second.second;
}

json Engine::model_info() const {
  return {{"config", model_.config},
          {"model_hash", model_.hash},
          {"eot_id", vocab_.eot_id()},
          {"max_completions", config_.max_completions},
          {"default_params", config_.defaults},
          {"default_eval_layer", default_eval_layer(model_.config)},
          {"suggested_grid", suggested_grid(model_.config)}};
}

json Engine::generate(const json& request) {
  const Fields f(request);
  const auto prompt = f.string("prompt");
  const auto params = read_params(request);
  const int n = f.integer("n_completions", 1);
  if (n < 1 || n > config_.max_completions) {
    throw ValidationError("n_completions", "must lie in [1, " + std::to_string(config_.max_completions) + "]");
  }
  const auto completions = generate_many(model_, vocab_, prompt, params, nullptr, n, workers());
  return {{"prompt", prompt}, {"params", params}, {"completions", completions_json(completions)}};
}

json Engine::steer(const json& request) {
  const Fields f(request);
  const auto prompt = f.string("prompt");
  const auto spec = read_spec(request, 1.0);
  const auto params = read_params(request);
  const int n = f.integer("n_completions", 1);
  if (n < 1 || n > config_.max_completions) {
    throw ValidationError("n_completions", "must lie in [1, " + std::to_string(config_.max_completions) + "]");
  }
  std::string id;
  const auto vec = cached_vector(spec, &id);
  const auto baseline = completions_json(generate_many(model_, vocab_, prompt, params, nullptr, n, workers()));
  const auto steered = completions_json(generate_many(model_, vocab_, prompt, params, vec.get(), n, workers()));
  return {{"prompt", prompt},     {"spec", spec},         {"params", params}, {"vector_id", id},
          {"baseline", baseline}, {"steered", steered}, {"identical", baseline == steered}};
}

json Engine::build_vector(const json& request) {
  const auto spec = read_spec(request, 1.0);
  std::string id;
  bool hit = false;
  const auto vec = cached_vector(spec, &id, &hit);
  json norms = json::array();
  for (double v : vec->row_norms()) norms.push_back(v);
  return {{"id", id}, {"cached", hit}, {"row_norms", norms}, {"vector", *vec}};
}

json Engine::norm_profile(const std::string& id, const json& request) {
  SteeringSpec spec;
  {
    std::lock_guard lock(cache_mutex_);
    auto it = cache_.find(id);
    if (it == cache_.end()) throw NotFoundError("unknown vector id " + id);
    spec = it->second.first;
  }
  const Fields f(request);
  const auto prompt = f.string("prompt");
  json out = actadd::norm_profile(model_, vocab_, prompt, spec.pair, spec.coefficient);
  out["vector_id"] = id;
  return out;
}

json Engine::export_vector(const json& request) {
  const Fields f(request);
  const auto out_path = f.string("output");
  const auto spec = read_spec(request, 1.0);
  std::string id;
  const auto vec = cached_vector(spec, &id);
  save_vector(*vec, out_path, model_.hash);
  return {{"id", id}, {"output", out_path}, {"vector", *vec}};
}

json Engine::eval_perplexity(const json& request) {
  const Fields f(request);
  auto docs = load_corpus(f.string("corpus"));
  const auto bins = tag_and_bin(docs, read_keywords(f), f.number("bin_width", 0.005),
                                static_cast<std::size_t>(f.integer("min_count", 25)));
  json req = request;
  if (!req.contains("p_plus")) req["p_plus"] = " weddings";
  if (!req.contains("p_minus")) req["p_minus"] = " ";
  const auto spec = read_spec(req, 1.0, false);
  const auto vec = cached_vector(spec);
  return perplexity_ratio(model_, vocab_, docs, bins, vec.get(), workers());
}

json Engine::eval_prompting(const json& request) {
  const Fields f(request);
  auto docs = load_corpus(f.string("corpus"));
  const auto bins = tag_and_bin(docs, read_keywords(f), f.number("bin_width", 0.005),
                                static_cast<std::size_t>(f.integer("min_count", 25)));
  return prompting_baseline(model_, vocab_, docs, bins, f.string("prefix", " weddings"), workers());
}

json Engine::eval_shift(const json& request) {
  const Fields f(request);
  auto docs = load_corpus(f.string("corpus"));
  docs = sample_documents(std::move(docs), static_cast<std::size_t>(f.integer("sample", 500)),
                          f.seed("sample_seed", 0));
  json req = request;
  if (!req.contains("p_plus")) req["p_plus"] = " weddings";
  if (!req.contains("p_minus")) req["p_minus"] = " ";
  const auto spec = read_spec(req, 1.0, false);
  const auto vec = cached_vector(spec);
  return token_shift(model_, vocab_, docs, *vec, static_cast<std::size_t>(f.integer("min_instances", 20)), workers());
}

json Engine::eval_pk(const json& request) {
  const Fields f(request);
  const auto set = load_knowledge_set(f.string("knowledge"), vocab_);
  json req = request;
  if (!req.contains("p_plus")) req["p_plus"] = " weddings";
  if (!req.contains("p_minus")) req["p_minus"] = " ";
  const auto spec = read_spec(req, 1.0, false);
  const auto vec = cached_vector(spec);
  json out = p_at_k(model_, vocab_, set.items, vec.get(), f.integers("k", {1, 5, 10, 50}), workers());
  out["dropped"] = set.dropped;
  return out;
}

json Engine::eval_kl(const json& request) {
  const Fields f(request);
  std::vector<std::string> prompts;
  const json& p = f.object("prompts");
  if (p.is_string()) {
    std::ifstream in(p.get<std::string>());
    if (!in) throw Error("cannot read prompts file " + p.get<std::string>());
    try {
      prompts = json::parse(in).get<std::vector<std::string>>();
    } catch (const json::exception& e) {
      throw Error(p.get<std::string>() + ": expected a JSON array of strings: " + e.what());
    }
  } else {
    prompts = f.strings("prompts");
  }
  json req = request;
  if (!req.contains("p_plus")) req["p_plus"] = " weddings";
  if (!req.contains("p_minus")) req["p_minus"] = " ";
  const auto spec = read_spec(req, 1.0, false);
  const auto topic = cached_vector(spec);
  const auto random = random_matched_vector(*topic, f.seed("random_seed", 0));
  json out = kl_shift(model_, vocab_, prompts, *topic, random, workers());
  out["vector_a"] = "topic";
  out["vector_b"] = "norm-matched random";
  return out;
}

json Engine::sweep_layers(const json& request) {
  const Fields f(request);
  const auto pair = ContrastPair::make(f.string("p_plus", " weddings"), f.string("p_minus", " "));
  std::vector<int> all(static_cast<std::size_t>(model_.config.n_layers));
  std::iota(all.begin(), all.end(), 0);
  const auto layers = f.integers("layers", all);
  for (int l : layers) {
    if (l < 0 || l >= model_.config.n_layers) {
      throw ValidationError("layers", "layer " + std::to_string(l) + " outside valid range [0, " +
                                          std::to_string(model_.config.n_layers - 1) + "]");
    }
  }
  GenerationParams params = scoring_params();
  params.seed = f.seed("seed", params.seed);
  params.max_new_tokens = f.integer("max_new_tokens", params.max_new_tokens);
  const auto report =
      generation_sweep(model_, vocab_, f.string("prompt", kGenerationPrompt), pair, f.number("coefficient", 1.0),
                       layers, f.integer("n", 100), params, read_keywords(f), workers());
  json out = report;
  if (!report.steered.empty()) {
    const auto best = std::max_element(report.steered.begin(), report.steered.end(),
                                       [](const GenerationScore& a, const GenerationScore& b) {
                                         return a.fraction != b.fraction ? a.fraction < b.fraction
                                                                         : a.mean_count < b.mean_count;
                                       });
    out["best_layer"] = *best->layer;
  }
  return out;
}

json Engine::sweep_partial(const json& request) {
  const Fields f(request);
  json req = request;
  if (!req.contains("p_plus")) req["p_plus"] = " weddings";
  if (!req.contains("p_minus")) req["p_minus"] = " ";
  if (!req.contains("layer")) {
    req["layer"] = std::clamp(static_cast<int>(std::lround(6.0 * model_.config.n_layers / 48.0)), 0,
                              model_.config.n_layers - 1);
  }
  const auto spec = read_spec(req, 4.0);
  GenerationParams params = scoring_params();
  params.seed = f.seed("seed", params.seed);
  params.max_new_tokens = f.integer("max_new_tokens", params.max_new_tokens);
  const auto fractions = f.numbers("fractions", {0.0, 0.25, 0.5, 0.75, 1.0});
  const auto report = partial_sweep(model_, vocab_, f.string("prompt", kGenerationPrompt), spec, fractions,
                                    f.integer("n", 100), params, read_keywords(f), workers());
  json out = report;
  if (fractions.size() >= 2) {
    std::vector<double> means;
    for (const auto& s : report.steered) means.push_back(s.mean_count);
    out["spearman"] = spearman(fractions, means);
    if (out["spearman"].is_number() && !std::isfinite(out["spearman"].get<double>())) out["spearman"] = nullptr;
  }
  return out;
}

json Engine::bench_premium(const json& request) {
  const Fields f(request);
  PremiumOptions options;
  options.reps = f.integer("reps", options.reps);
  options.warmup = f.integer("warmup", options.warmup);
  options.seeds = f.integer("seeds", options.seeds);
  options.batch = f.integer("batch", options.batch);
  options.seq_len = f.integer("seq_len", options.seq_len);
  options.layer = f.integer("layer", options.layer);
  options.null_control = f.boolean("null_control", false);
  const auto pair = ContrastPair::make(f.string("p_plus", " weddings"), f.string("p_minus", " "));
  const auto contrast = pad_contrast_pair(vocab_, pair);

  PremiumReport report;
  if (f.has("stub_base_us")) {
    StubBackend stub(model_.config, std::chrono::microseconds(f.integer("stub_base_us")),
                     std::chrono::microseconds(f.integer("stub_injection_us", 0)));
    report.models.push_back(measure_premium(stub, contrast, options));
    json out = report;
    out["expected_premium"] = stub.expected_premium(options.batch);
    return out;
  }
  ModelBackend backend(model_.hash, model_);
  report.models.push_back(measure_premium(backend, contrast, options));
  return report;
}

}  // namespace actadd::service
