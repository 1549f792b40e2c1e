#pragma once

#include <atomic>
#include <cstddef>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>

#include "actadd/error.hpp"
#include "actadd/eval.hpp"
#include "actadd/model.hpp"
#include "actadd/sampler.hpp"
#include "actadd/steering.hpp"
#include "actadd/tokenizer.hpp"

namespace actadd::service {

using nlohmann::json;

struct ServiceConfig {
  std::filesystem::path model_path;
  std::filesystem::path vocab_path;
  std::filesystem::path merges_path;
  std::string host = "127.0.0.1";
  int port = 8080;
  int max_concurrent = 2;
  int max_completions = 100;
  GenerationParams defaults;
  std::filesystem::path vector_cache_dir;
  std::size_t workers = 0;  // 0: hardware concurrency
  std::string cors_origin = "*";

  void validate() const;
};

// Raised when a request would exceed a concurrency limit. HTTP 409.
class BusyError : public Error {
 public:
  using Error::Error;
};

// Unknown resource id. HTTP 404.
class NotFoundError : public Error {
 public:
  using Error::Error;
};

// Wedding vector of the evaluation experiments, layer scaled to the model
// depth from 16 of 48.
int default_eval_layer(const ModelConfig& config);

// One loaded model plus tokenizer. Every handler takes a JSON request, reads
// its fields with ValidationError on bad input, and returns the result JSON.
// The CLI and the HTTP server both call these, so their output is the same.
class Engine {
 public:
  Engine(Model model, BpeVocab vocab, ServiceConfig config);

  static std::unique_ptr<Engine> load(const ServiceConfig& config);

  const Model& model() const noexcept { return model_; }
  const BpeVocab& vocab() const noexcept { return vocab_; }
  const ServiceConfig& config() const noexcept { return config_; }

  json model_info() const;
  json generate(const json& request);
  json steer(const json& request);
  json build_vector(const json& request);
  json norm_profile(const std::string& id, const json& request);
  json export_vector(const json& request);

  json eval_perplexity(const json& request);
  json eval_prompting(const json& request);
  json eval_shift(const json& request);
  json eval_pk(const json& request);
  json eval_kl(const json& request);
  json sweep_layers(const json& request);
  json sweep_partial(const json& request);
  json bench_premium(const json& request);

  // Generation slot guard for the HTTP path; throws BusyError when full.
  class Slot {
   public:
    explicit Slot(Engine& engine);
    ~Slot();
    Slot(const Slot&) = delete;
    Slot& operator=(const Slot&) = delete;

   private:
    Engine& engine_;
  };
  // Evaluations run one at a time; throws BusyError when one is running.
  std::unique_lock<std::mutex> exclusive_eval();

 private:
  SteeringSpec read_spec(const json& request, std::optional<double> default_coefficient = std::nullopt,
                         bool layer_required = true) const;
  GenerationParams read_params(const json& request) const;
  std::shared_ptr<const SteeringVector> cached_vector(const SteeringSpec& spec, std::string* id = nullptr,
                                                      bool* hit = nullptr);
  std::string vector_id(const SteeringSpec& spec) const;
  std::size_t workers() const;

  Model model_;
  BpeVocab vocab_;
  ServiceConfig config_;

  std::mutex cache_mutex_;
  std::map<std::string, std::pair<SteeringSpec, std::shared_ptr<const SteeringVector>>> cache_;
  std::atomic<int> active_generations_{0};
  std::mutex eval_mutex_;
};

// Reads typed fields from a request object, naming the field in errors.
class Fields {
 public:
  explicit Fields(const json& object);

  bool has(const char* key) const;
  std::string string(const char* key) const;
  std::string string(const char* key, const std::string& fallback) const;
  double number(const char* key) const;
  double number(const char* key, double fallback) const;
  int integer(const char* key) const;
  int integer(const char* key, int fallback) const;
  std::uint64_t seed(const char* key, std::uint64_t fallback) const;
  bool boolean(const char* key, bool fallback) const;
  std::optional<int> optional_integer(const char* key) const;
  std::vector<int> integers(const char* key, std::vector<int> fallback) const;
  std::vector<double> numbers(const char* key, std::vector<double> fallback) const;
  std::vector<std::string> strings(const char* key) const;
  const json& object(const char* key) const;

 private:
  const json* find(const char* key) const;
  const json& obj_;
};

// Canonical text form used by both front ends.
std::string render(const json& result);

}  // namespace actadd::service
