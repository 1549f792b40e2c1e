#include <CLI11.hpp>
#include <cctype>
#include <fstream>
#include <functional>
#include <iostream>
#include <list>
#include <sstream>

#include "actadd/aawf.hpp"
#include "actadd/log.hpp"
#include "engine.hpp"
#include "http_server.hpp"

#ifndef ACTADD_DATA_DIR
#define ACTADD_DATA_DIR "data/gpt2"
#endif

using actadd::service::json;

namespace {

// Lets every flag come from a JSON file: top-level keys are global options,
// nested objects are subcommands, e.g. {"model": "m.aawf", "steer": {"layer": 6}}.
class JsonConfig : public CLI::Config {
 public:
  std::string to_config(const CLI::App* app, bool default_also, bool, std::string) const override {
    json j;
    for (const CLI::Option* opt : app->get_options({})) {
      if (opt->get_lnames().empty() || !opt->get_configurable()) continue;
      const auto& name = opt->get_lnames().front();
      if (opt->count() > 0) {
        const auto& r = opt->results();
        j[name] = r.size() == 1 ? json(r.front()) : json(r);
      } else if (default_also && !opt->get_default_str().empty()) {
        j[name] = opt->get_default_str();
      }
    }
    return j.dump(2);
  }

  std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
    json j;
    try {
      input >> j;
    } catch (const json::exception& e) {
      throw CLI::ConversionError(std::string("config file is not valid JSON: ") + e.what());
    }
    return items(j, "", {});
  }

 private:
  static std::string scalar(const json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
    return v.dump();
  }

  std::vector<CLI::ConfigItem> items(const json& j, const std::string& name,
                                     const std::vector<std::string>& prefix) const {
    std::vector<CLI::ConfigItem> out;
    if (j.is_object()) {
      auto next = prefix;
      if (!name.empty()) next.push_back(name);
      for (auto it = j.begin(); it != j.end(); ++it) {
        auto sub = items(*it, it.key(), next);
        out.insert(out.end(), sub.begin(), sub.end());
      }
      return out;
    }
    if (name.empty()) throw CLI::ConversionError("config file must hold a JSON object");
    CLI::ConfigItem item;
    item.name = name;
    item.parents = prefix;
    if (j.is_array()) {
      for (const auto& v : j) item.inputs.push_back(scalar(v));
    } else {
      item.inputs = {scalar(j)};
    }
    out.push_back(std::move(item));
    return out;
  }
};

// Collects optional flag values into a request object. Keys with a dot go
// into a nested object ("params.seed").
class RequestBuilder {
 public:
  void text(CLI::App* app, const std::string& flags, std::string key, const std::string& help, bool required = false) {
    auto& slot = strings_.emplace_back();
    auto* opt = app->add_option(flags, slot, help);
    if (required) opt->required();
    commits_.push_back([&slot, key](json& j) {
      if (slot) set(j, key, *slot);
    });
  }
  void number(CLI::App* app, const std::string& flags, std::string key, const std::string& help) {
    auto& slot = doubles_.emplace_back();
    app->add_option(flags, slot, help);
    commits_.push_back([&slot, key](json& j) {
      if (slot) set(j, key, *slot);
    });
  }
  void integer(CLI::App* app, const std::string& flags, std::string key, const std::string& help,
               bool required = false) {
    auto& slot = ints_.emplace_back();
    auto* opt = app->add_option(flags, slot, help);
    if (required) opt->required();
    commits_.push_back([&slot, key](json& j) {
      if (slot) set(j, key, *slot);
    });
  }
  void seed(CLI::App* app, const std::string& flags, std::string key, const std::string& help) {
    auto& slot = seeds_.emplace_back();
    app->add_option(flags, slot, help);
    commits_.push_back([&slot, key](json& j) {
      if (slot) set(j, key, *slot);
    });
  }
  void flag(CLI::App* app, const std::string& flags, std::string key, const std::string& help) {
    auto& slot = flags_.emplace_back(false);
    app->add_flag(flags, slot, help);
    commits_.push_back([&slot, key](json& j) {
      if (slot) set(j, key, true);
    });
  }
  void integers(CLI::App* app, const std::string& flags, std::string key, const std::string& help) {
    auto& slot = int_lists_.emplace_back();
    app->add_option(flags, slot, help)->delimiter(',');
    commits_.push_back([&slot, key](json& j) {
      if (!slot.empty()) set(j, key, slot);
    });
  }
  void numbers(CLI::App* app, const std::string& flags, std::string key, const std::string& help) {
    auto& slot = double_lists_.emplace_back();
    app->add_option(flags, slot, help)->delimiter(',');
    commits_.push_back([&slot, key](json& j) {
      if (!slot.empty()) set(j, key, slot);
    });
  }

  json build() const {
    json j = json::object();
    for (const auto& c : commits_) c(j);
    return j;
  }

 private:
  static void set(json& j, const std::string& key, json value) {
    const auto dot = key.find('.');
    if (dot == std::string::npos) {
      j[key] = std::move(value);
    } else {
      j[key.substr(0, dot)][key.substr(dot + 1)] = std::move(value);
    }
  }

  std::list<std::optional<std::string>> strings_;
  std::list<std::optional<double>> doubles_;
  std::list<std::optional<int>> ints_;
  std::list<std::optional<std::uint64_t>> seeds_;
  std::list<bool> flags_;
  std::list<std::vector<int>> int_lists_;
  std::list<std::vector<double>> double_lists_;
  std::vector<std::function<void(json&)>> commits_;
};

void add_params(RequestBuilder& b, CLI::App* app) {
  b.number(app, "--temperature", "params.temperature", "Sampling temperature");
  b.number(app, "--top-p", "params.top_p", "Nucleus mass");
  b.number(app, "--frequency-penalty", "params.frequency_penalty", "Frequency penalty");
  b.integer(app, "--max-new-tokens", "params.max_new_tokens", "Completion length in tokens");
  b.seed(app, "--seed", "params.seed", "Sampling seed (completion i uses seed + i)");
}

void add_vector(RequestBuilder& b, CLI::App* app, bool layer_required) {
  b.text(app, "--plus,--p-plus", "p_plus", "Positive contrast prompt");
  b.text(app, "--minus,--p-minus", "p_minus", "Negative contrast prompt");
  b.integer(app, "--layer", "layer", "Injection layer", layer_required);
  b.number(app, "--coef,--coefficient", "coefficient", "Injection coefficient");
  b.integer(app, "--alignment", "alignment", "Stream position of the first vector row");
  b.integer(app, "--dim-cutoff", "dim_cutoff", "Keep only the first n residual dimensions");
}

void set_env_names(CLI::App* app) {
  for (CLI::Option* opt : app->get_options({})) {
    if (opt->get_lnames().empty() || opt->get_lnames().front() == "help" || !opt->get_envname().empty()) continue;
    std::string env = "ACTADD_" + opt->get_lnames().front();
    for (auto& c : env) c = c == '-' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    opt->envname(env);
  }
  for (CLI::App* sub : app->get_subcommands({})) set_env_names(sub);
}

void write_bins_csv(const json& report, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw actadd::Error("cannot write " + path);
  out << "lo,hi,documents,excluded,mean_delta,ratio\n";
  for (const auto& b : report["bins"]) {
    out << b["lo"].dump() << ',' << b["hi"].dump() << ',' << b["documents"].dump() << ','
        << (b["excluded"].get<bool>() ? 1 : 0) << ',' << b["mean_delta"].dump() << ',' << b["ratio"].dump() << '\n';
  }
}

void write_qq_csv(const json& report, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw actadd::Error("cannot write " + path);
  out << "theoretical,observed\n";
  for (const auto& p : report["qq"]) out << p[0].dump() << ',' << p[1].dump() << '\n';
}

std::string summary(const std::string& command, const json& r) {
  std::ostringstream s;
  s << command << ": ";
  if (command == "generate") {
    s << r["completions"].size() << " completion(s)";
  } else if (command == "steer") {
    s << r["steered"].size() << " baseline/steered pair(s), layer " << r["spec"]["layer"] << ", c="
      << r["spec"]["coefficient"] << (r["identical"].get<bool>() ? ", steered identical to baseline" : "");
  } else if (command == "eval-perplexity" || command == "eval-prompting") {
    for (const auto& g : r["groups"]) s << g["name"].get<std::string>() << " ratio " << g["ratio"].dump() << "  ";
  } else if (command == "eval-shift") {
    s << r["kept_tokens"] << " tokens kept of " << r["total_tokens"] << " scored";
  } else if (command == "eval-pk") {
    for (std::size_t i = 0; i < r["k"].size(); ++i) {
      s << "P@" << r["k"][i] << " " << r["baseline"][i].dump() << " -> " << r["steered"][i].dump() << "  ";
    }
  } else if (command == "eval-kl") {
    s << "median KL topic " << r["median_a"].dump() << ", random " << r["median_b"].dump();
  } else if (command == "sweep-layers") {
    s << "baseline fraction " << r["baseline"]["fraction"].dump();
    if (r.contains("best_layer")) s << ", best layer " << r["best_layer"];
  } else if (command == "sweep-partial") {
    s << "spearman " << (r.contains("spearman") ? r["spearman"].dump() : "n/a");
  } else if (command == "bench-premium") {
    for (const auto& m : r["models"]) s << m["model"].get<std::string>() << " premium " << m["premium"].dump();
  } else if (command == "export-vector") {
    s << "wrote " << r["output"].get<std::string>();
  } else if (command == "convert-check") {
    s << (r["ok"].get<bool>() ? "ok" : "FAILED") << ", " << r["tensors"] << " tensors";
  } else {
    s << "done";
  }
  return s.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ActAdd activation steering engine"};
  app.require_subcommand(1);
  app.config_formatter(std::make_shared<JsonConfig>());
  app.set_config("--config", "", "JSON file supplying any flag");

  actadd::service::ServiceConfig cfg;
  std::string model_path, vocab_path = std::string(ACTADD_DATA_DIR) + "/vocab.json",
                          merges_path = std::string(ACTADD_DATA_DIR) + "/merges.txt";
  int workers = 0;
  app.add_option("--model", model_path, "AAWF weight file");
  app.add_option("--vocab", vocab_path, "vocab.json")->capture_default_str();
  app.add_option("--merges", merges_path, "merges.txt")->capture_default_str();
  app.add_option("--workers", workers, "Worker threads (0: all cores)");

  std::map<std::string, RequestBuilder> builders;
  auto sub = [&](const std::string& name, const std::string& help) {
    return std::pair{app.add_subcommand(name, help), &builders[name]};
  };

  {
    auto [c, b] = sub("generate", "Sample completions from the unsteered model");
    b->text(c, "--prompt", "prompt", "User prompt", true);
    b->integer(c, "-n,--n-completions", "n_completions", "Number of completions");
    add_params(*b, c);
  }
  {
    auto [c, b] = sub("steer", "Baseline and steered completions side by side");
    b->text(c, "--prompt", "prompt", "User prompt", true);
    add_vector(*b, c, true);
    b->integer(c, "-n,--n-completions", "n_completions", "Number of completions");
    add_params(*b, c);
  }
  {
    auto [c, b] = sub("sweep-layers", "Keyword scoring of steered generations at each layer");
    b->text(c, "--prompt", "prompt", "User prompt");
    b->text(c, "--plus,--p-plus", "p_plus", "Positive contrast prompt");
    b->text(c, "--minus,--p-minus", "p_minus", "Negative contrast prompt");
    b->number(c, "--coef,--coefficient", "coefficient", "Injection coefficient");
    b->integers(c, "--layers", "layers", "Comma-separated layers (default: all)");
    b->integer(c, "-n", "n", "Completions per setting");
    b->seed(c, "--seed", "seed", "Base seed");
    b->integer(c, "--max-new-tokens", "max_new_tokens", "Completion length");
    b->text(c, "--keywords", "keywords", "JSON keyword list file");
  }
  {
    auto [c, b] = sub("sweep-partial", "Keyword scoring with only the first n residual dimensions");
    b->text(c, "--prompt", "prompt", "User prompt");
    add_vector(*b, c, false);
    b->numbers(c, "--fractions", "fractions", "Comma-separated fractions of d_model");
    b->integer(c, "-n", "n", "Completions per setting");
    b->seed(c, "--seed", "seed", "Base seed");
    b->integer(c, "--max-new-tokens", "max_new_tokens", "Completion length");
    b->text(c, "--keywords", "keywords", "JSON keyword list file");
  }
  std::string csv_path, qq_path;
  {
    auto [c, b] = sub("eval-perplexity", "Perplexity ratio per topic-frequency bin");
    b->text(c, "--corpus", "corpus", "Directory, file or glob", true);
    b->number(c, "--bin-width", "bin_width", "Topic-frequency bin width");
    b->integer(c, "--min-count", "min_count", "Bins with this many documents or fewer are excluded");
    b->text(c, "--keywords", "keywords", "JSON keyword list file");
    add_vector(*b, c, false);
    c->add_option("--csv", csv_path, "Also write bins as CSV");
  }
  {
    auto [c, b] = sub("eval-prompting", "Perplexity ratio of prepending a prompt instead of steering");
    b->text(c, "--corpus", "corpus", "Directory, file or glob", true);
    b->text(c, "--prefix", "prefix", "Prepended text");
    b->number(c, "--bin-width", "bin_width", "Topic-frequency bin width");
    b->integer(c, "--min-count", "min_count", "Bins with this many documents or fewer are excluded");
    b->text(c, "--keywords", "keywords", "JSON keyword list file");
    c->add_option("--csv", csv_path, "Also write bins as CSV");
  }
  {
    auto [c, b] = sub("eval-shift", "Per-token log-probability shift");
    b->text(c, "--corpus", "corpus", "Directory, file or glob", true);
    b->integer(c, "--sample", "sample", "Documents sampled (0: all)");
    b->seed(c, "--sample-seed", "sample_seed", "Document sampling seed");
    b->integer(c, "--min-instances", "min_instances", "Tokens seen this often or less are dropped");
    add_vector(*b, c, false);
    c->add_option("--qq-csv", qq_path, "Also write the Q-Q points as CSV");
  }
  {
    auto [c, b] = sub("eval-pk", "Knowledge preservation, P@K with and without steering");
    b->text(c, "--knowledge", "knowledge", "JSONL of {prompt, target}", true);
    b->integers(c, "--k", "k", "Comma-separated K values");
    add_vector(*b, c, false);
  }
  {
    auto [c, b] = sub("eval-kl", "KL shift of a topic vector against a norm-matched random vector");
    b->text(c, "--prompts", "prompts", "JSON array of prompts", true);
    b->seed(c, "--random-seed", "random_seed", "Seed of the random vector");
    add_vector(*b, c, false);
  }
  {
    auto [c, b] = sub("bench-premium", "Inference-time premium of steering");
    b->integer(c, "--reps", "reps", "Timed passes per seed");
    b->integer(c, "--warmup", "warmup", "Untimed passes per seed");
    b->integer(c, "--seeds", "seeds", "Seeds");
    b->integer(c, "--batch", "batch", "Sequences per pass");
    b->integer(c, "--seq-len", "seq_len", "Tokens per sequence");
    b->integer(c, "--layer", "layer", "Injection layer");
    b->flag(c, "--null-control", "null_control", "Time the baseline workload twice");
    b->integer(c, "--stub-base-us", "stub_base_us", "Time a stub backend with this pass cost");
    b->integer(c, "--stub-injection-us", "stub_injection_us", "Extra stub cost of an injected pass");
  }
  {
    auto [c, b] = sub("export-vector", "Build a steering vector and save it");
    add_vector(*b, c, true);
    b->text(c, "--output,-o", "output", "Output file", true);
  }
  std::string check_path;
  auto* check = app.add_subcommand("convert-check", "Verify every checksum of an AAWF file");
  check->add_option("file", check_path, "AAWF file")->required();

  auto* serve = app.add_subcommand("serve", "Run the HTTP API");
  serve->add_option("--host", cfg.host, "Bind address")->capture_default_str();
  serve->add_option("--port", cfg.port, "Port")->capture_default_str();
  serve->add_option("--max-concurrent", cfg.max_concurrent, "Concurrent generation requests")->capture_default_str();
  serve->add_option("--max-completions", cfg.max_completions, "Cap on n_completions")->capture_default_str();
  serve->add_option("--vector-cache-dir", cfg.vector_cache_dir, "Persist built vectors here");
  serve->add_option("--cors-origin", cfg.cors_origin, "Access-Control-Allow-Origin")->capture_default_str();
  serve->add_option("--temperature", cfg.defaults.temperature, "Default temperature")->capture_default_str();
  serve->add_option("--top-p", cfg.defaults.top_p, "Default nucleus mass")->capture_default_str();
  serve->add_option("--frequency-penalty", cfg.defaults.frequency_penalty, "Default frequency penalty")
      ->capture_default_str();
  serve->add_option("--max-new-tokens", cfg.defaults.max_new_tokens, "Default completion length")
      ->capture_default_str();

  set_env_names(&app);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  CLI::App* chosen = app.get_subcommands().front();
  const std::string command = chosen->get_name();
  try {
    json result;
    if (command == "convert-check") {
      const auto report = actadd::aawf::verify(check_path);
      result = {{"ok", report.ok()}, {"tensors", report.tensors}, {"bytes", report.bytes},
                {"failures", report.failures}};
      std::cout << actadd::service::render(result);
      std::cerr << summary(command, result) << '\n';
      return report.ok() ? 0 : 1;
    }

    cfg.model_path = model_path;
    cfg.vocab_path = vocab_path;
    cfg.merges_path = merges_path;
    cfg.workers = static_cast<std::size_t>(std::max(0, workers));
    if (command == "serve") {
      auto engine = actadd::service::Engine::load(cfg);
      actadd::service::HttpServer server(*engine);
      std::cerr << "serving on http://" << cfg.host << ':' << cfg.port << '\n';
      if (!server.listen(cfg.host, cfg.port)) throw actadd::Error("cannot bind " + cfg.host + ":" + std::to_string(cfg.port));
      return 0;
    }

    const json request = builders.at(command).build();
    auto engine = actadd::service::Engine::load(cfg);
    using Method = json (actadd::service::Engine::*)(const json&);
    static const std::map<std::string, Method> methods = {
        {"generate", &actadd::service::Engine::generate},
        {"steer", &actadd::service::Engine::steer},
        {"sweep-layers", &actadd::service::Engine::sweep_layers},
        {"sweep-partial", &actadd::service::Engine::sweep_partial},
        {"eval-perplexity", &actadd::service::Engine::eval_perplexity},
        {"eval-prompting", &actadd::service::Engine::eval_prompting},
        {"eval-shift", &actadd::service::Engine::eval_shift},
        {"eval-pk", &actadd::service::Engine::eval_pk},
        {"eval-kl", &actadd::service::Engine::eval_kl},
        {"bench-premium", &actadd::service::Engine::bench_premium},
        {"export-vector", &actadd::service::Engine::export_vector},
    };
    result = ((*engine).*methods.at(command))(request);
    if (!csv_path.empty()) write_bins_csv(result, csv_path);
    if (!qq_path.empty()) write_qq_csv(result, qq_path);
    std::cout << actadd::service::render(result);
    std::cerr << summary(command, result) << '\n';
    return 0;
  } catch (const actadd::ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
