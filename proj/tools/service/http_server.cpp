#include "http_server.hpp"

#include <httplib.h>

#include <chrono>
#include <iostream>
#include <random>

#include "actadd/log.hpp"

namespace actadd::service {
namespace {

std::uint64_t draw_seed() {
  static std::mutex mutex;
  static std::mt19937_64 gen{std::random_device{}()};
  std::lock_guard lock(mutex);
  // Keep seeds within 2^53 so JSON clients holding doubles round-trip them.
  return gen() >> 11;
}

std::string error_id() {
  static std::atomic<std::uint64_t> counter{0};
  std::mt19937_64 gen{std::random_device{}() ^ counter.fetch_add(1)};
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(gen()));
  return buf;
}

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(-1, ' ', false, json::error_handler_t::replace), "application/json");
}

enum class Kind { generation, eval, plain };

using Handler = std::function<json(const json& request)>;

// Parses the body, fills a seed when the request allows one, runs the
// handler and wraps the result.
void respond(Engine& engine, const httplib::Request& req, httplib::Response& res, Kind kind, bool seeded,
             const Handler& handler) {
  const auto start = std::chrono::steady_clock::now();
  try {
    json body = json::object();
    if (!req.body.empty()) {
      try {
        body = json::parse(req.body);
      } catch (const json::parse_error& e) {
        throw ValidationError("body", std::string("malformed JSON: ") + e.what());
      }
    }
    if (!body.is_object()) throw ValidationError("body", "request body must be a JSON object");
    json seed = nullptr;
    if (seeded) {
      if (!body.contains("params") || body["params"].is_null()) body["params"] = json::object();
      if (!body["params"].is_object()) throw ValidationError("params", "must be an object");
      if (!body["params"].contains("seed") || body["params"]["seed"].is_null()) body["params"]["seed"] = draw_seed();
      seed = body["params"]["seed"];
    }

    json result;
    if (kind == Kind::generation) {
      Engine::Slot slot(engine);
      result = handler(body);
    } else if (kind == Kind::eval) {
      auto lock = engine.exclusive_eval();
      result = handler(body);
    } else {
      result = handler(body);
    }
    const double ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    send_json(res, 200, {{"request", body}, {"seed", seed}, {"timing_ms", ms}, {"result", result}});
  } catch (const ValidationError& e) {
    json err = {{"error", e.what()}};
    if (!e.field().empty()) err["field"] = e.field();
    send_json(res, 400, err);
  } catch (const NotFoundError& e) {
    send_json(res, 404, {{"error", e.what()}});
  } catch (const BusyError& e) {
    send_json(res, 409, {{"error", e.what()}});
  } catch (const std::exception& e) {
    const auto id = error_id();
    warn("internal error " + id + ": " + e.what());
    send_json(res, 500, {{"error", "internal error"}, {"id", id}});
  }
}

}  // namespace

HttpServer::HttpServer(Engine& engine) : engine_(engine), server_(std::make_unique<httplib::Server>()) {
  auto& s = *server_;
  const std::string origin = engine_.config().cors_origin;
  s.set_default_headers({{"Access-Control-Allow-Origin", origin},
                         {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                         {"Access-Control-Allow-Headers", "Content-Type"}});
  s.Options(R"(/v1/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

  s.Get("/v1/model", [this](const httplib::Request& req, httplib::Response& res) {
    respond(engine_, req, res, Kind::plain, false, [this](const json&) { return engine_.model_info(); });
  });
  s.Post("/v1/generate", [this](const httplib::Request& req, httplib::Response& res) {
    respond(engine_, req, res, Kind::generation, true, [this](const json& b) { return engine_.generate(b); });
  });
  s.Post("/v1/steer", [this](const httplib::Request& req, httplib::Response& res) {
    respond(engine_, req, res, Kind::generation, true, [this](const json& b) { return engine_.steer(b); });
  });
  s.Post("/v1/vectors", [this](const httplib::Request& req, httplib::Response& res) {
    respond(engine_, req, res, Kind::plain, false, [this](const json& b) { return engine_.build_vector(b); });
  });
  s.Get(R"(/v1/vectors/([0-9a-f]+)/norm-profile)", [this](const httplib::Request& req, httplib::Response& res) {
    const std::string id = req.matches[1];
    json query = json::object();
    if (req.has_param("prompt")) query["prompt"] = req.get_param_value("prompt");
    httplib::Request copy = req;
    copy.body = query.dump();
    respond(engine_, copy, res, Kind::plain, false,
            [this, id](const json& b) { return engine_.norm_profile(id, b); });
  });
  const std::pair<const char*, json (Engine::*)(const json&)> evals[] = {
      {"/v1/eval/perplexity", &Engine::eval_perplexity},
      {"/v1/eval/prompting", &Engine::eval_prompting},
      {"/v1/eval/shift", &Engine::eval_shift},
      {"/v1/eval/pk", &Engine::eval_pk},
      {"/v1/eval/kl", &Engine::eval_kl},
  };
  for (const auto& [path, method] : evals) {
    s.Post(path, [this, method = method](const httplib::Request& req, httplib::Response& res) {
      respond(engine_, req, res, Kind::eval, false, [this, method](const json& b) { return (engine_.*method)(b); });
    });
  }
}

HttpServer::~HttpServer() = default;

bool HttpServer::listen(const std::string& host, int port) { return server_->listen(host, port); }

int HttpServer::bind_any_port(const std::string& host) { return server_->bind_to_any_port(host); }

bool HttpServer::listen_after_bind() { return server_->listen_after_bind(); }

void HttpServer::stop() { server_->stop(); }

}  // namespace actadd::service
