#pragma once

#include <functional>
#include <memory>

#include "engine.hpp"

namespace httplib {
class Server;
}

namespace actadd::service {

// Routes of the HTTP API bound to one engine. Responses are
// {"request", "seed", "timing_ms", "result"}; errors are
// {"error", "field"?, "id"?} with 400/404/409/500.
class HttpServer {
 public:
  explicit HttpServer(Engine& engine);
  ~HttpServer();

  // Binds and serves until stop(). Returns false when binding fails.
  bool listen(const std::string& host, int port);
  // Binds to an ephemeral port; returns it, or -1.
  int bind_any_port(const std::string& host);
  bool listen_after_bind();
  void stop();

 private:
  Engine& engine_;
  std::unique_ptr<httplib::Server> server_;
};

}  // namespace actadd::service
