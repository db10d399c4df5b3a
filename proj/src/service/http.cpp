#include <thread>

#include "afl/error.hpp"
#include "afl/service/service.hpp"
#include "httplib.h"

namespace afl::service {

namespace {

void reply(httplib::Response& res, const Response& r) {
  res.status = r.status;
  res.set_content(r.body, "application/json");
}

void install_routes(httplib::Server& server, Service& service) {
  server.Get("/health", [&](const httplib::Request&, httplib::Response& res) { reply(res, service.health()); });
  server.Get("/checkpoints", [&](const httplib::Request&, httplib::Response& res) {
    reply(res, service.list_checkpoints());
  });
  server.Get(R"(/checkpoints/([^/]+))", [&](const httplib::Request& req, httplib::Response& res) {
    reply(res, service.describe_checkpoint(req.matches[1]));
  });
  server.Get(R"(/traces/([^/]+))", [&](const httplib::Request& req, httplib::Response& res) {
    reply(res, service.trace(req.matches[1]));
  });
  server.Post("/generate", [&](const httplib::Request& req, httplib::Response& res) {
    reply(res, service.generate(req.body));
  });
  server.Post("/reload", [&](const httplib::Request&, httplib::Response& res) {
    service.reload();
    reply(res, service.list_checkpoints());
  });
  server.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr) {
    res.status = 500;
    res.set_content(R"({"error":{"code":"internal","id":"http"}})" "\n", "application/json");
  });
}

}  // namespace

void serve(Service& service) {
  httplib::Server server;
  install_routes(server, service);
  const auto& cfg = service.config();
  if (!server.listen(cfg.host, cfg.port)) {
    throw Error("cannot listen on " + cfg.host + ":" + std::to_string(cfg.port));
  }
}

struct BackgroundServer::Impl {
  httplib::Server server;
  std::thread thread;
};

BackgroundServer::BackgroundServer(Service& service, const std::string& host, int port)
    : impl_(std::make_unique<Impl>()) {
  install_routes(impl_->server, service);
  if (port == 0) {
    port_ = impl_->server.bind_to_any_port(host);
  } else {
    port_ = impl_->server.bind_to_port(host, port) ? port : -1;
  }
  if (port_ < 0) throw Error("cannot bind " + host);
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
}

BackgroundServer::~BackgroundServer() {
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace afl::service
