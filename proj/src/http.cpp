#include "rceg/http.hpp"

#include <fstream>
#include <sstream>

#include "httplib.h"
#include "rceg/metrics.hpp"
#include "rceg/runs.hpp"

namespace rceg {

int http_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument:
    case ErrorCode::kValidation:
    case ErrorCode::kParse:
    case ErrorCode::kMissingField:
      return 400;
    case ErrorCode::kLengthOverflow:
      return 422;
    case ErrorCode::kUnavailable:
      return 503;
    default:
      return 500;
  }
}

nlohmann::json error_body(std::string_view code, std::string_view message) {
  return {{"error", {{"code", code}, {"message", message}}}};
}

namespace {

ApiResult error_result(int status, std::string_view code, std::string_view message) {
  return {status, dump_text(error_body(code, message))};
}

}  // namespace

ApiRouter::ApiRouter(std::shared_ptr<const GenerationService> service, std::filesystem::path runs_root)
    : service_(std::move(service)), runs_root_(std::move(runs_root)) {}

ApiResult ApiRouter::handle(std::string_view method, std::string_view path,
                            std::string_view body) const {
  try {
    if (path == "/api/generate") {
      if (method != "POST") return error_result(405, "method_not_allowed", "use POST");
      return generate(body);
    }
    if (path == "/api/health") {
      if (method != "GET") return error_result(405, "method_not_allowed", "use GET");
      return health();
    }
    constexpr std::string_view prefix = "/api/runs/";
    constexpr std::string_view suffix = "/report";
    if (path.starts_with(prefix) && path.ends_with(suffix) &&
        path.size() > prefix.size() + suffix.size()) {
      if (method != "GET") return error_result(405, "method_not_allowed", "use GET");
      return run_report(path.substr(prefix.size(), path.size() - prefix.size() - suffix.size()));
    }
    return error_result(404, "not_found", "no route for " + std::string(path));
  } catch (const Error& e) {
    return error_result(http_status(e.code()), to_string(e.code()), e.what());
  } catch (const std::exception& e) {
    return error_result(500, "internal_error", e.what());
  }
}

ApiResult ApiRouter::generate(std::string_view body) const {
  if (!service_ || !service_->ready()) {
    return error_result(503, to_string(ErrorCode::kUnavailable), "no model checkpoint is loaded");
  }
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(body);
  } catch (const nlohmann::json::exception& e) {
    return error_result(400, to_string(ErrorCode::kParse), e.what());
  }
  const auto request = request_from_json(j);
  return {200, dump_text(to_json(service_->handle_generate(request)))};
}

ApiResult ApiRouter::health() const {
  nlohmann::json j{{"version", kServiceVersion}};
  const bool ready = service_ && service_->ready();
  j["status"] = ready ? "ok" : "unavailable";
  j["checkpoint_id"] = ready ? nlohmann::json(service_->checkpoint_id()) : nullptr;
  return {200, j.dump()};
}

ApiResult ApiRouter::run_report(std::string_view id) const {
  const auto dir = resolve_run(runs_root_, id);
  const auto path = dir / "metrics.tsv";
  std::ifstream in(path);
  if (!in) return error_result(404, "not_found", "run '" + std::string(id) + "' has no metric report");
  std::ostringstream buf;
  buf << in.rdbuf();
  auto j = report_to_json(parse_report(buf.str()));
  j["run_id"] = std::string(id);
  return {200, j.dump()};
}

HttpServer::HttpServer(ApiRouter router)
    : router_(std::move(router)), server_(std::make_unique<httplib::Server>()) {
  auto reply = [this](const httplib::Request& req, httplib::Response& res) {
    const auto result = router_.handle(req.method, req.path, req.body);
    res.status = result.status;
    res.set_content(result.body, "application/json");
  };
  server_->set_default_headers({{"Access-Control-Allow-Origin", "*"},
                                {"Access-Control-Allow-Headers", "Content-Type"},
                                {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"}});
  server_->Get(R"(/api/.*)", reply);
  server_->Post(R"(/api/.*)", reply);
  server_->Options(R"(/api/.*)", [](const httplib::Request&, httplib::Response& res) {
    res.status = 204;
  });
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind(const std::string& host, int port) {
  if (port == 0) {
    const int bound = server_->bind_to_any_port(host);
    if (bound < 0) throw Error(ErrorCode::kIo, "cannot bind " + host);
    return bound;
  }
  if (!server_->bind_to_port(host, port)) {
    throw Error(ErrorCode::kIo, "cannot bind " + host + ":" + std::to_string(port));
  }
  return port;
}

bool HttpServer::serve() { return server_->listen_after_bind(); }

void HttpServer::stop() {
  if (server_ && server_->is_running()) server_->stop();
}

void HttpServer::wait_until_ready() const { server_->wait_until_ready(); }

}  // namespace rceg
