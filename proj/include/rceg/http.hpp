#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <string_view>

#include "json.hpp"
#include "rceg/errors.hpp"
#include "rceg/service.hpp"

namespace httplib {
class Server;
}

namespace rceg {

int http_status(ErrorCode code);
/// {"error": {"code": "<name>", "message": "..."}}
nlohmann::json error_body(std::string_view code, std::string_view message);

struct ApiResult {
  int status = 200;
  std::string body;
};

/// Transport-free request dispatch for the JSON API.
class ApiRouter {
 public:
  ApiRouter(std::shared_ptr<const GenerationService> service, std::filesystem::path runs_root);

  ApiResult handle(std::string_view method, std::string_view path, std::string_view body) const;

 private:
  ApiResult generate(std::string_view body) const;
  ApiResult health() const;
  ApiResult run_report(std::string_view id) const;

  std::shared_ptr<const GenerationService> service_;
  std::filesystem::path runs_root_;
};

class HttpServer {
 public:
  explicit HttpServer(ApiRouter router);
  ~HttpServer();
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  /// Binds the socket; port 0 picks a free port. Returns the bound port.
  int bind(const std::string& host, int port);
  /// Serves until stop() is called.
  bool serve();
  void stop();
  void wait_until_ready() const;

 private:
  ApiRouter router_;
  std::unique_ptr<httplib::Server> server_;
};

}  // namespace rceg
