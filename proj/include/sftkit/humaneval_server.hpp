#pragma once

// HTTP front end for HumanEvalStore.
//
//   GET  /api/next-item?annotator=ID  200 item | 204 nothing left
//   POST /api/rating                  200 ack | 400 bad value | 403 | 404 | 409
//   GET  /api/aggregates              200 report
//   GET  /api/progress                200 counts
//
// Error bodies are {"error": message, "field": name?}.

#include <string>
#include <thread>

#include "httplib.h"
#include "sftkit/humaneval.hpp"

namespace sftkit {

struct ServerOptions {
  std::string host = "127.0.0.1";
  int port = 8090;  // 0 binds an ephemeral port
  std::optional<std::filesystem::path> static_dir;  // built annotator UI, served at /
};

class HumanEvalServer {
 public:
  HumanEvalServer(HumanEvalStore& store, ServerOptions opts = {}) : store_(store), opts_(std::move(opts)) { routes(); }
  ~HumanEvalServer() { stop(); }

  HumanEvalServer(const HumanEvalServer&) = delete;
  HumanEvalServer& operator=(const HumanEvalServer&) = delete;

  // Binds and serves on a background thread; returns the bound port.
  int start() {
    if (opts_.port == 0) {
      port_ = server_.bind_to_any_port(opts_.host);
    } else {
      port_ = server_.bind_to_port(opts_.host, opts_.port) ? opts_.port : -1;
    }
    if (port_ < 0) throw IoError("humaneval", "cannot bind " + opts_.host + ":" + std::to_string(opts_.port));
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    return port_;
  }

  // Serves on the calling thread until stop() is called elsewhere.
  void run() {
    if (!server_.listen(opts_.host, opts_.port)) {
      throw IoError("humaneval", "cannot listen on " + opts_.host + ":" + std::to_string(opts_.port));
    }
  }

  void stop() {
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }

  int port() const { return port_; }
  httplib::Server& raw() { return server_; }

 private:
  static void send_json(httplib::Response& res, int status, const ordered_json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  static void send_error(httplib::Response& res, int status, const std::string& msg, const std::string& field = {}) {
    ordered_json j{{"error", msg}};
    if (!field.empty()) j["field"] = field;
    send_json(res, status, j);
  }

  void routes() {
    server_.set_default_headers({{"Access-Control-Allow-Origin", "*"}});
    server_.Options(R"(/api/.*)", [](const httplib::Request&, httplib::Response& res) {
      res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
      res.set_header("Access-Control-Allow-Headers", "Content-Type");
      res.status = 204;
    });

    server_.Get("/api/next-item", [this](const httplib::Request& req, httplib::Response& res) {
      const std::string annotator = req.get_param_value("annotator");
      if (annotator.empty()) return send_error(res, 400, "annotator query parameter is required", "annotator");
      auto item = store_.next_item(annotator);
      if (!item) {
        res.status = 204;
        return;
      }
      send_json(res, 200, annotator_view(*item));
    });

    server_.Post("/api/rating", [this](const httplib::Request& req, httplib::Response& res) {
      json body;
      try {
        body = json::parse(req.body);
      } catch (const json::parse_error& e) {
        return send_error(res, 400, std::string("malformed JSON: ") + e.what());
      }
      try {
        const auto stored = store_.record_rating(rating_from_json(body));
        send_json(res, 200, {{"status", "ok"}, {"item_id", stored.item_id}, {"timestamp", stored.timestamp}});
      } catch (const ValidationError& e) {
        send_error(res, 400, e.what(), e.field());
      } catch (const NotFoundError& e) {
        send_error(res, 404, e.what(), "item_id");
      } catch (const AssignmentError& e) {
        send_error(res, 403, e.what());
      } catch (const ConflictError& e) {
        send_error(res, 409, e.what());
      } catch (const Error& e) {
        send_error(res, 500, e.what());
      }
    });

    server_.Get("/api/aggregates", [this](const httplib::Request&, httplib::Response& res) {
      send_json(res, 200, store_.aggregates().to_json());
    });

    server_.Get("/api/progress", [this](const httplib::Request&, httplib::Response& res) {
      send_json(res, 200, store_.progress().to_json());
    });

    if (opts_.static_dir) {
      if (!server_.set_mount_point("/", opts_.static_dir->string())) {
        throw ValidationError("humaneval", "static directory not found: " + opts_.static_dir->string(), "static_dir");
      }
    }
  }

  HumanEvalStore& store_;
  ServerOptions opts_;
  httplib::Server server_;
  std::thread thread_;
  int port_ = -1;
};

}  // namespace sftkit
