#pragma once

#include <condition_variable>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>

#include <nlohmann/json.hpp>

#include "dx/protocol.hpp"

namespace httplib {
class Server;
}

namespace dx {

// Picks the backends for a new session from its create request. The default
// uses an inline "script" when present, else the configured live set.
using BackendFactory = std::function<BackendSet(const nlohmann::json& request)>;

struct ServiceOptions {
  SessionConfig session;
  const EngineResources* resources = nullptr;
  std::optional<BackendSet> live;
  BackendFactory factory;                         // overrides the default choice
  std::string token;                              // empty: no auth
  std::optional<std::filesystem::path> log_dir;   // <session>.jsonl per session
};

// HTTP front end over concurrently running sessions.
//
//   POST /v1/sessions                 create and start; 201 + state
//   GET  /v1/sessions                 ids
//   GET  /v1/sessions/{id}            state
//   POST /v1/sessions/{id}/lock       {"client"}; 423 when held by another
//   DELETE /v1/sessions/{id}/lock     {"client"}
//   POST /v1/sessions/{id}/exams      {"answers", "client"?}; 409 unless awaiting evidence
//   POST /v1/sessions/{id}/advance    oracle round or conclusion; 409 when finished
//   GET  /v1/sessions/{id}/events     SSE of the session log from ?from=<seq>
//   GET  /v1/sessions/{id}/log        JSONL session log
class SessionService {
 public:
  explicit SessionService(ServiceOptions options);
  ~SessionService();
  SessionService(const SessionService&) = delete;
  SessionService& operator=(const SessionService&) = delete;

  // Binds and serves on a background thread; returns the bound port.
  int start(const std::string& host = "127.0.0.1", int port = 0);
  // Serves on the calling thread until stop().
  void listen(const std::string& host, int port);
  void stop();
  int port() const { return port_; }

  // Direct calls behind the HTTP routes; status plus JSON body.
  std::pair<int, nlohmann::json> create(const nlohmann::json& request);
  std::pair<int, nlohmann::json> state(const std::string& id);
  std::pair<int, nlohmann::json> submit(const std::string& id, const nlohmann::json& body);
  std::pair<int, nlohmann::json> advance(const std::string& id);
  std::pair<int, nlohmann::json> lock(const std::string& id, const std::string& client, bool acquire);

 private:
  struct Entry {
    std::mutex mu;
    std::condition_variable cv;
    std::unique_ptr<Session> session;
    std::string holder;
  };
  std::shared_ptr<Entry> find(const std::string& id);
  void persist(Entry& e);
  void routes();

  ServiceOptions opts_;
  std::unique_ptr<httplib::Server> server_;
  std::thread thread_;
  int port_ = 0;
  std::mutex mu_;
  std::map<std::string, std::shared_ptr<Entry>> sessions_;
  std::size_t counter_ = 0;
};

}  // namespace dx
