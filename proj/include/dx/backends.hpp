#pragma once

#include <chrono>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "dx/judge.hpp"

namespace httplib {
class Server;
}

namespace dx {

enum class Role { kInterpreter, kReasoner, kJudge, kExamOracle };
std::string_view to_string(Role role);
Role parse_role(std::string_view text);  // ContractError
inline constexpr Role kAllRoles[] = {Role::kInterpreter, Role::kReasoner, Role::kJudge, Role::kExamOracle};

inline constexpr std::chrono::milliseconds kLiveTimeout{120'000};
inline constexpr std::chrono::milliseconds kTestTimeout{1'000};

struct BackendEndpoint {
  Role role = Role::kReasoner;
  std::string base_url;  // "http://host:port"
  std::string token;
  std::chrono::milliseconds timeout = kLiveTimeout;
  int retry_budget = 2;
  std::chrono::milliseconds backoff{200};  // first retry delay, doubled per retry

  void validate() const;  // ConfigError
};

struct BackendRequest {
  Role role = Role::kReasoner;
  std::string mode;  // interpreter: "general" | "icl"
  std::string prompt;
  std::vector<std::string> images;      // query RoI refs
  std::vector<std::string> references;  // ICL reference image ids
  nlohmann::json metadata = nlohmann::json::object();
};

struct BackendResponse {
  std::string text;
  nlohmann::json usage = nlohmann::json::object();
};

nlohmann::json to_json(const BackendRequest& r);
BackendRequest request_from_json(const nlohmann::json& j);  // FormatError

// Interpreter requests: icl needs references, general forbids them.
void validate_interpreter_request(const BackendRequest& r);  // ContractError

class Backend {
 public:
  virtual ~Backend() = default;
  virtual BackendResponse call(const BackendRequest& request) = 0;
  virtual std::string id() const = 0;
};

// JSON over HTTP: POST {base_url}/v1/{role}. Safe for concurrent use.
class HttpBackend final : public Backend {
 public:
  explicit HttpBackend(BackendEndpoint endpoint);
  BackendResponse call(const BackendRequest& request) override;
  std::string id() const override;
  const BackendEndpoint& endpoint() const { return endpoint_; }
  // Attempts made by the most recent call on this thread.
  static int last_attempts();

 private:
  BackendEndpoint endpoint_;
};

// Ordered script of responses per role, consumed strictly in order. Entries with
// a "match" object are standing rules: a request whose mode/metadata carry every
// matched field gets that response without consuming the queue. The exam oracle
// may answer from a table keyed by exam or marker name.
class MockScript {
 public:
  struct Entry {
    std::string response;
    int status = 200;
  };
  struct Rule {
    Role role;
    nlohmann::json match;
    Entry entry;
  };
  struct Reply {
    int status = 200;
    std::string body;  // response text or diagnostic body
  };

  MockScript() = default;
  MockScript(MockScript&& other) noexcept;
  static MockScript from_json(const nlohmann::json& j);  // FormatError
  static MockScript load(const std::filesystem::path& path);

  void push(Role role, std::string response, int status = 200);
  void add_rule(Role role, nlohmann::json match, std::string response);
  void set_exam_table(std::map<std::string, std::string> table);
  const std::map<std::string, std::string>& exam_table() const { return exam_table_; }

  Reply answer(const BackendRequest& request);

  std::vector<BackendRequest> requests() const;
  std::size_t consumed(Role role) const;
  std::size_t remaining(Role role) const;

 private:
  mutable std::mutex mu_;
  std::map<Role, std::deque<Entry>> queues_;
  std::map<Role, std::size_t> consumed_;
  std::vector<Rule> rules_;
  std::map<std::string, std::string> exam_table_;
  std::vector<BackendRequest> log_;
};

// Renders table-driven exam results for the requested exams, one "name: result"
// line per resolved marker, "name: not available" otherwise.
std::string exam_results_from_table(const std::vector<std::string>& exams,
                                    const std::map<std::string, std::string>& table);

// In-process backend answering from a shared script with the server's semantics.
class ScriptedBackend final : public Backend {
 public:
  ScriptedBackend(Role role, std::shared_ptr<MockScript> script) : role_(role), script_(std::move(script)) {}
  BackendResponse call(const BackendRequest& request) override;
  std::string id() const override;

 private:
  Role role_;
  std::shared_ptr<MockScript> script_;
};

// HTTP server speaking the wire protocol from a script. Past the end of a role's
// script it answers 409 with a diagnostic body.
class MockServer {
 public:
  explicit MockServer(std::shared_ptr<MockScript> script, std::string host = "127.0.0.1", int port = 0);
  ~MockServer();
  MockServer(const MockServer&) = delete;
  MockServer& operator=(const MockServer&) = delete;

  int port() const { return port_; }
  std::string base_url() const;
  MockScript& script() { return *script_; }
  void stop();

 private:
  std::shared_ptr<MockScript> script_;
  std::unique_ptr<httplib::Server> server_;
  std::thread thread_;
  int port_ = 0;
};

// Judge role over the wire: the response text carries a JSON verdict
// {"match_position": n|null, "exam_quality": "...", "hacking": bool}.
class RemoteJudge final : public Judge {
 public:
  explicit RemoteJudge(std::shared_ptr<Backend> backend) : backend_(std::move(backend)) {}
  JudgeVerdict judge(const JudgeRequest& request) override;

 private:
  std::shared_ptr<Backend> backend_;
};

JudgeVerdict verdict_from_json(const nlohmann::json& j);  // FormatError
nlohmann::json to_json(const JudgeVerdict& v);

// One backend per role.
struct BackendSet {
  std::map<Role, std::shared_ptr<Backend>> by_role;
  Backend& at(Role role) const;  // ConfigError when missing
  bool has(Role role) const { return by_role.count(role) > 0; }

  static BackendSet scripted(std::shared_ptr<MockScript> script);
  static BackendSet http(const std::vector<BackendEndpoint>& endpoints);
};

}  // namespace dx
