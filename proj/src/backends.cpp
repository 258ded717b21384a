#include "dx/backends.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>

#include <httplib.h>

#include "dx/errors.hpp"

namespace dx {

using nlohmann::json;

namespace {

thread_local int t_last_attempts = 0;

std::vector<std::string> tokens(std::string_view s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    const auto u = static_cast<unsigned char>(c);
    if (std::isalnum(u) || c == '-') {
      cur += static_cast<char>(std::tolower(u));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

bool iequals(std::string_view a, std::string_view b) {
  return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin(), [](char x, char y) {
           return std::tolower(static_cast<unsigned char>(x)) == std::tolower(static_cast<unsigned char>(y));
         });
}

// A rule matches when every field of `match` equals the request's mode or the
// same-named metadata field.
bool rule_matches(const json& match, const BackendRequest& r) {
  for (const auto& [key, value] : match.items()) {
    if (key == "mode") {
      if (!value.is_string() || value.get<std::string>() != r.mode) return false;
      continue;
    }
    if (!r.metadata.contains(key) || r.metadata.at(key) != value) return false;
  }
  return true;
}

}  // namespace

std::string_view to_string(Role role) {
  switch (role) {
    case Role::kInterpreter: return "interpreter";
    case Role::kReasoner: return "reasoner";
    case Role::kJudge: return "judge";
    case Role::kExamOracle: return "exam_oracle";
  }
  return "?";
}

Role parse_role(std::string_view text) {
  for (Role r : kAllRoles) {
    if (to_string(r) == text) return r;
  }
  throw ContractError("unknown backend role '" + std::string(text) + "'");
}

void BackendEndpoint::validate() const {
  if (timeout.count() <= 0) throw ConfigError("backend timeout must be positive");
  if (retry_budget < 0) throw ConfigError("backend retry budget must be non-negative");
  if (base_url.empty()) throw ConfigError("backend endpoint for " + std::string(to_string(role)) + " has no URL");
  if (base_url.rfind("http://", 0) != 0 && base_url.rfind("https://", 0) != 0) {
    throw ConfigError("backend URL '" + base_url + "' must start with http:// or https://");
  }
}

json to_json(const BackendRequest& r) {
  return {{"role", to_string(r.role)}, {"mode", r.mode},           {"prompt", r.prompt},
          {"images", r.images},        {"references", r.references}, {"metadata", r.metadata}};
}

BackendRequest request_from_json(const json& j) {
  try {
    BackendRequest r;
    r.role = parse_role(j.at("role").get<std::string>());
    r.mode = j.value("mode", "");
    r.prompt = j.value("prompt", "");
    r.images = j.value("images", std::vector<std::string>{});
    r.references = j.value("references", std::vector<std::string>{});
    r.metadata = j.value("metadata", json::object());
    return r;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed backend request: ") + e.what());
  } catch (const ContractError& e) {
    throw FormatError(e.what());
  }
}

void validate_interpreter_request(const BackendRequest& r) {
  if (r.mode == "icl") {
    if (r.references.empty()) throw ContractError("icl interpreter request without reference images");
  } else if (r.mode == "general") {
    if (!r.references.empty()) throw ContractError("general interpreter request must not carry references");
  } else {
    throw ContractError("interpreter mode must be general or icl, got '" + r.mode + "'");
  }
}

// ---- HTTP client ----

HttpBackend::HttpBackend(BackendEndpoint endpoint) : endpoint_(std::move(endpoint)) { endpoint_.validate(); }

std::string HttpBackend::id() const { return std::string(to_string(endpoint_.role)) + "@" + endpoint_.base_url; }

int HttpBackend::last_attempts() { return t_last_attempts; }

BackendResponse HttpBackend::call(const BackendRequest& request) {
  BackendRequest req = request;
  req.role = endpoint_.role;
  const std::string body = to_json(req).dump(-1, ' ', false, json::error_handler_t::replace);
  const std::string path = "/v1/" + std::string(to_string(endpoint_.role));

  httplib::Client cli(endpoint_.base_url);
  const auto secs = std::chrono::duration_cast<std::chrono::seconds>(endpoint_.timeout);
  const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(endpoint_.timeout - secs);
  cli.set_connection_timeout(secs.count(), usecs.count());
  cli.set_read_timeout(secs.count(), usecs.count());
  cli.set_write_timeout(secs.count(), usecs.count());
  if (!endpoint_.token.empty()) cli.set_bearer_token_auth(endpoint_.token);

  auto delay = endpoint_.backoff;
  std::string last_error;
  for (int attempt = 1;; ++attempt) {
    t_last_attempts = attempt;
    auto res = cli.Post(path, body, "application/json");
    if (res) {
      if (res->status < 200 || res->status >= 300) throw BackendRejected(res->status, res->body);
      try {
        const auto j = json::parse(res->body);
        return {j.at("text").get<std::string>(), j.value("usage", json::object())};
      } catch (const json::exception& e) {
        throw BackendRejected(res->status, "unparseable response body: " + res->body);
      }
    }
    last_error = httplib::to_string(res.error());
    if (attempt > endpoint_.retry_budget) {
      throw BackendUnavailable(id() + " unreachable after " + std::to_string(attempt) + " attempts: " + last_error,
                               attempt);
    }
    std::this_thread::sleep_for(delay);
    delay *= 2;
  }
}

// ---- script ----

MockScript::MockScript(MockScript&& other) noexcept {
  std::lock_guard lock(other.mu_);
  queues_ = std::move(other.queues_);
  consumed_ = std::move(other.consumed_);
  rules_ = std::move(other.rules_);
  exam_table_ = std::move(other.exam_table_);
  log_ = std::move(other.log_);
}

MockScript MockScript::from_json(const json& j) {
  MockScript s;
  try {
    const json& entries = j.is_object() ? j.at("script") : j;
    if (!entries.is_array()) throw FormatError("script must be a JSON array");
    if (j.is_object() && j.contains("exam_table")) {
      s.exam_table_ = j.at("exam_table").get<std::map<std::string, std::string>>();
    }
    for (const auto& e : entries) {
      const Role role = parse_role(e.at("role").get<std::string>());
      if (e.contains("table")) {
        for (const auto& [k, v] : e.at("table").items()) s.exam_table_[k] = v.get<std::string>();
        continue;
      }
      Entry entry{e.value("response", ""), e.value("status", 200)};
      if (e.contains("match")) {
        s.rules_.push_back({role, e.at("match"), std::move(entry)});
      } else {
        s.queues_[role].push_back(std::move(entry));
      }
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed script: ") + e.what());
  } catch (const ContractError& e) {
    throw FormatError(std::string("malformed script: ") + e.what());
  }
  return s;
}

MockScript MockScript::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw NotFoundError("cannot open script " + path.string());
  try {
    return from_json(json::parse(in));
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void MockScript::push(Role role, std::string response, int status) {
  std::lock_guard lock(mu_);
  queues_[role].push_back({std::move(response), status});
}

void MockScript::add_rule(Role role, json match, std::string response) {
  std::lock_guard lock(mu_);
  rules_.push_back({role, std::move(match), {std::move(response), 200}});
}

void MockScript::set_exam_table(std::map<std::string, std::string> table) {
  std::lock_guard lock(mu_);
  exam_table_ = std::move(table);
}

MockScript::Reply MockScript::answer(const BackendRequest& request) {
  std::lock_guard lock(mu_);
  log_.push_back(request);
  for (const auto& rule : rules_) {
    if (rule.role == request.role && rule_matches(rule.match, request)) return {rule.entry.status, rule.entry.response};
  }
  auto& q = queues_[request.role];
  if (!q.empty()) {
    Entry e = std::move(q.front());
    q.pop_front();
    ++consumed_[request.role];
    return {e.status, std::move(e.response)};
  }
  if (request.role == Role::kExamOracle && !exam_table_.empty()) {
    const auto exams = request.metadata.value("exams", std::vector<std::string>{});
    return {200, exam_results_from_table(exams, exam_table_)};
  }
  return {409, "script exhausted for role " + std::string(to_string(request.role)) + " after " +
                   std::to_string(consumed_[request.role]) + " responses"};
}

std::vector<BackendRequest> MockScript::requests() const {
  std::lock_guard lock(mu_);
  return log_;
}

std::size_t MockScript::consumed(Role role) const {
  std::lock_guard lock(mu_);
  auto it = consumed_.find(role);
  return it == consumed_.end() ? 0 : it->second;
}

std::size_t MockScript::remaining(Role role) const {
  std::lock_guard lock(mu_);
  auto it = queues_.find(role);
  return it == queues_.end() ? 0 : it->second.size();
}

std::string exam_results_from_table(const std::vector<std::string>& exams,
                                    const std::map<std::string, std::string>& table) {
  std::vector<std::pair<std::vector<std::string>, const std::pair<const std::string, std::string>*>> keys;
  for (const auto& kv : table) keys.emplace_back(tokens(kv.first), &kv);

  std::string out;
  auto emit = [&](std::string_view name, std::string_view result) {
    if (!out.empty()) out += '\n';
    out += std::string(name) + ": " + std::string(result);
  };
  for (const auto& exam : exams) {
    if (auto it = std::find_if(table.begin(), table.end(), [&](const auto& kv) { return iequals(kv.first, exam); });
        it != table.end()) {
      emit(it->first, it->second);
      continue;
    }
    const auto words = tokens(exam);
    bool any = false;
    for (std::size_t pos = 0; pos < words.size();) {
      std::size_t best_len = 0;
      const std::pair<const std::string, std::string>* best = nullptr;
      for (const auto& [kt, kv] : keys) {
        if (kt.empty() || kt.size() <= best_len || pos + kt.size() > words.size()) continue;
        if (std::equal(kt.begin(), kt.end(), words.begin() + static_cast<std::ptrdiff_t>(pos))) {
          best_len = kt.size();
          best = kv;
        }
      }
      if (best) {
        emit(best->first, best->second);
        any = true;
        pos += best_len;
      } else {
        ++pos;
      }
    }
    if (!any) emit(exam, "not available");
  }
  return out;
}

BackendResponse ScriptedBackend::call(const BackendRequest& request) {
  BackendRequest req = request;
  req.role = role_;
  auto reply = script_->answer(req);
  if (reply.status < 200 || reply.status >= 300) throw BackendRejected(reply.status, reply.body);
  return {std::move(reply.body), json::object()};
}

std::string ScriptedBackend::id() const { return std::string(to_string(role_)) + "@script"; }

// ---- mock server ----

MockServer::MockServer(std::shared_ptr<MockScript> script, std::string host, int port)
    : script_(std::move(script)), server_(std::make_unique<httplib::Server>()) {
  server_->Post(R"(/v1/([a-z_]+))", [this](const httplib::Request& req, httplib::Response& res) {
    BackendRequest r;
    try {
      r = request_from_json(json::parse(req.body));
      r.role = parse_role(req.matches[1].str());
    } catch (const std::exception& e) {
      res.status = 400;
      res.set_content(std::string("bad request: ") + e.what(), "text/plain");
      return;
    }
    auto reply = script_->answer(r);
    res.status = reply.status;
    if (reply.status >= 200 && reply.status < 300) {
      res.set_content(json{{"text", reply.body}, {"usage", json::object()}}.dump(-1, ' ', false, json::error_handler_t::replace), "application/json");
    } else {
      res.set_content(reply.body, "text/plain");
    }
  });
  port_ = port == 0 ? server_->bind_to_any_port(host) : (server_->bind_to_port(host, port) ? port : -1);
  if (port_ <= 0) throw BackendUnavailable("mock server cannot bind " + host, 1);
  thread_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
}

MockServer::~MockServer() { stop(); }

std::string MockServer::base_url() const { return "http://127.0.0.1:" + std::to_string(port_); }

void MockServer::stop() {
  if (server_) server_->stop();
  if (thread_.joinable()) thread_.join();
}

// ---- judge over the wire ----

json to_json(const JudgeVerdict& v) {
  return {{"match_position", v.match_position ? json(*v.match_position) : json(nullptr)},
          {"exam_quality", to_string(v.exam_quality)},
          {"hacking", v.hacking}};
}

JudgeVerdict verdict_from_json(const json& j) {
  try {
    JudgeVerdict v;
    if (j.contains("match_position") && !j.at("match_position").is_null()) {
      v.match_position = j.at("match_position").get<std::size_t>();
    }
    v.exam_quality = parse_exam_quality(j.value("exam_quality", "neutral"));
    v.hacking = j.value("hacking", false);
    return v;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed judge verdict: ") + e.what());
  } catch (const ContractError& e) {
    throw FormatError(e.what());
  }
}

JudgeVerdict RemoteJudge::judge(const JudgeRequest& request) {
  BackendRequest r;
  r.role = Role::kJudge;
  r.metadata = {{"diagnoses", request.diagnoses}, {"exams", request.exams}, {"truth", request.truth}};
  r.prompt = r.metadata.dump();
  const auto resp = backend_->call(r);
  try {
    auto v = verdict_from_json(json::parse(resp.text));
    if (v.match_position && (*v.match_position == 0 || *v.match_position > request.diagnoses.size())) {
      throw FormatError("judge match position outside the diagnosis list");
    }
    return v;
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("judge reply is not JSON: ") + e.what());
  }
}

Backend& BackendSet::at(Role role) const {
  auto it = by_role.find(role);
  if (it == by_role.end() || !it->second) {
    throw ConfigError("no backend configured for role " + std::string(to_string(role)));
  }
  return *it->second;
}

BackendSet BackendSet::scripted(std::shared_ptr<MockScript> script) {
  BackendSet s;
  for (Role r : kAllRoles) s.by_role[r] = std::make_shared<ScriptedBackend>(r, script);
  return s;
}

BackendSet BackendSet::http(const std::vector<BackendEndpoint>& endpoints) {
  BackendSet s;
  for (const auto& e : endpoints) s.by_role[e.role] = std::make_shared<HttpBackend>(e);
  return s;
}

}  // namespace dx
