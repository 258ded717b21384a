#include "dx/service.hpp"

#include <httplib.h>

#include <chrono>
#include <fstream>

#include "dx/errors.hpp"

namespace dx {

using nlohmann::json;

namespace {

json error_body(const std::string& msg) { return {{"error", msg}}; }

void reply(httplib::Response& res, const std::pair<int, json>& r) {
  res.status = r.first;
  res.set_content(r.second.dump(-1, ' ', false, json::error_handler_t::replace), "application/json");
}

}  // namespace

SessionService::SessionService(ServiceOptions options) : opts_(std::move(options)) {}

SessionService::~SessionService() { stop(); }

std::shared_ptr<SessionService::Entry> SessionService::find(const std::string& id) {
  std::lock_guard lk(mu_);
  auto it = sessions_.find(id);
  return it == sessions_.end() ? nullptr : it->second;
}

void SessionService::persist(Entry& e) {
  if (!opts_.log_dir) return;
  std::filesystem::create_directories(*opts_.log_dir);
  std::ofstream out(*opts_.log_dir / (e.session->id() + ".jsonl"), std::ios::binary | std::ios::trunc);
  out << e.session->log_text();
}

std::pair<int, json> SessionService::create(const json& request) {
  try {
    if (!request.is_object() || !request.contains("case")) return {400, error_body("missing \"case\"")};
    const auto& c = request.at("case");
    CaseInput input{c.value("case_id", ""), c.value("case_info", ""), c.value("slide_id", "")};
    if (input.case_info.empty()) return {400, error_body("case_info is required")};
    SessionConfig cfg = opts_.session;
    if (request.contains("config")) cfg.merge(request.at("config"));

    BackendSet backends;
    if (opts_.factory) {
      backends = opts_.factory(request);
    } else if (request.contains("script")) {
      backends = BackendSet::scripted(std::make_shared<MockScript>(MockScript::from_json(request.at("script"))));
    } else if (opts_.live) {
      backends = *opts_.live;
    } else {
      return {400, error_body("no backends configured and no script supplied")};
    }

    std::string id;
    auto entry = std::make_shared<Entry>();
    {
      std::lock_guard lk(mu_);
      id = request.value("session_id", "");
      if (id.empty()) id = (input.case_id.empty() ? std::string("session") : input.case_id) + "-" + std::to_string(++counter_);
      if (sessions_.count(id)) return {409, error_body("session " + id + " already exists")};
      sessions_[id] = entry;
    }
    static const EngineResources kNoResources;
    std::lock_guard lk(entry->mu);
    Entry* raw = entry.get();
    entry->session = std::make_unique<Session>(id, input, cfg, opts_.resources ? *opts_.resources : kNoResources,
                                               std::move(backends), [raw](const json&) { raw->cv.notify_all(); });
    entry->session->start();
    persist(*entry);
    return {201, entry->session->state_json()};
  } catch (const Error& e) {
    return {400, error_body(e.what())};
  } catch (const json::exception& e) {
    return {400, error_body(e.what())};
  }
}

std::pair<int, json> SessionService::state(const std::string& id) {
  auto e = find(id);
  if (!e) return {404, error_body("unknown session " + id)};
  std::lock_guard lk(e->mu);
  json s = e->session->state_json();
  s["lock_holder"] = e->holder.empty() ? json(nullptr) : json(e->holder);
  return {200, s};
}

std::pair<int, json> SessionService::lock(const std::string& id, const std::string& client, bool acquire) {
  auto e = find(id);
  if (!e) return {404, error_body("unknown session " + id)};
  if (client.empty()) return {400, error_body("client is required")};
  std::lock_guard lk(e->mu);
  if (acquire) {
    if (!e->holder.empty() && e->holder != client) return {423, error_body("submit lock held by " + e->holder)};
    e->holder = client;
  } else {
    if (e->holder != client) return {423, error_body("client does not hold the submit lock")};
    e->holder.clear();
  }
  return {200, {{"session_id", id}, {"holder", e->holder.empty() ? json(nullptr) : json(e->holder)}}};
}

std::pair<int, json> SessionService::submit(const std::string& id, const json& body) {
  auto e = find(id);
  if (!e) return {404, error_body("unknown session " + id)};
  if (!body.is_object() || !body.contains("answers") || !body.at("answers").is_object()) {
    return {400, error_body("\"answers\" must be an object of exam -> result")};
  }
  std::map<std::string, std::string> answers;
  for (const auto& [k, v] : body.at("answers").items()) {
    if (!v.is_string()) return {400, error_body("answer for " + k + " must be text")};
    answers[k] = v.get<std::string>();
  }
  if (answers.empty()) return {400, error_body("empty submission")};
  std::lock_guard lk(e->mu);
  const std::string client = body.value("client", "");
  if (!e->holder.empty() && e->holder != client) return {423, error_body("submit lock held by " + e->holder)};
  if (!e->session->awaiting_evidence()) return {409, error_body("session is not awaiting examination results")};
  try {
    e->session->execute(answers);
    if (!e->session->finished()) e->session->conclude();
  } catch (const SessionError& ex) {
    return {409, error_body(ex.what())};
  }
  persist(*e);
  return {200, e->session->state_json()};
}

std::pair<int, json> SessionService::advance(const std::string& id) {
  auto e = find(id);
  if (!e) return {404, error_body("unknown session " + id)};
  std::lock_guard lk(e->mu);
  auto& s = *e->session;
  if (s.finished()) return {409, error_body("session already finished")};
  try {
    if (s.awaiting_evidence()) s.execute();
    if (!s.finished() && s.stage() == Stage::kExecution) s.conclude();
  } catch (const SessionError& ex) {
    return {409, error_body(ex.what())};
  }
  persist(*e);
  return {200, s.state_json()};
}

void SessionService::routes() {
  auto& srv = *server_;
  srv.set_pre_routing_handler([this](const httplib::Request& req, httplib::Response& res) {
    if (opts_.token.empty() || req.path == "/v1/health") return httplib::Server::HandlerResponse::Unhandled;
    if (req.get_header_value("Authorization") == "Bearer " + opts_.token) {
      return httplib::Server::HandlerResponse::Unhandled;
    }
    reply(res, {401, error_body("missing or bad bearer token")});
    return httplib::Server::HandlerResponse::Handled;
  });
  srv.Get("/v1/health", [](const httplib::Request&, httplib::Response& res) {
    reply(res, {200, {{"status", "ok"}}});
  });
  srv.Post("/v1/sessions", [this](const httplib::Request& req, httplib::Response& res) {
    const auto body = json::parse(req.body, nullptr, false);
    if (body.is_discarded()) return reply(res, {400, error_body("body is not JSON")});
    reply(res, create(body));
  });
  srv.Get("/v1/sessions", [this](const httplib::Request&, httplib::Response& res) {
    json ids = json::array();
    {
      std::lock_guard lk(mu_);
      for (const auto& [id, _] : sessions_) ids.push_back(id);
    }
    reply(res, {200, {{"sessions", ids}}});
  });
  srv.Get(R"(/v1/sessions/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
    reply(res, state(req.matches[1]));
  });
  srv.Get(R"(/v1/sessions/([^/]+)/log)", [this](const httplib::Request& req, httplib::Response& res) {
    auto e = find(req.matches[1]);
    if (!e) return reply(res, {404, error_body("unknown session")});
    std::lock_guard lk(e->mu);
    res.set_content(e->session->log_text(), "application/x-ndjson");
  });
  auto lock_route = [this](bool acquire) {
    return [this, acquire](const httplib::Request& req, httplib::Response& res) {
      const auto body = json::parse(req.body, nullptr, false);
      std::string client = body.is_object() ? body.value("client", "") : "";
      if (client.empty()) client = req.get_param_value("client");
      reply(res, lock(req.matches[1], client, acquire));
    };
  };
  srv.Post(R"(/v1/sessions/([^/]+)/lock)", lock_route(true));
  srv.Delete(R"(/v1/sessions/([^/]+)/lock)", lock_route(false));
  srv.Post(R"(/v1/sessions/([^/]+)/exams)", [this](const httplib::Request& req, httplib::Response& res) {
    const auto body = json::parse(req.body, nullptr, false);
    if (body.is_discarded()) return reply(res, {400, error_body("body is not JSON")});
    reply(res, submit(req.matches[1], body));
  });
  srv.Post(R"(/v1/sessions/([^/]+)/advance)", [this](const httplib::Request& req, httplib::Response& res) {
    reply(res, advance(req.matches[1]));
  });
  srv.Get(R"(/v1/sessions/([^/]+)/events)", [this](const httplib::Request& req, httplib::Response& res) {
    auto e = find(req.matches[1]);
    if (!e) return reply(res, {404, error_body("unknown session")});
    std::size_t from = 0;
    if (req.has_param("from")) from = std::stoul(req.get_param_value("from"));
    if (req.has_header("Last-Event-ID")) from = std::stoul(req.get_header_value("Last-Event-ID")) + 1;
    auto next = std::make_shared<std::size_t>(from);
    res.set_chunked_content_provider("text/event-stream", [this, e, next](std::size_t, httplib::DataSink& sink) {
      std::unique_lock lk(e->mu);
      e->cv.wait_for(lk, std::chrono::milliseconds(250),
                     [&] { return e->session->events().size() > *next || e->session->finished(); });
      const auto& events = e->session->events();
      std::string chunk;
      for (; *next < events.size(); ++*next) {
        chunk += "id: " + std::to_string(*next) + "\nevent: " + events[*next].value("event", "message") +
                 "\ndata: " + events[*next].dump(-1, ' ', false, json::error_handler_t::replace) + "\n\n";
      }
      const bool done = e->session->finished();
      lk.unlock();
      if (chunk.empty() && !done) chunk = ": keep-alive\n\n";
      if (!chunk.empty() && !sink.write(chunk.data(), chunk.size())) return false;
      if (done || !server_ || !server_->is_running()) sink.done();
      return true;
    });
  });
  srv.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    try {
      std::rethrow_exception(ep);
    } catch (const std::exception& ex) {
      reply(res, {500, error_body(ex.what())});
    }
  });
}

int SessionService::start(const std::string& host, int port) {
  server_ = std::make_unique<httplib::Server>();
  routes();
  port_ = port == 0 ? server_->bind_to_any_port(host) : (server_->bind_to_port(host, port) ? port : -1);
  if (port_ < 0) throw ConfigError("cannot bind " + host + ":" + std::to_string(port));
  thread_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
  return port_;
}

void SessionService::listen(const std::string& host, int port) {
  server_ = std::make_unique<httplib::Server>();
  routes();
  port_ = port;
  if (!server_->listen(host, port)) throw ConfigError("cannot listen on " + host + ":" + std::to_string(port));
}

void SessionService::stop() {
  if (server_) server_->stop();
  if (thread_.joinable()) thread_.join();
}

}  // namespace dx
