#include "dx/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <cstdlib>

#include "dx/errors.hpp"

namespace dx {

namespace pt = boost::property_tree;
using nlohmann::json;

namespace {

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError(key + ": expected a boolean, got '" + v + "'");
}

long parse_int(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  long out = 0;
  try {
    out = std::stol(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw ConfigError(key + ": expected an integer, got '" + v + "'");
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw ConfigError(key + ": expected a number, got '" + v + "'");
  return out;
}

// One setter per dotted key; shared by the file and the environment.
void set_key(EngineConfig& c, const std::string& key, const std::string& v) {
  if (key == "engine.corpus") c.corpus = v;
  else if (key == "engine.toolkits") c.toolkits = v;
  else if (key == "engine.parallelism") {
    const auto n = parse_int(key, v);
    if (n < 1) throw ConfigError("engine.parallelism must be at least 1");
    c.parallelism = static_cast<std::size_t>(n);
  } else if (key == "engine.profile") c.profile = v;
  else if (key == "engine.seed") c.session.seed = static_cast<std::uint64_t>(parse_int(key, v));
  else if (key == "session.max_rounds") {
    const auto n = parse_int(key, v);
    if (n < 1) throw ConfigError("session.max_rounds must be at least 1");
    c.session.max_rounds = static_cast<std::size_t>(n);
  } else if (key == "session.screening_plan") c.session.screening_plan = parse_plan(v);
  else if (key == "session.oracle_fallback") c.session.oracle_fallback = parse_bool(key, v);
  else if (key == "session.allow_tools") c.session.allow_tools = parse_bool(key, v);
  else if (key == "session.allow_exams") c.session.allow_exams = parse_bool(key, v);
  else if (key == "session.reentry_rescreen") c.session.reentry_rescreen = parse_bool(key, v);
  else if (key == "session.icl_count") {
    const auto n = parse_int(key, v);
    if (n < 0) throw ConfigError("session.icl_count must be non-negative");
    c.session.icl_count = static_cast<std::size_t>(n);
  } else if (key == "reward.p_f") c.reward.format_penalty = parse_double(key, v);
  else if (key == "reward.p_h") c.reward.hacking_penalty = parse_double(key, v);
  else if (key == "reward.b_e") c.reward.consistency_bonus = parse_double(key, v);
  else if (key == "reward.b_t") c.reward.tool_bonus = parse_double(key, v);
  else if (key == "reward.alpha") c.reward.alpha = parse_double(key, v);
  else if (key == "backends.token") c.token = v;
  else if (key == "backends.timeout_ms") c.timeout = std::chrono::milliseconds(parse_int(key, v));
  else if (key == "backends.retries") c.retries = static_cast<int>(parse_int(key, v));
  else if (key.rfind("backends.", 0) == 0) {
    try {
      c.urls[parse_role(key.substr(9))] = v;
    } catch (const ContractError&) {
      throw ConfigError("unknown config key '" + key + "'");
    }
  }
  else throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace

void EngineConfig::apply_ini(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw NotFoundError("config file " + path.string() + " not found");
  pt::ptree tree;
  try {
    pt::read_ini(path.string(), tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("bad config file: ") + e.what());
  }
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw ConfigError("config key '" + section + "' must sit inside a section");
    for (const auto& [key, value] : body) set_key(*this, section + "." + key, value.data());
  }
}

void EngineConfig::apply_env(const EnvLookup& lookup) {
  static const std::vector<std::pair<std::string, std::string>> kVars{
      {"DX_CORPUS", "engine.corpus"},
      {"DX_TOOLKITS", "engine.toolkits"},
      {"DX_PARALLELISM", "engine.parallelism"},
      {"DX_PROFILE", "engine.profile"},
      {"DX_SEED", "engine.seed"},
      {"DX_MAX_ROUNDS", "session.max_rounds"},
      {"DX_SCREENING_PLAN", "session.screening_plan"},
      {"DX_ALPHA", "reward.alpha"},
      {"DX_TOKEN", "backends.token"},
      {"DX_TIMEOUT_MS", "backends.timeout_ms"},
      {"DX_INTERPRETER_URL", "backends.interpreter"},
      {"DX_REASONER_URL", "backends.reasoner"},
      {"DX_JUDGE_URL", "backends.judge"},
      {"DX_EXAM_ORACLE_URL", "backends.exam_oracle"},
  };
  for (const auto& [var, key] : kVars) {
    if (auto v = lookup(var)) set_key(*this, key, *v);
  }
}

void EngineConfig::apply_process_env() {
  apply_env([](const std::string& name) -> std::optional<std::string> {
    const char* v = std::getenv(name.c_str());
    if (!v) return std::nullopt;
    return std::string(v);
  });
}

void EngineConfig::validate() const {
  if (profile != "test" && profile != "live") throw ConfigError("profile must be test or live");
  if (corpus && !std::filesystem::exists(*corpus)) throw ConfigError("corpus " + corpus->string() + " does not exist");
  if (toolkits && !std::filesystem::exists(*toolkits)) {
    throw ConfigError("toolkit directory " + toolkits->string() + " does not exist");
  }
  reward.validate();
  for (const auto& e : endpoints()) e.validate();
}

std::vector<BackendEndpoint> EngineConfig::endpoints() const {
  std::vector<BackendEndpoint> out;
  for (const auto& [role, url] : urls) {
    BackendEndpoint e;
    e.role = role;
    e.base_url = url;
    e.token = token;
    e.timeout = timeout.value_or(profile == "live" ? kLiveTimeout : kTestTimeout);
    e.retry_budget = retries;
    out.push_back(e);
  }
  return out;
}

json EngineConfig::to_json() const {
  json u = json::object();
  for (const auto& [role, url] : urls) u[std::string(to_string(role))] = url;
  return {{"corpus", corpus ? json(corpus->string()) : json(nullptr)},
          {"toolkits", toolkits ? json(toolkits->string()) : json(nullptr)},
          {"parallelism", parallelism},
          {"profile", profile},
          {"session", session.to_json()},
          {"reward",
           {{"p_f", reward.format_penalty},
            {"p_h", reward.hacking_penalty},
            {"b_e", reward.consistency_bonus},
            {"b_t", reward.tool_bonus},
            {"alpha", reward.alpha}}},
          {"backends", u},
          {"token_set", !token.empty()},
          {"retries", retries}};
}

}  // namespace dx
