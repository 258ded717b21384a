#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dx/backends.hpp"
#include "dx/protocol.hpp"
#include "dx/reward.hpp"

namespace dx {

// INI layout (every key optional):
//
//   [engine]   corpus, toolkits, parallelism, profile (test|live), seed
//   [session]  max_rounds, screening_plan, oracle_fallback, allow_tools,
//              allow_exams, reentry_rescreen, icl_count
//   [reward]   p_f, p_h, b_e, b_t, alpha
//   [backends] token, timeout_ms, retries, interpreter, reasoner, judge, exam_oracle
//
// Environment: DX_CORPUS, DX_TOOLKITS, DX_PARALLELISM, DX_PROFILE, DX_SEED,
// DX_MAX_ROUNDS, DX_SCREENING_PLAN, DX_ALPHA, DX_TOKEN, DX_TIMEOUT_MS and
// DX_<ROLE>_URL. Flags beat the environment, which beats the file.
struct EngineConfig {
  std::optional<std::filesystem::path> corpus;
  std::optional<std::filesystem::path> toolkits;
  std::size_t parallelism = 1;
  std::string profile = "test";
  SessionConfig session;
  RewardConfig reward;
  std::map<Role, std::string> urls;
  std::string token;
  std::optional<std::chrono::milliseconds> timeout;  // default from the profile
  int retries = 2;

  void apply_ini(const std::filesystem::path& path);  // NotFoundError, ConfigError
  using EnvLookup = std::function<std::optional<std::string>(const std::string&)>;
  void apply_env(const EnvLookup& lookup);
  void apply_process_env();

  // Referenced paths exist; reward and profile are valid. ConfigError.
  void validate() const;
  std::vector<BackendEndpoint> endpoints() const;
  nlohmann::json to_json() const;
};

}  // namespace dx
