#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dx/response_parser.hpp"

namespace dx {

struct RewardConfig {
  double format_penalty = 0.5;     // P_f
  double hacking_penalty = 0.3;    // P_h
  double consistency_bonus = 0.1;  // B_e
  double tool_bonus = 0.1;         // B_t
  double alpha = 0.5;              // rank temperature

  void validate() const;  // ConfigError
};

// Rank temperature for replies produced without / with further examination results.
inline constexpr double kAlphaPreliminary = 0.5;
inline constexpr double kAlphaWithResults = 2.0;

enum class ExamQuality { kDifferentiates, kNeutral, kProblematic };
std::string_view to_string(ExamQuality q);
ExamQuality parse_exam_quality(std::string_view text);

struct JudgeVerdict {
  std::optional<std::size_t> match_position;  // 1-based
  ExamQuality exam_quality = ExamQuality::kNeutral;
  bool hacking = false;
};

struct RewardBreakdown {
  double r_d = 0.0;
  double r_e = 0.0;
  double r_t = 0.0;
  bool hacking = false;
  int n_f = 0;
  double total = 0.0;
};

// exp(-i/a) / sum_{j=1..L} exp(-j/a) for i = 1..L.
std::vector<double> rank_weights(std::size_t length, double alpha);

double diagnostic_reward(std::size_t list_length, std::optional<std::size_t> match_position, double alpha);
double consistency_reward(ExamQuality quality, double bonus);

// Declarative tool rules: which tools a diagnosis list may use, and which tools
// the top diagnosis (or the case context) requires. Patterns are lower-case
// substrings matched against normalized text.
struct ToolRule {
  std::vector<std::string> top_diagnosis;  // matched against D_1
  std::vector<std::string> context;        // matched against the case text
  std::vector<std::string> tools;
};

struct ToolRules {
  std::map<std::string, std::vector<std::string>> applicable_when;  // tool -> patterns; "*" = always
  std::vector<ToolRule> required;

  bool known(std::string_view tool) const;
  static ToolRules defaults();
  static ToolRules load(const std::filesystem::path& path);
  static ToolRules from_json_text(std::string_view text);
  std::string to_json_text() const;
};

struct ToolCallOutcome {
  double reward = 0.0;
  std::vector<std::string> required;
  std::vector<std::string> missing;
  std::vector<std::string> false_calls;  // unknown or inapplicable
};

ToolCallOutcome evaluate_tool_calls(const std::vector<std::string>& calls,
                                    const std::vector<std::string>& diagnoses, const ToolRules& rules,
                                    double bonus, std::string_view context = {});
double toolcall_reward(const std::vector<std::string>& calls, const std::vector<std::string>& diagnoses,
                       const ToolRules& rules, double bonus, std::string_view context = {});

RewardBreakdown total_reward(const ParsedResponse& parsed, const JudgeVerdict& verdict,
                             const RewardConfig& cfg, const ToolRules& rules,
                             std::string_view context = {});

}  // namespace dx
