#pragma once

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dx/reward.hpp"

namespace dx {

// Editable lookup tables behind the deterministic judge.
struct JudgeTables {
  std::map<std::string, std::string> synonyms;  // alias -> canonical, both normalized
  std::vector<std::pair<std::string, std::string>> exclusions;
  std::set<std::string> vague;
  std::map<std::string, std::vector<std::string>> exam_targets;  // exam keyword -> diagnoses

  static JudgeTables defaults();
  static JudgeTables load(const std::filesystem::path& path);
  static JudgeTables from_json_text(std::string_view text);
  std::string to_json_text() const;
};

// Case-folded, whitespace-collapsed form without trailing punctuation.
std::string normalize_diagnosis(std::string_view text);

class DiagnosisNormalizer {
 public:
  explicit DiagnosisNormalizer(const JudgeTables& tables) : tables_(&tables) {}
  // Every canonical reading of `text`: the full string, its head before a
  // qualifier comma, parenthetical aliases, slash alternatives, and synonyms.
  std::set<std::string> candidates(std::string_view text) const;
  bool same(std::string_view a, std::string_view b) const;
  bool related(std::string_view diagnosis, std::string_view target) const;

 private:
  const JudgeTables* tables_;
};

struct JudgeRequest {
  std::vector<std::string> diagnoses;
  std::vector<std::string> exams;
  std::string truth;
};

class Judge {
 public:
  virtual ~Judge() = default;
  virtual JudgeVerdict judge(const JudgeRequest& request) = 0;
};

class RuleBasedJudge final : public Judge {
 public:
  explicit RuleBasedJudge(JudgeTables tables = JudgeTables::defaults()) : tables_(std::move(tables)) {}
  JudgeVerdict judge(const JudgeRequest& request) override;
  const JudgeTables& tables() const { return tables_; }
  DiagnosisNormalizer normalizer() const { return DiagnosisNormalizer(tables_); }

 private:
  JudgeTables tables_;
};

JudgeVerdict rule_based_judge(const std::vector<std::string>& diagnoses, std::string_view truth,
                              const JudgeTables& tables, const std::vector<std::string>& exams = {});

}  // namespace dx
