#include "dx/reward.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "dx/errors.hpp"
#include "dx/judge.hpp"

namespace dx {

using nlohmann::json;

namespace {

bool iequals(std::string_view a, std::string_view b) {
  return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin(), [](char x, char y) {
           return std::tolower(static_cast<unsigned char>(x)) == std::tolower(static_cast<unsigned char>(y));
         });
}

bool contains_any(std::string_view normalized, const std::vector<std::string>& patterns) {
  return std::any_of(patterns.begin(), patterns.end(), [&](const std::string& p) {
    return p == "*" || (!p.empty() && normalized.find(p) != std::string_view::npos);
  });
}

bool has_tool(const std::vector<std::string>& calls, std::string_view tool) {
  return std::any_of(calls.begin(), calls.end(), [&](const auto& c) { return iequals(c, tool); });
}

constexpr std::string_view kDefaultToolRules = R"JSON({
  "applicable_when": {
    "tool-ccRCC": ["renal cell carcinoma", "rcc", "renal", "kidney"],
    "tool-chRCC": ["renal cell carcinoma", "rcc", "renal", "kidney"],
    "tool-pRCC": ["renal cell carcinoma", "rcc", "renal", "kidney"],
    "tool-Nuclear": ["renal cell carcinoma", "rcc", "renal", "kidney"],
    "tool-Gleason": ["prostate", "prostatic"],
    "tool-invasion": ["*"]
  },
  "required": [
    {"top_diagnosis": ["clear cell renal cell carcinoma", "ccrcc"], "tools": ["tool-ccRCC", "tool-Nuclear"]},
    {"top_diagnosis": ["papillary renal cell carcinoma", "prcc"], "tools": ["tool-pRCC", "tool-Nuclear"]},
    {"top_diagnosis": ["chromophobe renal cell carcinoma", "chrcc"], "tools": ["tool-chRCC"]},
    {"top_diagnosis": ["prostate adenocarcinoma", "prostatic adenocarcinoma", "prostatic acinar adenocarcinoma",
                       "prostatic ductal adenocarcinoma"], "tools": ["tool-Gleason"]},
    {"context": ["lymphovascular invasion", "perineural invasion", "vascular invasion", "lymphatic invasion"],
     "tools": ["tool-invasion"]}
  ]
})JSON";

}  // namespace

void RewardConfig::validate() const {
  if (format_penalty < 0 || hacking_penalty < 0 || consistency_bonus < 0 || tool_bonus < 0) {
    throw ConfigError("reward penalties and bonuses must be non-negative");
  }
  if (!(alpha > 0)) throw ConfigError("reward alpha must be positive");
}

std::string_view to_string(ExamQuality q) {
  switch (q) {
    case ExamQuality::kDifferentiates: return "differentiates";
    case ExamQuality::kNeutral: return "neutral";
    case ExamQuality::kProblematic: return "problematic";
  }
  return "?";
}

ExamQuality parse_exam_quality(std::string_view text) {
  if (text == "differentiates") return ExamQuality::kDifferentiates;
  if (text == "neutral") return ExamQuality::kNeutral;
  if (text == "problematic") return ExamQuality::kProblematic;
  throw ContractError("unknown exam quality '" + std::string(text) + "'");
}

std::vector<double> rank_weights(std::size_t length, double alpha) {
  if (!(alpha > 0)) throw ContractError("alpha must be positive");
  // Shifted by exp(1/alpha), which cancels in the ratio and avoids underflow.
  std::vector<double> w(length);
  double sum = 0.0;
  for (std::size_t j = 0; j < length; ++j) {
    w[j] = std::exp(-static_cast<double>(j) / alpha);
    sum += w[j];
  }
  for (auto& v : w) v /= sum;
  return w;
}

double diagnostic_reward(std::size_t list_length, std::optional<std::size_t> match_position, double alpha) {
  if (!(alpha > 0)) throw ContractError("alpha must be positive");
  if (!match_position) return 0.0;
  if (list_length == 0) throw ContractError("match position given for an empty diagnosis list");
  if (*match_position < 1 || *match_position > list_length) {
    throw ContractError("match position " + std::to_string(*match_position) + " outside 1.." +
                        std::to_string(list_length));
  }
  return rank_weights(list_length, alpha)[*match_position - 1];
}

double consistency_reward(ExamQuality quality, double bonus) {
  switch (quality) {
    case ExamQuality::kDifferentiates: return bonus;
    case ExamQuality::kNeutral: return 0.0;
    case ExamQuality::kProblematic: return -bonus;
  }
  return 0.0;
}

bool ToolRules::known(std::string_view tool) const {
  return std::any_of(applicable_when.begin(), applicable_when.end(),
                     [&](const auto& kv) { return iequals(kv.first, tool); });
}

ToolRules ToolRules::defaults() { return from_json_text(kDefaultToolRules); }

ToolRules ToolRules::from_json_text(std::string_view text) {
  ToolRules r;
  try {
    const auto j = json::parse(text);
    r.applicable_when = j.at("applicable_when").get<std::map<std::string, std::vector<std::string>>>();
    for (const auto& jr : j.value("required", json::array())) {
      r.required.push_back({jr.value("top_diagnosis", std::vector<std::string>{}),
                            jr.value("context", std::vector<std::string>{}),
                            jr.at("tools").get<std::vector<std::string>>()});
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed tool rules: ") + e.what());
  }
  return r;
}

ToolRules ToolRules::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw NotFoundError("cannot open tool rules " + path.string());
  return from_json_text(std::string(std::istreambuf_iterator<char>(in), {}));
}

std::string ToolRules::to_json_text() const {
  json req = json::array();
  for (const auto& r : required) {
    json jr = {{"tools", r.tools}};
    if (!r.top_diagnosis.empty()) jr["top_diagnosis"] = r.top_diagnosis;
    if (!r.context.empty()) jr["context"] = r.context;
    req.push_back(jr);
  }
  return json{{"applicable_when", applicable_when}, {"required", req}}.dump(2);
}

ToolCallOutcome evaluate_tool_calls(const std::vector<std::string>& calls, const std::vector<std::string>& diagnoses,
                                    const ToolRules& rules, double bonus, std::string_view context) {
  ToolCallOutcome out;
  std::vector<std::string> norm_dx;
  for (const auto& d : diagnoses) norm_dx.push_back(normalize_diagnosis(d));
  const std::string norm_ctx = normalize_diagnosis(context);

  for (const auto& call : calls) {
    const auto it = std::find_if(rules.applicable_when.begin(), rules.applicable_when.end(),
                                 [&](const auto& kv) { return iequals(kv.first, call); });
    if (it == rules.applicable_when.end()) {
      out.false_calls.push_back(call);
      continue;
    }
    const bool applicable = std::any_of(norm_dx.begin(), norm_dx.end(),
                                        [&](const auto& d) { return contains_any(d, it->second); }) ||
                            std::find(it->second.begin(), it->second.end(), "*") != it->second.end();
    if (!applicable) out.false_calls.push_back(call);
  }

  for (const auto& rule : rules.required) {
    const bool by_top = !norm_dx.empty() && !rule.top_diagnosis.empty() && contains_any(norm_dx.front(), rule.top_diagnosis);
    const bool by_ctx = !norm_ctx.empty() && !rule.context.empty() && contains_any(norm_ctx, rule.context);
    if (!by_top && !by_ctx) continue;
    for (const auto& t : rule.tools) {
      if (!has_tool(out.required, t)) out.required.push_back(t);
    }
  }
  for (const auto& t : out.required) {
    if (!has_tool(calls, t)) out.missing.push_back(t);
  }

  if (!out.false_calls.empty()) {
    out.reward = -bonus;
  } else if (out.required.empty() && calls.empty()) {
    out.reward = 0.0;
  } else if (out.missing.empty()) {
    out.reward = bonus;
  } else {
    out.reward = 0.0;
  }
  return out;
}

double toolcall_reward(const std::vector<std::string>& calls, const std::vector<std::string>& diagnoses,
                       const ToolRules& rules, double bonus, std::string_view context) {
  return evaluate_tool_calls(calls, diagnoses, rules, bonus, context).reward;
}

RewardBreakdown total_reward(const ParsedResponse& parsed, const JudgeVerdict& verdict, const RewardConfig& cfg,
                             const ToolRules& rules, std::string_view context) {
  cfg.validate();
  RewardBreakdown b;
  b.n_f = parsed.format_errors;
  if (b.n_f != 0) {
    b.total = -cfg.format_penalty * b.n_f;
    return b;
  }
  const auto diagnoses = parsed.diagnoses();
  b.r_d = diagnostic_reward(diagnoses.size(), verdict.match_position, cfg.alpha);
  b.r_e = consistency_reward(verdict.exam_quality, cfg.consistency_bonus);
  b.r_t = toolcall_reward(parsed.tool_list, diagnoses, rules, cfg.tool_bonus, context);
  b.hacking = verdict.hacking;
  b.total = b.r_d + b.r_e + b.r_t - (b.hacking ? cfg.hacking_penalty : 0.0);
  return b;
}

}  // namespace dx
