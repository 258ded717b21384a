#pragma once

// Random inputs shared by the unit tests and the acceptance runner.

#include <algorithm>
#include <filesystem>
#include <memory>
#include <fstream>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "dx/backends.hpp"
#include "dx/random.hpp"
#include "dx/response_parser.hpp"

namespace gen {

inline std::string pick(dx::Rng& rng, const std::vector<std::string>& from) { return from[rng.below(from.size())]; }

// Byte noise biased toward grammar fragments so the parser reaches deep states.
inline std::string noise(dx::Rng& rng) {
  static const std::vector<std::string> kFragments{
      "<think>", "</think>", "<answer>", "</answer>", "\\DiffList{", "\\ExamList{", "\\ToolCallList{",
      "\\boxed{", "{", "}", "(", ")", ",", "[", "]", "\\", "<", ">", "\n", " ", "ccRCC", "\xff", "\xc3\xa9"};
  std::string out;
  const std::size_t parts = rng.below(40);
  for (std::size_t i = 0; i < parts; ++i) {
    if (rng.below(3) == 0) {
      const std::size_t n = 1 + rng.below(8);
      for (std::size_t k = 0; k < n; ++k) out.push_back(static_cast<char>(rng.below(256)));
    } else {
      out += pick(rng, kFragments);
    }
  }
  return out;
}

inline std::string item(dx::Rng& rng) {
  static const std::vector<std::string> kHeads{"Clear cell renal cell carcinoma", "Thymoma", "Lymphoma",
                                               "Gastric adenocarcinoma", "Immunohistochemistry",
                                               "Papillary renal cell carcinoma", "tool-Nuclear", "Gleason"};
  static const std::vector<std::string> kTails{"", " (ccRCC)", " (CD5, EMA, D2-40)", " [type B3]", " (a (b, c))",
                                               " {x, y}", " grade 3"};
  return pick(rng, kHeads) + pick(rng, kTails);
}

inline std::vector<std::string> items(dx::Rng& rng, std::size_t min_len) {
  std::vector<std::string> out(min_len + rng.below(5));
  for (auto& s : out) s = item(rng);
  return out;
}

// A reply with n_f = 0.
inline dx::ParsedResponse well_formed(dx::Rng& rng) {
  dx::ParsedResponse r;
  r.think = "reasoning " + std::to_string(rng.below(1000));
  const bool diff = rng.below(4) != 0;
  r.diff_list_present = diff;
  if (diff) r.diff_list = items(rng, 1);
  if (rng.below(2)) {
    r.exam_list_present = true;
    r.exam_list = items(rng, 0);
  }
  if (rng.below(2)) {
    r.tool_list_present = true;
    r.tool_list = items(rng, 0);
  }
  if (!diff || rng.below(2)) r.boxed = item(rng);
  return r;
}

// Every reasoner reply scripted in the fixture directory.
inline std::vector<std::string> scripted_replies(const std::filesystem::path& fixture_dir) {
  std::vector<std::string> out;
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(fixture_dir / "scripts")) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    std::ifstream in(f);
    const auto j = nlohmann::json::parse(in);
    for (const auto& step : j.at("script")) {
      if (step.at("role") == "reasoner") out.push_back(step.at("response").get<std::string>());
    }
  }
  return out;
}

// Scripted backends that misbehave at random: malformed replies, unknown tools,
// failing statuses, early exhaustion.
inline std::shared_ptr<dx::MockScript> adversarial_script(dx::Rng& rng) {
  static const std::vector<std::string> kTools{"tool-ccRCC", "tool-chRCC", "tool-pRCC", "tool-Nuclear",
                                               "tool-invasion", "tool-Gleason", "tool-bogus"};
  static const std::vector<std::string> kExams{"IHC PAX8", "CD10", "CK7", "Ki-67", "KRAS mutation", "repeat biopsy"};
  auto script = std::make_shared<dx::MockScript>();
  script->add_rule(dx::Role::kInterpreter, {{"mode", "general"}}, "Overall structure: sheets of cells.");
  script->add_rule(dx::Role::kInterpreter, {{"mode", "icl"}}, rng.below(2) ? "Yes" : "No");
  const std::size_t turns = rng.below(9);
  for (std::size_t i = 0; i < turns; ++i) {
    const auto kind = rng.below(10);
    if (kind == 0) {
      script->push(dx::Role::kReasoner, noise(rng));
    } else if (kind == 1) {
      script->push(dx::Role::kReasoner, "server error", 500);
    } else {
      dx::ParsedResponse r;
      r.think = "t";
      r.diff_list_present = true;
      r.diff_list = items(rng, 1);
      if (rng.below(2)) {
        r.exam_list_present = true;
        for (std::size_t k = rng.below(3); k > 0; --k) r.exam_list.push_back(pick(rng, kExams));
      }
      if (rng.below(2)) {
        r.tool_list_present = true;
        for (std::size_t k = rng.below(3); k > 0; --k) r.tool_list.push_back(pick(rng, kTools));
      }
      if (kind >= 7) r.boxed = item(rng);
      script->push(dx::Role::kReasoner, dx::serialize_response(r));
    }
  }
  for (std::size_t k = rng.below(4); k > 0; --k) script->push(dx::Role::kExamOracle, "PAX8: Positive\nCD10: Negative");
  if (rng.below(2)) script->set_exam_table({{"ck7", "Negative"}, {"ki-67", "10%"}});
  return script;
}

}  // namespace gen
