#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace dx {

// Structured view of one reasoner reply.
struct ParsedResponse {
  std::optional<std::string> think;
  std::optional<std::string> answer;

  std::vector<std::string> diff_list;
  bool diff_list_present = false;
  std::vector<std::string> exam_list;
  bool exam_list_present = false;  // present with zero items is reported as exam_list_empty()
  std::vector<std::string> tool_list;
  bool tool_list_present = false;
  std::optional<std::string> boxed;

  bool tag_error = false;           // zero or several think/answer pairs, or bad nesting
  bool presentation_error = false;  // no well-formed \DiffList or \boxed in the answer
  int format_errors = 0;            // tag_error + presentation_error

  bool exam_list_empty() const { return exam_list_present && exam_list.empty(); }
  bool well_formed() const { return format_errors == 0; }

  // Diagnosis list the reward is computed on: the differential when present,
  // otherwise the boxed diagnosis alone.
  std::vector<std::string> diagnoses() const;

  friend bool operator==(const ParsedResponse&, const ParsedResponse&) = default;
};

// Total function: never throws, malformation is reported through format_errors.
ParsedResponse parse_response(std::string_view raw);

// Splits a list body on commas outside (), [] and {}. Items are trimmed and empty
// items dropped.
std::vector<std::string> split_top_level(std::string_view body);

// Renders the structured fields back into a reply in the output grammar.
std::string serialize_response(const ParsedResponse& r);

// Equality over the extracted fields (lists, boxed, error flags), ignoring the
// free text of the think and answer blocks.
bool same_fields(const ParsedResponse& a, const ParsedResponse& b);

std::string trim(std::string_view s);

}  // namespace dx
