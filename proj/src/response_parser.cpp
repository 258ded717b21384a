#include "dx/response_parser.hpp"

#include <algorithm>

namespace dx {

namespace {

constexpr std::string_view kThinkOpen = "<think>";
constexpr std::string_view kThinkClose = "</think>";
constexpr std::string_view kAnswerOpen = "<answer>";
constexpr std::string_view kAnswerClose = "</answer>";

std::vector<std::size_t> find_all(std::string_view text, std::string_view needle) {
  std::vector<std::size_t> out;
  for (auto p = text.find(needle); p != std::string_view::npos; p = text.find(needle, p + needle.size())) {
    out.push_back(p);
  }
  return out;
}

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

// Body of the first well-formed `marker{...}` in text (balanced braces).
std::optional<std::string_view> extract_marker(std::string_view text, std::string_view marker) {
  for (auto p = text.find(marker); p != std::string_view::npos; p = text.find(marker, p + 1)) {
    std::size_t i = p + marker.size();
    while (i < text.size() && is_space(text[i])) ++i;
    if (i >= text.size() || text[i] != '{') continue;
    const std::size_t begin = i + 1;
    int depth = 1;
    for (std::size_t j = begin; j < text.size(); ++j) {
      if (text[j] == '{') {
        ++depth;
      } else if (text[j] == '}' && --depth == 0) {
        return text.substr(begin, j - begin);
      }
    }
    return std::nullopt;  // unterminated; later occurrences would be nested inside it
  }
  return std::nullopt;
}

std::optional<std::string> block_between(std::string_view raw, const std::vector<std::size_t>& open,
                                         std::size_t open_len, const std::vector<std::size_t>& close) {
  if (open.size() != 1 || close.size() != 1 || open[0] + open_len > close[0]) return std::nullopt;
  return trim(raw.substr(open[0] + open_len, close[0] - open[0] - open_len));
}

}  // namespace

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && is_space(s[b])) ++b;
  while (e > b && is_space(s[e - 1])) --e;
  return std::string(s.substr(b, e - b));
}

std::vector<std::string> split_top_level(std::string_view body) {
  std::vector<std::string> items;
  int paren = 0, bracket = 0, brace = 0;
  std::size_t start = 0;
  auto flush = [&](std::size_t end) {
    auto item = trim(body.substr(start, end - start));
    if (!item.empty()) items.push_back(std::move(item));
  };
  for (std::size_t i = 0; i < body.size(); ++i) {
    switch (body[i]) {
      case '(': ++paren; break;
      case ')': paren = std::max(0, paren - 1); break;
      case '[': ++bracket; break;
      case ']': bracket = std::max(0, bracket - 1); break;
      case '{': ++brace; break;
      case '}': brace = std::max(0, brace - 1); break;
      case ',':
        if (paren == 0 && bracket == 0 && brace == 0) {
          flush(i);
          start = i + 1;
        }
        break;
      default: break;
    }
  }
  flush(body.size());
  return items;
}

std::vector<std::string> ParsedResponse::diagnoses() const {
  if (!diff_list.empty()) return diff_list;
  if (boxed) return {*boxed};
  return {};
}

ParsedResponse parse_response(std::string_view raw) {
  ParsedResponse r;
  const auto to = find_all(raw, kThinkOpen);
  const auto tc = find_all(raw, kThinkClose);
  const auto ao = find_all(raw, kAnswerOpen);
  const auto ac = find_all(raw, kAnswerClose);

  r.think = block_between(raw, to, kThinkOpen.size(), tc);
  r.answer = block_between(raw, ao, kAnswerOpen.size(), ac);
  const bool single_pair = to.size() == 1 && tc.size() == 1 && ao.size() == 1 && ac.size() == 1;
  const bool ordered = single_pair && to[0] < tc[0] && tc[0] <= ao[0] && ao[0] < ac[0];
  r.tag_error = !ordered;

  bool presented = false;
  if (r.answer) {
    const std::string_view answer = *r.answer;
    if (auto body = extract_marker(answer, "\\DiffList")) {
      r.diff_list_present = true;
      r.diff_list = split_top_level(*body);
      presented = presented || !r.diff_list.empty();
    }
    if (auto body = extract_marker(answer, "\\ExamList")) {
      r.exam_list_present = true;
      r.exam_list = split_top_level(*body);
    }
    if (auto body = extract_marker(answer, "\\ToolCallList")) {
      r.tool_list_present = true;
      r.tool_list = split_top_level(*body);
    }
    if (auto body = extract_marker(answer, "\\boxed")) {
      auto b = trim(*body);
      if (!b.empty()) {
        r.boxed = std::move(b);
        presented = true;
      }
    }
  }
  r.presentation_error = !presented;
  r.format_errors = static_cast<int>(r.tag_error) + static_cast<int>(r.presentation_error);
  return r;
}

namespace {

std::string join(const std::vector<std::string>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += ", ";
    out += items[i];
  }
  return out;
}

}  // namespace

std::string serialize_response(const ParsedResponse& r) {
  std::string out = "<think>\n" + r.think.value_or("") + "\n</think>\n\n<answer>\n";
  if (r.diff_list_present) out += "Differential Diagnoses: \\DiffList{" + join(r.diff_list) + "}\n";
  if (r.exam_list_present) out += "Further Examination Items: \\ExamList{" + join(r.exam_list) + "}\n";
  if (r.tool_list_present) out += "Further Observation Tool Calls: \\ToolCallList{" + join(r.tool_list) + "}\n";
  if (r.boxed) out += "\\boxed{" + *r.boxed + "}\n";
  out += "</answer>\n";
  return out;
}

bool same_fields(const ParsedResponse& a, const ParsedResponse& b) {
  return a.diff_list == b.diff_list && a.diff_list_present == b.diff_list_present &&
         a.exam_list == b.exam_list && a.exam_list_present == b.exam_list_present &&
         a.tool_list == b.tool_list && a.tool_list_present == b.tool_list_present && a.boxed == b.boxed &&
         a.tag_error == b.tag_error && a.presentation_error == b.presentation_error &&
         a.format_errors == b.format_errors;
}

}  // namespace dx
