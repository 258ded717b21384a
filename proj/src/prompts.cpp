#include "dx/prompts.hpp"

#include "dx/errors.hpp"
#include "dx/prompt_templates.hpp"

namespace dx {

namespace {

void replace_all(std::string& s, std::string_view from, std::string_view to) {
  for (auto p = s.find(from); p != std::string::npos; p = s.find(from, p + to.size())) {
    s.replace(p, from.size(), to);
  }
}

// The system and ICL listings carry escaped newlines and quotes.
std::string unescape_listing(std::string_view text) {
  std::string s(text);
  replace_all(s, "\\n", "\n");
  replace_all(s, "\\\"", "\"");
  return s;
}

const std::string& require(const std::optional<std::string>& field, const char* name) {
  if (!field) throw TemplateError(std::string("prompt context is missing required field '") + name + "'");
  return *field;
}

bool is_default_roster(const std::vector<ToolDescriptor>& tools) {
  const auto def = default_tool_roster();
  if (tools.size() != def.size()) return false;
  for (std::size_t i = 0; i < def.size(); ++i) {
    if (tools[i].name != def[i].name) return false;
  }
  return true;
}

std::string tool_paragraph(const std::vector<ToolDescriptor>& tools) {
  if (tools.empty()) {
    return "4. No observation tools are available at present; leave the tool call list blank. ";
  }
  std::string out =
      "4. Particularly, you can call the relevant tools to further observe the original images and "
      "collect evidence. The tools include: ";
  for (std::size_t i = 0; i < tools.size(); ++i) {
    if (i) out += (i + 1 == tools.size()) ? ", and " : ", ";
    out += tools[i].phrase + " (" + tools[i].name + ")";
  }
  return out + ". ";
}

}  // namespace

std::vector<ToolDescriptor> default_tool_roster() {
  return {{"tool-ccRCC", "renal clear cell observation tool"},
          {"tool-chRCC", "renal chromophobe cell observation tool"},
          {"tool-pRCC", "renal papillary cell observation tool"},
          {"tool-Nuclear", "Furhman nuclear grade observation tool"},
          {"tool-Gleason", "Gleason score evaluation tool"},
          {"tool-invasion", "invasion detection tool"}};
}

std::string reasoner_system_prompt() { return unescape_listing(templates::kReasonerSystem); }

std::string render_prompt(PromptKind kind, const PromptContext& ctx) {
  switch (kind) {
    case PromptKind::kExploration: {
      std::string out(templates::kExploratoryUser);
      if (!is_default_roster(ctx.tools)) {
        const auto begin = out.find("4. Particularly");
        const auto end = out.find("\n5. ");
        out.replace(begin, end - begin, tool_paragraph(ctx.tools));
      }
      std::string info = require(ctx.case_info, "case_info");
      if (ctx.findings && !ctx.findings->empty()) info += "\n\n" + *ctx.findings;
      replace_all(out, "<Case Information>", info);
      return out;
    }
    case PromptKind::kExploitation: {
      std::string out(templates::kDefinitiveUser);
      const auto& exams = require(ctx.exam_results, "exam_results");
      const auto& obs = require(ctx.observation_results, "observation_results");
      replace_all(out, "<Exam Results>", exams);
      replace_all(out, "<Further Observations>", obs);
      return out;
    }
    case PromptKind::kOnePass: {
      std::string info = require(ctx.case_info, "case_info");
      if (ctx.findings && !ctx.findings->empty()) info += "\n\n" + *ctx.findings;
      return "I need you to act as a professional pathologist. After carefully considering the given "
             "information, give the final diagnosis directly without requesting further examinations or "
             "observations.\nThe final diagnosis must be output in the specified format, i.e., "
             "\\boxed{Diagnosis Name}\n\nThe following is the case information:\n" +
             info;
    }
    case PromptKind::kInterpreterGeneral: {
      std::string out(templates::kInterpreterGeneral);
      replace_all(out, "<Background information>", require(ctx.case_info, "case_info"));
      return out;
    }
    case PromptKind::kInterpreterIcl:
      return unescape_listing(templates::kInterpreterIcl);
  }
  throw TemplateError("unknown prompt kind");
}

std::string render_conversation(const std::vector<ChatMessage>& messages) {
  std::string out;
  for (const auto& m : messages) {
    if (!out.empty()) out += "\n\n";
    out += m.role + ":\n" + m.content;
  }
  return out;
}

}  // namespace dx
