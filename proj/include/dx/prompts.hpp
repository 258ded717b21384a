#pragma once

#include <optional>
#include <string>
#include <vector>

namespace dx {

enum class PromptKind {
  kExploration,         // first reasoner turn: differential + requests
  kExploitation,        // definitive turn after evidence
  kOnePass,             // single-turn final diagnosis (OP protocol)
  kInterpreterGeneral,  // RoI description
  kInterpreterIcl,      // reference/query comparison
};

struct ToolDescriptor {
  std::string name;    // e.g. "tool-ccRCC"
  std::string phrase;  // e.g. "renal clear cell observation tool"
};

// The six tools of the default registry, in roster order.
std::vector<ToolDescriptor> default_tool_roster();

struct PromptContext {
  std::optional<std::string> case_info;
  std::optional<std::string> findings;  // interpreter output from the initial screening
  std::optional<std::string> exam_results;
  std::optional<std::string> observation_results;
  std::vector<ToolDescriptor> tools = default_tool_roster();
};

// Substitutes the template of `kind`. Throws TemplateError naming a missing field.
std::string render_prompt(PromptKind kind, const PromptContext& ctx);

// System preamble of every reasoner conversation.
std::string reasoner_system_prompt();

struct ChatMessage {
  std::string role;  // system | user | assistant
  std::string content;
};

// Flattens a conversation into the prompt text sent on the wire.
std::string render_conversation(const std::vector<ChatMessage>& messages);

}  // namespace dx
