#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dx/backends.hpp"
#include "dx/embedding_store.hpp"
#include "dx/highlighter.hpp"
#include "dx/prompts.hpp"
#include "dx/response_parser.hpp"

namespace dx {

enum class Stage { kExploration, kExecution, kExploitation, kDone, kAborted };
std::string_view to_string(Stage s);

enum class Protocol { kOnePass, kEvidenceSeeking };
std::string_view to_string(Protocol p);
Protocol parse_protocol(std::string_view text);  // "op" | "es"

// How a tool turns interpreter answers into one observation line.
enum class ToolVerdict {
  kPresence,  // "<label>: positive|negative" by vote over query RoIs
  kGrade,     // highest category whose RoIs are judged the same tissue
  kGleason,   // area map on the grounding toolkit, no interpreter call
};

struct ToolSpec {
  std::string name;
  std::string toolkit;
  ToolVerdict verdict = ToolVerdict::kPresence;
  std::vector<std::string> categories;  // categories whose RoIs are queried
  std::string label;                    // observation line label
  std::string plan;                     // grounding toolkits: selection plan
  std::vector<Level> levels;            // localization toolkits: levels, k per category
  std::size_t k = 5;
  bool icl = true;
  std::size_t icl_count = 10;
  bool any_vote = false;  // presence: one "Yes" suffices instead of a majority
  std::string positive = "positive";
  std::string negative = "negative";
  double area_per_patch = 1.0;
};

struct ToolRegistry {
  std::map<std::string, ToolSpec> tools;

  static ToolRegistry defaults();
  static ToolRegistry from_json(const nlohmann::json& j);  // FormatError
  nlohmann::json to_json() const;
  const ToolSpec* find(std::string_view name) const;  // case-insensitive
  // ConfigError when a roster tool is not registered.
  void check_roster(const std::vector<ToolDescriptor>& roster) const;
};

struct SessionConfig {
  Protocol protocol = Protocol::kEvidenceSeeking;
  std::string screening_toolkit = "pan-cancer";
  SelectionPlan screening_plan = pan_cancer_plan();
  std::size_t max_rounds = 3;
  int retry_budget = 2;  // session-wide, at most one per turn
  std::uint64_t seed = 0;
  bool allow_tools = true;   // "further look"
  bool allow_exams = true;   // "further test"
  bool oracle_fallback = true;
  bool reentry_rescreen = false;  // re-run screening on Exploration re-entry
  std::optional<std::size_t> icl_count;  // overrides every tool; 0 = general mode
  bool wall_clock = false;
  std::vector<ToolDescriptor> roster = default_tool_roster();

  nlohmann::json to_json() const;
  // Overrides the fields present in `j` (same keys as to_json); ConfigError.
  void merge(const nlohmann::json& j);
};

struct CaseInput {
  std::string case_id;
  std::string case_info;
  std::string slide_id;  // empty: case text only
};

struct EngineResources {
  const Corpus* corpus = nullptr;
  const ToolkitLibrary* toolkits = nullptr;
  ToolRegistry registry = ToolRegistry::defaults();
};

struct Evidence {
  std::string kind;    // finding | observation | exam
  std::string name;    // tool or exam name
  std::string text;    // line(s) shown to the reasoner
  std::string source;  // interpreter | tool | human | oracle | engine
  int round = 0;
  bool simulated = false;
  bool available = true;
  std::vector<std::string> rois;

  nlohmann::json to_json() const;
};

struct TurnRecord {
  int index = 0;
  std::string stage;  // Exploration | Exploration-reentry | Exploitation | OnePass
  std::string prompt;
  std::string raw;
  ParsedResponse parsed;
  std::string backend;
  std::uint64_t timestamp = 0;  // logical clock
  int attempt = 1;
  std::vector<std::string> rois;

  nlohmann::json to_json() const;
};

nlohmann::json to_json(const ParsedResponse& p);

using EventSink = std::function<void(const nlohmann::json&)>;

// One diagnostic session. Strictly sequential; not shared across threads.
class Session {
 public:
  Session(std::string id, CaseInput input, SessionConfig cfg, const EngineResources& resources,
          BackendSet backends, EventSink sink = {});

  // Screening pipeline and first reasoner turn. Never throws for backend faults:
  // they land in Aborted with a recorded cause.
  void start();

  // Exams the reasoner asked for and still unanswered.
  std::vector<std::string> pending_exams() const;
  std::vector<std::string> pending_tools() const;
  bool awaiting_evidence() const;

  // One evidence round. `human` answers win over the exam oracle.
  void execute(const std::map<std::string, std::string>& human = {});
  // Definitive turn: Done, or re-entry when new requests arrive and rounds remain.
  void conclude();
  // Drives the session to Done/Aborted with oracle-only exams.
  void run();

  const std::string& id() const { return id_; }
  const CaseInput& input() const { return input_; }
  const SessionConfig& config() const { return cfg_; }
  Stage stage() const { return stage_; }
  bool finished() const { return stage_ == Stage::kDone || stage_ == Stage::kAborted; }
  const std::vector<TurnRecord>& turns() const { return turns_; }
  const std::vector<Evidence>& evidence() const { return evidence_; }
  const std::vector<std::string>& stage_trace() const { return trace_; }
  const std::vector<std::string>& flags() const { return flags_; }
  const std::vector<nlohmann::json>& events() const { return events_; }
  int rounds() const { return rounds_; }
  const std::optional<std::string>& final_diagnosis() const { return final_; }
  const std::vector<std::string>& differential() const { return differential_; }
  std::vector<std::string> first_differential() const;
  bool inconclusive() const { return inconclusive_; }
  const std::string& abort_cause() const { return abort_cause_; }
  int retries_used() const { return retries_; }

  nlohmann::json state_json() const;
  std::string log_text() const;  // JSONL

 private:
  void emit(nlohmann::json event);
  void enter(Stage s, std::string label);
  void abort(const std::string& cause);
  void screen(int round);
  // Reasoner turn with one retry on malformed output; nullopt when aborted.
  std::optional<ParsedResponse> reasoner_turn(const std::string& stage_label, const std::string& user_prompt);
  void adopt_requests(const ParsedResponse& p);
  void run_tool(const std::string& tool);
  std::string interpret(const ToolSpec& spec, const RoiEntry& roi, const std::string& category,
                        const std::vector<std::string>& refs, bool icl);
  std::vector<std::string> references_for(const Toolkit& tk, const std::string& category, std::size_t n) const;
  std::string joined(const std::string& kind) const;

  std::string id_;
  CaseInput input_;
  SessionConfig cfg_;
  const EngineResources* res_;
  BackendSet backends_;
  EventSink sink_;

  Stage stage_ = Stage::kExploration;
  std::vector<std::string> trace_;
  std::vector<ChatMessage> history_;
  std::vector<TurnRecord> turns_;
  std::vector<Evidence> evidence_;
  std::vector<std::string> flags_;
  std::vector<nlohmann::json> events_;
  std::vector<std::string> exams_;  // pending T
  std::vector<std::string> tools_;  // pending C
  std::vector<std::string> differential_;
  std::optional<std::string> final_;
  std::string findings_;
  bool inconclusive_ = false;
  bool started_ = false;
  std::string abort_cause_;
  int rounds_ = 0;
  int retries_ = 0;
  std::uint64_t clock_ = 0;
};

// Parses "yes"/"no" interpreter answers; anything else counts as no.
bool interpreter_says_yes(std::string_view text);

// Appends one JSON object per line, flushing each.
class JsonlWriter {
 public:
  explicit JsonlWriter(const std::filesystem::path& path);
  void operator()(const nlohmann::json& event);

 private:
  std::shared_ptr<std::ofstream> out_;
};

std::vector<nlohmann::json> read_session_log(const std::filesystem::path& path);  // FormatError

inline constexpr int kSessionLogVersion = 1;

}  // namespace dx
