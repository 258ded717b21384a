#include "dx/protocol.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <set>

#include "dx/errors.hpp"

namespace dx {

using nlohmann::json;

namespace {

bool iequals(std::string_view a, std::string_view b) {
  return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin(), [](char x, char y) {
           return std::tolower(static_cast<unsigned char>(x)) == std::tolower(static_cast<unsigned char>(y));
         });
}

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

// Whole-word, case-insensitive containment.
bool mentions(std::string_view hay, std::string_view needle) {
  const auto h = lower(hay);
  const auto n = lower(needle);
  if (n.empty()) return false;
  for (auto p = h.find(n); p != std::string::npos; p = h.find(n, p + 1)) {
    const bool left = p == 0 || !std::isalnum(static_cast<unsigned char>(h[p - 1]));
    const std::size_t e = p + n.size();
    const bool right = e == h.size() || !std::isalnum(static_cast<unsigned char>(h[e]));
    if (left && right) return true;
  }
  return false;
}

int grade_of(std::string_view category) {
  int g = 0;
  for (char c : category) {
    if (std::isdigit(static_cast<unsigned char>(c))) g = g * 10 + (c - '0');
  }
  return g;
}

std::string wall_time() {
  const auto now = std::chrono::system_clock::now();
  return std::to_string(std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count());
}

std::vector<Level> parse_levels(const json& j) {
  std::vector<Level> out;
  for (const auto& s : j) out.push_back(parse_level(s.get<std::string>()));
  return out;
}

std::string_view to_string(ToolVerdict v) {
  switch (v) {
    case ToolVerdict::kPresence: return "presence";
    case ToolVerdict::kGrade: return "grade";
    case ToolVerdict::kGleason: return "gleason";
  }
  return "?";
}

ToolVerdict parse_verdict(std::string_view s) {
  if (s == "presence") return ToolVerdict::kPresence;
  if (s == "grade") return ToolVerdict::kGrade;
  if (s == "gleason") return ToolVerdict::kGleason;
  throw FormatError("unknown tool verdict '" + std::string(s) + "'");
}

}  // namespace

std::string_view to_string(Stage s) {
  switch (s) {
    case Stage::kExploration: return "Exploration";
    case Stage::kExecution: return "Execution";
    case Stage::kExploitation: return "Exploitation";
    case Stage::kDone: return "Done";
    case Stage::kAborted: return "Aborted";
  }
  return "?";
}

std::string_view to_string(Protocol p) { return p == Protocol::kOnePass ? "op" : "es"; }

Protocol parse_protocol(std::string_view text) {
  if (iequals(text, "op")) return Protocol::kOnePass;
  if (iequals(text, "es")) return Protocol::kEvidenceSeeking;
  throw ConfigError("protocol must be op or es, got '" + std::string(text) + "'");
}

bool interpreter_says_yes(std::string_view text) {
  const auto t = lower(trim(text));
  return t.rfind("yes", 0) == 0 && (t.size() == 3 || !std::isalpha(static_cast<unsigned char>(t[3])));
}

// ---- registry ----

ToolRegistry ToolRegistry::defaults() {
  ToolRegistry r;
  auto subtype = [](std::string name, std::string category) {
    ToolSpec s;
    s.name = std::move(name);
    s.toolkit = "rcc-subtype";
    s.verdict = ToolVerdict::kPresence;
    s.categories = {category};
    s.label = std::move(category);
    s.plan = "rcc-kmeans-8";
    return s;
  };
  r.tools["tool-ccRCC"] = subtype("tool-ccRCC", "ccRCC");
  r.tools["tool-chRCC"] = subtype("tool-chRCC", "chRCC");
  r.tools["tool-pRCC"] = subtype("tool-pRCC", "pRCC");

  ToolSpec nuclear;
  nuclear.name = "tool-Nuclear";
  nuclear.toolkit = "rcc-nuclear";
  nuclear.verdict = ToolVerdict::kGrade;
  nuclear.categories = {"grade-1", "grade-2", "grade-3", "grade-4"};
  nuclear.label = "Nuclear grade";
  nuclear.levels = {Level::k20x};
  r.tools[nuclear.name] = nuclear;

  ToolSpec gleason;
  gleason.name = "tool-Gleason";
  gleason.toolkit = "prostate-gleason";
  gleason.verdict = ToolVerdict::kGleason;
  gleason.label = "Gleason score";
  gleason.levels = {Level::k20x};
  gleason.icl = false;
  gleason.icl_count = 0;
  r.tools[gleason.name] = gleason;

  ToolSpec invasion;
  invasion.name = "tool-invasion";
  invasion.toolkit = "invasion";
  invasion.verdict = ToolVerdict::kPresence;
  invasion.categories = {"vessel-invasion", "nerve-invasion"};
  invasion.label = "Invasion";
  invasion.levels = {Level::k5x, Level::k10x};
  invasion.any_vote = true;
  invasion.positive = "detected";
  invasion.negative = "not detected";
  r.tools[invasion.name] = invasion;
  return r;
}

ToolRegistry ToolRegistry::from_json(const json& j) {
  ToolRegistry r;
  try {
    for (const auto& [name, t] : j.at("tools").items()) {
      ToolSpec s;
      s.name = name;
      s.toolkit = t.at("toolkit").get<std::string>();
      s.verdict = parse_verdict(t.value("verdict", "presence"));
      s.categories = t.value("categories", std::vector<std::string>{});
      s.label = t.value("label", name);
      s.plan = t.value("plan", "");
      if (t.contains("levels")) s.levels = parse_levels(t.at("levels"));
      s.k = t.value("k", std::size_t{5});
      s.icl = t.value("interpreter", "icl") == "icl";
      s.icl_count = t.value("icl_count", std::size_t{10});
      s.any_vote = t.value("vote", "majority") == "any";
      s.positive = t.value("positive", "positive");
      s.negative = t.value("negative", "negative");
      s.area_per_patch = t.value("area_per_patch", 1.0);
      r.tools[name] = std::move(s);
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed tool registry: ") + e.what());
  } catch (const NotFoundError& e) {
    throw FormatError(std::string("malformed tool registry: ") + e.what());
  }
  return r;
}

json ToolRegistry::to_json() const {
  json out = json::object();
  for (const auto& [name, s] : tools) {
    json levels = json::array();
    for (Level l : s.levels) levels.push_back(to_string(l));
    json t = {{"toolkit", s.toolkit},
              {"verdict", to_string(s.verdict)},
              {"categories", s.categories},
              {"label", s.label},
              {"levels", levels},
              {"k", s.k},
              {"interpreter", s.icl ? "icl" : "general"},
              {"icl_count", s.icl_count},
              {"vote", s.any_vote ? "any" : "majority"},
              {"positive", s.positive},
              {"negative", s.negative},
              {"area_per_patch", s.area_per_patch}};
    if (!s.plan.empty()) t["plan"] = s.plan;
    out[name] = t;
  }
  return {{"tools", out}};
}

const ToolSpec* ToolRegistry::find(std::string_view name) const {
  for (const auto& [k, v] : tools) {
    if (iequals(k, name)) return &v;
  }
  return nullptr;
}

void ToolRegistry::check_roster(const std::vector<ToolDescriptor>& roster) const {
  for (const auto& t : roster) {
    if (!find(t.name)) throw ConfigError("tool '" + t.name + "' is offered to the reasoner but not registered");
  }
}

json SessionConfig::to_json() const {
  return {{"protocol", to_string(protocol)},
          {"screening_toolkit", screening_toolkit},
          {"screening_plan", describe(screening_plan)},
          {"max_rounds", max_rounds},
          {"retry_budget", retry_budget},
          {"seed", seed},
          {"allow_tools", allow_tools},
          {"allow_exams", allow_exams},
          {"oracle_fallback", oracle_fallback},
          {"reentry_rescreen", reentry_rescreen},
          {"icl_count", icl_count ? json(*icl_count) : json(nullptr)}};
}

void SessionConfig::merge(const json& j) {
  if (!j.is_object()) throw ConfigError("session config must be an object");
  static const std::set<std::string> kKeys{"protocol",    "screening_toolkit", "screening_plan",   "max_rounds",
                                           "retry_budget", "seed",              "allow_tools",      "allow_exams",
                                           "oracle_fallback", "reentry_rescreen", "wall_clock",     "icl_count"};
  for (const auto& [key, _] : j.items()) {
    if (!kKeys.count(key)) throw ConfigError("unknown session config key '" + key + "'");
  }
  try {
    if (j.contains("protocol")) protocol = parse_protocol(j.at("protocol").get<std::string>());
    if (j.contains("screening_toolkit")) screening_toolkit = j.at("screening_toolkit").get<std::string>();
    if (j.contains("screening_plan")) screening_plan = parse_plan(j.at("screening_plan").get<std::string>());
    if (j.contains("max_rounds")) {
      const auto v = j.at("max_rounds").get<long>();
      if (v < 1) throw ConfigError("max_rounds must be at least 1");
      max_rounds = static_cast<std::size_t>(v);
    }
    if (j.contains("retry_budget")) {
      retry_budget = j.at("retry_budget").get<int>();
      if (retry_budget < 0) throw ConfigError("retry_budget must be non-negative");
    }
    if (j.contains("seed")) seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("allow_tools")) allow_tools = j.at("allow_tools").get<bool>();
    if (j.contains("allow_exams")) allow_exams = j.at("allow_exams").get<bool>();
    if (j.contains("oracle_fallback")) oracle_fallback = j.at("oracle_fallback").get<bool>();
    if (j.contains("reentry_rescreen")) reentry_rescreen = j.at("reentry_rescreen").get<bool>();
    if (j.contains("wall_clock")) wall_clock = j.at("wall_clock").get<bool>();
    if (j.contains("icl_count")) {
      if (j.at("icl_count").is_null()) icl_count.reset();
      else icl_count = j.at("icl_count").get<std::size_t>();
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad session config: ") + e.what());
  }
}

json to_json(const ParsedResponse& p) {
  json j = {{"diff_list", p.diff_list},   {"diff_list_present", p.diff_list_present},
            {"exam_list", p.exam_list},   {"exam_list_present", p.exam_list_present},
            {"tool_list", p.tool_list},   {"tool_list_present", p.tool_list_present},
            {"tag_error", p.tag_error},   {"presentation_error", p.presentation_error},
            {"format_errors", p.format_errors}};
  j["boxed"] = p.boxed ? json(*p.boxed) : json(nullptr);
  return j;
}

json Evidence::to_json() const {
  return {{"kind", kind}, {"name", name},         {"text", text},           {"source", source},
          {"round", round}, {"simulated", simulated}, {"available", available}, {"rois", rois}};
}

json TurnRecord::to_json() const {
  return {{"index", index},     {"stage", stage},       {"prompt", prompt},     {"raw", raw},
          {"parsed", dx::to_json(parsed)}, {"backend", backend}, {"timestamp", timestamp},
          {"attempt", attempt}, {"rois", rois}};
}

// ---- session ----

Session::Session(std::string id, CaseInput input, SessionConfig cfg, const EngineResources& resources,
                 BackendSet backends, EventSink sink)
    : id_(std::move(id)),
      input_(std::move(input)),
      cfg_(std::move(cfg)),
      res_(&resources),
      backends_(std::move(backends)),
      sink_(std::move(sink)) {
  if (cfg_.max_rounds == 0) throw ConfigError("max_rounds must be at least 1");
  if (cfg_.retry_budget < 0) throw ConfigError("retry budget must be non-negative");
}

void Session::emit(json event) {
  event["seq"] = clock_++;
  event["session_id"] = id_;
  if (cfg_.wall_clock) event["wall_time"] = wall_time();
  events_.push_back(event);
  if (sink_) sink_(events_.back());
}

void Session::enter(Stage s, std::string label) {
  stage_ = s;
  if (s != Stage::kExploitation) trace_.push_back(label);
  emit({{"event", "stage"}, {"stage", to_string(s)}, {"label", std::move(label)}});
}

void Session::abort(const std::string& cause) {
  abort_cause_ = cause;
  enter(Stage::kAborted, "Aborted");
  emit({{"event", "end"}, {"stage", "Aborted"}, {"cause", cause}, {"final", nullptr}, {"inconclusive", true}});
}

std::vector<std::string> Session::references_for(const Toolkit& tk, const std::string& category,
                                                 std::size_t n) const {
  std::vector<std::string> out;
  std::set<std::string> seen;
  for (const auto& p : tk.prototypes) {
    if (p.category != category) continue;
    for (const auto& id : p.support_ids) {
      if (out.size() >= n) return out;
      if (seen.insert(id).second) out.push_back(id);
    }
  }
  return out;
}

std::string Session::interpret(const ToolSpec& spec, const RoiEntry& roi, const std::string& category,
                               const std::vector<std::string>& refs, bool icl) {
  BackendRequest r;
  r.role = Role::kInterpreter;
  r.mode = icl && !refs.empty() ? "icl" : "general";
  if (r.mode == "icl") {
    r.prompt = render_prompt(PromptKind::kInterpreterIcl, {});
    r.references = refs;
  } else {
    PromptContext ctx;
    ctx.case_info = input_.case_info;
    r.prompt = render_prompt(PromptKind::kInterpreterGeneral, ctx);
  }
  r.images = {roi.ref};
  r.metadata = {{"session", id_}, {"tool", spec.name},         {"category", category},
                {"level", to_string(roi.level)}, {"patch", roi.ref}, {"round", rounds_}};
  validate_interpreter_request(r);
  return backends_.at(Role::kInterpreter).call(r).text;
}

void Session::screen(int round) {
  const bool initial = round == 0;
  Evidence ev;
  ev.kind = "finding";
  ev.name = "screening";
  ev.round = round;
  if (input_.slide_id.empty()) {
    if (initial) {
      ev.source = "engine";
      ev.text = "No slide available; case text only.";
      evidence_.push_back(ev);
      emit({{"event", "evidence"}, {"evidence", ev.to_json()}});
    }
    return;
  }
  if (!res_->corpus || !res_->toolkits) throw SessionError("no corpus or toolkit library loaded");
  const Toolkit& tk = res_->toolkits->get(cfg_.screening_toolkit);
  Rng rng(cfg_.seed + static_cast<std::uint64_t>(round));
  std::optional<HighlightResult> hl;
  try {
    hl = highlight_slide(*res_->corpus, input_.slide_id, tk, cfg_.screening_plan, rng);
  } catch (const EmptyHighlightError&) {
    ev.source = "engine";
    ev.text = "No suspicious region was highlighted on the slide.";
    flags_.push_back("no suspicious region");
  }
  if (hl) {
    BackendRequest r;
    r.role = Role::kInterpreter;
    r.mode = "general";
    PromptContext ctx;
    ctx.case_info = input_.case_info;
    r.prompt = render_prompt(PromptKind::kInterpreterGeneral, ctx);
    r.images = hl->selection.refs();
    r.metadata = {{"session", id_}, {"stage", "screening"}, {"plan", hl->selection.plan_name}, {"round", round}};
    ev.source = "interpreter";
    ev.rois = r.images;
    ev.text = backends_.at(Role::kInterpreter).call(r).text;
  }
  evidence_.push_back(ev);
  emit({{"event", "evidence"}, {"evidence", ev.to_json()}});
  if (initial) findings_ = ev.text;
}

std::optional<ParsedResponse> Session::reasoner_turn(const std::string& stage_label, const std::string& user_prompt) {
  std::vector<ChatMessage> msgs{{"system", reasoner_system_prompt()}};
  msgs.insert(msgs.end(), history_.begin(), history_.end());
  msgs.push_back({"user", user_prompt});
  const std::string prompt = render_conversation(msgs);

  for (int attempt = 1;; ++attempt) {
    BackendRequest r;
    r.role = Role::kReasoner;
    r.prompt = prompt;
    r.metadata = {{"session", id_}, {"stage", stage_label}, {"turn", turns_.size() + 1}, {"attempt", attempt}};
    BackendResponse resp;
    try {
      resp = backends_.at(Role::kReasoner).call(r);
    } catch (const Error& e) {
      abort(std::string("reasoner unavailable: ") + e.what());
      return std::nullopt;
    }
    TurnRecord t;
    t.index = static_cast<int>(turns_.size()) + 1;
    t.stage = stage_label;
    t.prompt = prompt;
    t.raw = resp.text;
    t.parsed = parse_response(resp.text);
    t.backend = backends_.at(Role::kReasoner).id();
    t.timestamp = clock_;
    t.attempt = attempt;
    turns_.push_back(t);
    emit({{"event", "turn"}, {"turn", t.to_json()}});
    if (t.parsed.well_formed()) {
      history_.push_back({"user", user_prompt});
      history_.push_back({"assistant", resp.text});
      return t.parsed;
    }
    if (attempt == 1 && retries_ < cfg_.retry_budget) {
      ++retries_;
      flags_.push_back("malformed reply retried at turn " + std::to_string(t.index));
      continue;
    }
    flags_.push_back("malformed reply at turn " + std::to_string(t.index));
    inconclusive_ = true;
    if (t.parsed.diff_list_present) differential_ = t.parsed.diff_list;
    enter(Stage::kDone, "Done");
    emit({{"event", "end"}, {"stage", "Done"}, {"final", nullptr}, {"inconclusive", true},
          {"differential", differential_}, {"cause", "malformed reasoner output"}});
    return std::nullopt;
  }
}

void Session::adopt_requests(const ParsedResponse& p) {
  if (p.diff_list_present) differential_ = p.diff_list;
  exams_.clear();
  tools_.clear();
  if (cfg_.allow_exams) {
    exams_ = p.exam_list;
  } else if (!p.exam_list.empty()) {
    flags_.push_back("exam requests disabled");
  }
  if (cfg_.allow_tools) {
    tools_ = p.tool_list;
  } else if (!p.tool_list.empty()) {
    flags_.push_back("tool calls disabled");
  }
  if (p.exam_list_empty()) flags_.push_back("empty exam list");
}

std::vector<std::string> Session::first_differential() const {
  for (const auto& t : turns_) {
    if (t.parsed.well_formed()) return t.parsed.diagnoses();
  }
  return {};
}

void Session::start() {
  if (started_) throw SessionError("session " + id_ + " already started");
  started_ = true;
  emit({{"event", "header"},
        {"format", "dx-session-log"},
        {"version", kSessionLogVersion},
        {"case_id", input_.case_id},
        {"slide_id", input_.slide_id},
        {"case_info", input_.case_info},
        {"config", cfg_.to_json()}});
  enter(Stage::kExploration, cfg_.protocol == Protocol::kOnePass ? "OnePass" : "Exploration");
  try {
    screen(0);
  } catch (const Error& e) {
    abort(std::string("screening failed: ") + e.what());
    return;
  }

  PromptContext ctx;
  ctx.case_info = input_.case_info;
  ctx.findings = findings_.empty() ? std::nullopt : std::optional<std::string>("Slide review findings:\n" + findings_);
  ctx.tools = cfg_.roster;

  if (cfg_.protocol == Protocol::kOnePass) {
    auto p = reasoner_turn("OnePass", render_prompt(PromptKind::kOnePass, ctx));
    if (!p) return;
    if (p->boxed) {
      final_ = p->boxed;
    } else {
      inconclusive_ = true;
      differential_ = p->diff_list;
    }
    if (p->diff_list_present) differential_ = p->diff_list;
    enter(Stage::kDone, "Done");
    emit({{"event", "end"}, {"stage", "Done"}, {"final", final_ ? json(*final_) : json(nullptr)},
          {"inconclusive", inconclusive_}, {"differential", differential_}});
    return;
  }

  auto p = reasoner_turn("Exploration", render_prompt(PromptKind::kExploration, ctx));
  if (!p) return;
  if (p->boxed) {
    final_ = p->boxed;
    if (p->diff_list_present) differential_ = p->diff_list;
    enter(Stage::kDone, "Done");
    emit({{"event", "end"}, {"stage", "Done"}, {"final", *final_}, {"inconclusive", false},
          {"differential", differential_}});
    return;
  }
  adopt_requests(*p);
}

std::vector<std::string> Session::pending_exams() const { return stage_ == Stage::kExploration ? exams_ : std::vector<std::string>{}; }
std::vector<std::string> Session::pending_tools() const { return stage_ == Stage::kExploration ? tools_ : std::vector<std::string>{}; }

bool Session::awaiting_evidence() const { return started_ && stage_ == Stage::kExploration; }

void Session::run_tool(const std::string& tool) {
  const ToolSpec* spec = res_->registry.find(tool);
  if (!spec) {
    flags_.push_back("unregistered tool skipped: " + tool);
    emit({{"event", "flag"}, {"flag", "unregistered tool"}, {"tool", tool}});
    return;
  }
  Evidence ev;
  ev.kind = "observation";
  ev.name = spec->name;
  ev.source = "tool";
  ev.round = rounds_;
  auto unavailable = [&](const std::string& why) {
    ev.available = false;
    ev.text = spec->label + ": unavailable";
    flags_.push_back(spec->name + " unavailable: " + why);
  };

  try {
    if (input_.slide_id.empty() || !res_->corpus || !res_->toolkits) {
      unavailable("no slide");
    } else if (!res_->toolkits->contains(spec->toolkit)) {
      unavailable("toolkit '" + spec->toolkit + "' not loaded");
    } else {
      const Toolkit& tk = res_->toolkits->get(spec->toolkit);
      const bool icl = cfg_.icl_count ? *cfg_.icl_count > 0 : spec->icl;
      const std::size_t n_refs = cfg_.icl_count.value_or(spec->icl_count);

      if (spec->verdict == ToolVerdict::kGleason) {
        const Level level = spec->levels.empty() ? Level::k20x : spec->levels.front();
        const Toolkit sub = tk.at_level(level);
        const auto s = similarity_matrix(res_->corpus->view(input_.slide_id, level), sub, input_.slide_id);
        try {
          ev.text = spec->label + ": " + gleason_area_map(s, sub, spec->area_per_patch).score();
        } catch (const NoTumorError&) {
          ev.text = spec->label + ": no tumor region found";
        }
      } else {
        // Query RoIs per category.
        std::map<std::string, std::vector<RoiEntry>> queries;
        if (tk.mode == ToolkitMode::kGrounding) {
          Rng rng(cfg_.seed ^ (0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(rounds_ + 1)) ^
                  std::hash<std::string>{}(spec->name));
          try {
            const auto plan = spec->plan.empty() ? pan_cancer_plan() : parse_plan(spec->plan);
            const auto hl = highlight_slide(*res_->corpus, input_.slide_id, tk, plan, rng);
            for (const auto& c : spec->categories) queries[c] = hl.selection.entries;
            ev.rois = hl.selection.refs();
          } catch (const EmptyHighlightError&) {
            flags_.push_back(spec->name + ": no highlighted region");
          }
        } else {
          for (Level level : spec->levels) {
            if (!res_->corpus->has(input_.slide_id, level)) continue;
            const auto per = localize_categories(*res_->corpus, input_.slide_id, tk, level, spec->k);
            for (const auto& c : spec->categories) {
              auto it = per.find(c);
              if (it == per.end()) continue;
              auto& q = queries[c];
              q.insert(q.end(), it->second.entries.begin(), it->second.entries.end());
              for (const auto& e : it->second.entries) ev.rois.push_back(e.ref);
            }
          }
        }

        std::map<std::string, bool> positive;
        for (const auto& c : spec->categories) {
          const auto refs = icl ? references_for(tk, c, n_refs) : std::vector<std::string>{};
          std::size_t yes = 0;
          const auto& q = queries[c];
          for (const auto& roi : q) {
            if (interpreter_says_yes(interpret(*spec, roi, c, refs, icl))) ++yes;
          }
          positive[c] = !q.empty() && (spec->any_vote ? yes > 0 : 2 * yes > q.size());
        }
        if (spec->verdict == ToolVerdict::kGrade) {
          int best = 0;
          for (const auto& [c, pos] : positive) {
            if (pos) best = std::max(best, grade_of(c));
          }
          ev.text = spec->label + ": " + (best > 0 ? std::to_string(best) : std::string("indeterminate"));
        } else {
          const bool any = std::any_of(positive.begin(), positive.end(), [](const auto& kv) { return kv.second; });
          ev.text = spec->label + ": " + (any ? spec->positive : spec->negative);
        }
      }
    }
  } catch (const Error& e) {
    unavailable(e.what());
  }
  evidence_.push_back(ev);
  emit({{"event", "evidence"}, {"evidence", ev.to_json()}});
}

void Session::execute(const std::map<std::string, std::string>& human) {
  if (!awaiting_evidence()) {
    throw SessionError("session " + id_ + " is not awaiting evidence (stage " + std::string(to_string(stage_)) + ")");
  }
  enter(Stage::kExecution, "Execution");
  ++rounds_;

  for (const auto& tool : tools_) run_tool(tool);

  std::vector<std::string> unanswered;
  for (const auto& exam : exams_) {
    const bool answered = std::any_of(human.begin(), human.end(), [&](const auto& kv) {
      return iequals(kv.first, exam) || mentions(exam, kv.first);
    });
    if (!answered) unanswered.push_back(exam);
  }
  for (const auto& [name, answer] : human) {
    Evidence ev;
    ev.kind = "exam";
    ev.name = name;
    ev.text = name + ": " + answer;
    ev.source = "human";
    ev.round = rounds_;
    evidence_.push_back(ev);
    emit({{"event", "evidence"}, {"evidence", ev.to_json()}});
  }
  if (!unanswered.empty()) {
    Evidence ev;
    ev.kind = "exam";
    ev.name = "oracle";
    ev.round = rounds_;
    if (!cfg_.oracle_fallback) {
      ev.source = "engine";
      ev.available = false;
      for (const auto& e : unanswered) ev.text += (ev.text.empty() ? "" : "\n") + e + ": not provided";
    } else {
      BackendRequest r;
      r.role = Role::kExamOracle;
      std::string list;
      for (const auto& e : unanswered) list += "\n- " + e;
      r.prompt = "Case information:\n" + input_.case_info + "\n\nRequested examinations:" + list;
      r.metadata = {{"session", id_}, {"exams", unanswered}, {"round", rounds_}};
      ev.source = "oracle";
      ev.simulated = true;
      try {
        ev.text = backends_.at(Role::kExamOracle).call(r).text;
      } catch (const Error& e) {
        ev.available = false;
        ev.text.clear();
        for (const auto& x : unanswered) ev.text += (ev.text.empty() ? "" : "\n") + x + ": result unavailable";
        flags_.push_back(std::string("exam oracle failed: ") + e.what());
      }
    }
    evidence_.push_back(ev);
    emit({{"event", "evidence"}, {"evidence", ev.to_json()}});
  }
  exams_.clear();
  tools_.clear();
}

std::string Session::joined(const std::string& kind) const {
  std::string out;
  for (const auto& e : evidence_) {
    if (e.kind != kind || e.text.empty()) continue;
    if (!out.empty()) out += '\n';
    out += e.text;
  }
  return out.empty() ? "None" : out;
}

void Session::conclude() {
  if (stage_ != Stage::kExecution) {
    throw SessionError("session " + id_ + " has no completed evidence round to conclude");
  }
  enter(Stage::kExploitation, "Exploitation");
  PromptContext ctx;
  ctx.exam_results = joined("exam");
  ctx.observation_results = joined("observation");
  auto p = reasoner_turn("Exploitation", render_prompt(PromptKind::kExploitation, ctx));
  if (!p) return;
  if (p->diff_list_present) differential_ = p->diff_list;
  if (p->boxed) {
    final_ = p->boxed;
    enter(Stage::kDone, "Done");
    emit({{"event", "end"}, {"stage", "Done"}, {"final", *final_}, {"inconclusive", false},
          {"differential", differential_}});
    return;
  }
  const bool wants_more = (cfg_.allow_exams && !p->exam_list.empty()) || (cfg_.allow_tools && !p->tool_list.empty());
  if (wants_more && static_cast<std::size_t>(rounds_) < cfg_.max_rounds) {
    adopt_requests(*p);
    enter(Stage::kExploration, "Exploration-reentry");
    if (cfg_.reentry_rescreen) {
      try {
        screen(rounds_);
      } catch (const Error& e) {
        abort(std::string("re-screening failed: ") + e.what());
      }
    }
    return;
  }
  inconclusive_ = true;
  if (wants_more) flags_.push_back("max rounds reached");
  enter(Stage::kDone, "Done");
  emit({{"event", "end"}, {"stage", "Done"}, {"final", nullptr}, {"inconclusive", true},
        {"differential", differential_}});
}

void Session::run() {
  if (!started_) start();
  while (!finished()) {
    execute();
    if (finished()) break;
    conclude();
  }
}

json Session::state_json() const {
  json turns = json::array();
  for (const auto& t : turns_) turns.push_back(t.to_json());
  json ev = json::array();
  for (const auto& e : evidence_) ev.push_back(e.to_json());
  return {{"session_id", id_},
          {"case_id", input_.case_id},
          {"slide_id", input_.slide_id},
          {"stage", to_string(stage_)},
          {"stage_trace", trace_},
          {"config", cfg_.to_json()},
          {"rounds", rounds_},
          {"awaiting_evidence", awaiting_evidence()},
          {"pending_exams", pending_exams()},
          {"pending_tools", pending_tools()},
          {"differential", differential_},
          {"final_diagnosis", final_ ? json(*final_) : json(nullptr)},
          {"inconclusive", inconclusive_},
          {"abort_cause", abort_cause_},
          {"flags", flags_},
          {"turns", turns},
          {"evidence", ev}};
}

std::string Session::log_text() const {
  std::string out;
  for (const auto& e : events_) out += e.dump(-1, ' ', false, json::error_handler_t::replace) + "\n";
  return out;
}

JsonlWriter::JsonlWriter(const std::filesystem::path& path)
    : out_(std::make_shared<std::ofstream>(path, std::ios::binary | std::ios::trunc)) {
  if (!*out_) throw NotFoundError("cannot write session log " + path.string());
}

void JsonlWriter::operator()(const json& event) {
  *out_ << event.dump(-1, ' ', false, json::error_handler_t::replace) << '\n';
  out_->flush();
}

std::vector<json> read_session_log(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw NotFoundError("cannot open session log " + path.string());
  std::vector<json> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(json::parse(line));
    } catch (const json::parse_error& e) {
      throw FormatError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  if (out.empty() || out.front().value("event", "") != "header") {
    throw FormatError(path.string() + ": session log has no header");
  }
  if (out.front().value("version", 0) != kSessionLogVersion) {
    throw FormatError(path.string() + ": unsupported session log version");
  }
  return out;
}

}  // namespace dx
