#include "dx/evaluation.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <regex>
#include <set>
#include <sstream>
#include <thread>

#include "dx/errors.hpp"

namespace dx {

using nlohmann::json;

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::string pct(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << 100.0 * v;
  return os.str();
}

std::string fixed2(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << v;
  return os.str();
}

json opt(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

json prf_json(const Prf& p) {
  return {{"precision", p.precision}, {"recall", p.recall}, {"f1", p.f1},
          {"tp", p.tp},               {"fp", p.fp},         {"fn", p.fn},
          {"tn", p.tn},               {"precision_undefined", p.precision_undefined},
          {"recall_undefined", p.recall_undefined}};
}

CaseResult run_one(const CaseFixture& f, Protocol protocol, const RunOptions& options) {
  CaseResult r;
  r.case_id = f.case_id;
  try {
    BackendSet backends;
    if (f.script) {
      backends = BackendSet::scripted(std::make_shared<MockScript>(MockScript::from_json(*f.script)));
    } else if (f.simulation) {
      backends = simulated_backends(*f.simulation);
    } else if (options.live) {
      backends = *options.live;
    } else {
      throw ConfigError("fixture " + f.case_id + " has neither a script nor live backends");
    }
    static const EngineResources kNoResources;
    const EngineResources& res = options.resources ? *options.resources : kNoResources;
    SessionConfig cfg = options.session;
    cfg.protocol = protocol;

    Session s(f.case_id, CaseInput{f.case_id, f.case_info, f.slide_id}, cfg, res, std::move(backends));
    s.start();
    bool first = true;
    while (!s.finished()) {
      s.execute(first ? f.human_exams : std::map<std::string, std::string>{});
      first = false;
      if (!s.finished()) s.conclude();
    }

    r.stage = std::string(to_string(s.stage()));
    r.stage_trace = s.stage_trace();
    r.final_diagnosis = s.final_diagnosis();
    r.inconclusive = s.inconclusive();
    r.initial_ddx = s.first_differential();
    r.differential = s.differential();
    r.reasoner_turns = s.turns().size();
    for (const auto& t : s.turns()) {
      if (t.stage != "Exploration" && t.stage != "OnePass") continue;
      std::string text;
      if (t.parsed.think) text += *t.parsed.think;
      if (t.parsed.answer) text += "\n" + *t.parsed.answer;
      if (!t.parsed.think && !t.parsed.answer) text = t.raw;
      r.pre_evidence_text.push_back(text);
    }
    for (const auto& e : s.evidence()) {
      if (e.kind == "observation") r.observations.push_back(e.text);
    }
    r.log = s.log_text();
    if (options.transcript_dir) {
      std::filesystem::create_directories(*options.transcript_dir);
      std::ofstream out(*options.transcript_dir / (f.case_id + ".jsonl"), std::ios::binary);
      out << r.log;
    }
    r.ok = s.stage() == Stage::kDone;
    if (!r.ok) r.error = s.abort_cause();
  } catch (const std::exception& e) {
    r.ok = false;
    r.error = e.what();
  }
  return r;
}

}  // namespace

// ---- fixtures ----

CaseFixture CaseFixture::from_json(const json& j, const std::filesystem::path& base_dir) {
  try {
    CaseFixture f;
    f.case_id = j.at("case_id").get<std::string>();
    f.case_info = j.value("case_info", "");
    f.slide_id = j.value("slide_id", "");
    f.truth = j.at("truth").get<std::string>();
    if (j.contains("nuclear_grade") && !j.at("nuclear_grade").is_null()) {
      const int g = j.at("nuclear_grade").get<int>();
      if (g < 1 || g > 4) throw FormatError("nuclear grade must be 1..4");
      f.nuclear_grade = g;
    }
    if (j.contains("gleason") && !j.at("gleason").is_null()) {
      const auto g = j.at("gleason").get<std::vector<int>>();
      if (g.size() != 2) throw FormatError("gleason truth must be [primary, secondary]");
      for (int p : g) {
        if (p < 3 || p > 5) throw FormatError("gleason patterns must be 3..5");
      }
      f.gleason = std::make_pair(g[0], g[1]);
    }
    if (j.contains("invasion") && !j.at("invasion").is_null()) f.invasion = j.at("invasion").get<bool>();
    if (j.contains("script")) {
      const auto& s = j.at("script");
      if (s.is_string()) {
        const auto path = base_dir / s.get<std::string>();
        std::ifstream in(path);
        if (!in) throw NotFoundError("cannot open script " + path.string());
        f.script = json::parse(in);
      } else {
        f.script = s;
      }
    }
    if (j.contains("simulation")) f.simulation = SynthCase::from_json(j.at("simulation"));
    f.live = j.value("live", false);
    f.protocol = parse_protocol(j.value("protocol", "es"));
    f.human_exams = j.value("human_exams", std::map<std::string, std::string>{});
    if (!f.script && !f.simulation && !f.live) {
      throw FormatError("fixture " + f.case_id + " must script its backends or be marked live");
    }
    return f;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed fixture: ") + e.what());
  }
}

json CaseFixture::to_json() const {
  json j = {{"case_id", case_id}, {"case_info", case_info}, {"slide_id", slide_id},
            {"truth", truth},     {"protocol", to_string(protocol)}};
  if (nuclear_grade) j["nuclear_grade"] = *nuclear_grade;
  if (gleason) j["gleason"] = {gleason->first, gleason->second};
  if (invasion) j["invasion"] = *invasion;
  if (script) j["script"] = *script;
  if (simulation) j["simulation"] = simulation->to_json();
  if (live) j["live"] = true;
  if (!human_exams.empty()) j["human_exams"] = human_exams;
  return j;
}

std::vector<CaseFixture> synth_fixtures(const std::vector<SynthCase>& cases) {
  std::vector<CaseFixture> out;
  for (const auto& c : cases) {
    CaseFixture f;
    f.case_id = c.case_id;
    f.case_info = c.case_info;
    f.slide_id = c.slide_id;
    f.truth = c.truth();
    if (c.grade > 0) f.nuclear_grade = c.grade;
    f.simulation = c;
    out.push_back(std::move(f));
  }
  return out;
}

std::vector<CaseFixture> load_fixtures(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw NotFoundError("fixture directory " + dir.string() + " not found");
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<CaseFixture> out;
  for (const auto& p : files) {
    std::ifstream in(p);
    try {
      out.push_back(CaseFixture::from_json(json::parse(in), dir));
    } catch (const json::parse_error& e) {
      throw FormatError(p.string() + ": " + e.what());
    } catch (const FormatError& e) {
      throw FormatError(p.string() + ": " + e.what());
    }
  }
  return out;
}

// ---- results ----

std::string CaseResult::prediction() const {
  if (final_diagnosis) return *final_diagnosis;
  if (!differential.empty()) return differential.front();
  return {};
}

std::optional<int> CaseResult::predicted_grade() const {
  static const std::regex re(R"(grade\s*:?\s*([1-4])\b)", std::regex::icase);
  std::smatch m;
  for (const auto& o : observations) {
    if (std::regex_search(o, m, re)) return std::stoi(m[1].str());
  }
  if (final_diagnosis && std::regex_search(*final_diagnosis, m, re)) return std::stoi(m[1].str());
  return std::nullopt;
}

std::optional<std::pair<int, int>> CaseResult::predicted_gleason() const {
  static const std::regex re(R"(\b([3-5])\s*\+\s*([3-5])\b)");
  std::smatch m;
  for (const auto& o : observations) {
    if (std::regex_search(o, m, re)) return std::make_pair(std::stoi(m[1].str()), std::stoi(m[2].str()));
  }
  if (final_diagnosis && std::regex_search(*final_diagnosis, m, re)) {
    return std::make_pair(std::stoi(m[1].str()), std::stoi(m[2].str()));
  }
  return std::nullopt;
}

std::optional<bool> CaseResult::predicted_invasion() const {
  for (const auto& o : observations) {
    const auto l = lower(o);
    if (l.rfind("invasion:", 0) != 0) continue;
    if (l.find("not detected") != std::string::npos) return false;
    if (l.find("detected") != std::string::npos) return true;
  }
  return std::nullopt;
}

std::vector<CaseResult> run_protocol(const std::vector<CaseFixture>& fixtures, Protocol protocol,
                                     const RunOptions& options) {
  std::vector<CaseResult> results(fixtures.size());
  const std::size_t workers = std::clamp<std::size_t>(options.parallelism, 1, std::max<std::size_t>(1, fixtures.size()));
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < fixtures.size(); i = next++) results[i] = run_one(fixtures[i], protocol, options);
  };
  if (workers == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  return results;
}

// ---- metrics ----

BaccResult balanced_accuracy(const std::vector<std::string>& predictions, const std::vector<std::string>& truths,
                             const std::vector<std::string>& classes) {
  if (predictions.size() != truths.size()) throw ContractError("predictions and truths differ in length");
  if (truths.empty()) throw EmptyEvalError("balanced accuracy over an empty evaluation");
  std::map<std::string, std::size_t> total, correct;
  for (const auto& c : classes) total[c] = 0;
  for (std::size_t i = 0; i < truths.size(); ++i) {
    auto it = total.find(truths[i]);
    if (it == total.end()) throw ContractError("truth '" + truths[i] + "' is not a declared class");
    ++it->second;
    if (predictions[i] == truths[i]) ++correct[truths[i]];
  }
  BaccResult r;
  double sum = 0.0;
  for (const auto& c : classes) {
    if (total[c] == 0) {
      r.excluded.push_back(c);
      continue;
    }
    const double recall = static_cast<double>(correct[c]) / static_cast<double>(total[c]);
    r.recalls[c] = recall;
    sum += recall;
  }
  r.value = sum / static_cast<double>(r.recalls.size());
  return r;
}

double accuracy(const std::vector<std::string>& predictions, const std::vector<std::string>& truths) {
  if (predictions.size() != truths.size()) throw ContractError("predictions and truths differ in length");
  if (truths.empty()) throw EmptyEvalError("accuracy over an empty evaluation");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < truths.size(); ++i) hit += predictions[i] == truths[i];
  return static_cast<double>(hit) / static_cast<double>(truths.size());
}

Prf invasion_prf(const std::vector<bool>& predictions, const std::vector<bool>& truths) {
  if (predictions.size() != truths.size()) throw ContractError("predictions and truths differ in length");
  if (truths.empty()) throw EmptyEvalError("precision/recall over an empty evaluation");
  Prf p;
  for (std::size_t i = 0; i < truths.size(); ++i) {
    if (predictions[i] && truths[i]) ++p.tp;
    else if (predictions[i]) ++p.fp;
    else if (truths[i]) ++p.fn;
    else ++p.tn;
  }
  p.precision_undefined = p.tp + p.fp == 0;
  p.recall_undefined = p.tp + p.fn == 0;
  p.precision = p.precision_undefined ? 0.0 : static_cast<double>(p.tp) / static_cast<double>(p.tp + p.fp);
  p.recall = p.recall_undefined ? 0.0 : static_cast<double>(p.tp) / static_cast<double>(p.tp + p.fn);
  p.f1 = p.precision + p.recall == 0.0 ? 0.0 : 2.0 * p.precision * p.recall / (p.precision + p.recall);
  return p;
}

std::pair<bool, bool> gleason_accuracy(std::pair<int, int> predicted, std::pair<int, int> truth) {
  for (int v : {predicted.first, predicted.second, truth.first, truth.second}) {
    if (v < 3 || v > 5) throw ContractError("Gleason pattern " + std::to_string(v) + " outside 3..5");
  }
  return {predicted.first == truth.first, predicted == truth};
}

int grade_band(int grade) {
  if (grade < 1 || grade > 4) throw ContractError("nuclear grade " + std::to_string(grade) + " outside 1..4");
  return grade <= 2 ? 0 : 1;
}

PemrResult pemr(const std::vector<std::vector<std::string>>& transcripts, const std::vector<std::string>& patterns) {
  if (patterns.empty()) throw ContractError("PEMR needs at least one pattern");
  PemrResult r;
  r.total = transcripts.size();
  std::vector<std::string> pats;
  for (const auto& p : patterns) pats.push_back(lower(p));
  for (const auto& turns : transcripts) {
    const bool hit = std::any_of(turns.begin(), turns.end(), [&](const std::string& t) {
      const auto l = lower(t);
      return std::any_of(pats.begin(), pats.end(), [&](const auto& p) { return l.find(p) != std::string::npos; });
    });
    r.mentioning += hit;
  }
  r.rate = r.total == 0 ? 0.0 : static_cast<double>(r.mentioning) / static_cast<double>(r.total);
  return r;
}

std::map<std::string, std::vector<std::string>> default_pemr_patterns() {
  return {{"nuclear", {"nuclear grade", "nuclear grading", "fuhrman", "isup grade", "nucleoli", "tool-nuclear"}},
          {"gleason", {"gleason", "tool-gleason"}},
          {"invasion", {"lymphovascular invasion", "perineural invasion", "vascular invasion", "lymphatic invasion",
                        "tool-invasion"}}};
}

std::string classify(std::string_view diagnosis, const std::vector<std::string>& classes,
                     const DiagnosisNormalizer& norm) {
  for (const auto& c : classes) {
    if (norm.same(diagnosis, c)) return c;
  }
  return "other";
}

MetricsReport compute_metrics(const std::vector<CaseFixture>& fixtures, const std::vector<CaseResult>& results,
                              const JudgeTables& tables) {
  if (fixtures.size() != results.size()) throw ContractError("fixtures and results differ in length");
  const DiagnosisNormalizer norm(tables);
  MetricsReport m;
  for (const auto& f : fixtures) {
    if (classify(f.truth, m.classes, norm) == "other") m.classes.push_back(f.truth);
  }

  std::vector<std::string> truths, finals, initials, ddx;
  std::vector<std::vector<std::string>> pre;
  std::size_t ddx_total = 0;
  std::size_t grade_n = 0, grade_hit = 0, gl_n = 0, gl_primary = 0, gl_combined = 0;
  std::vector<bool> inv_pred, inv_truth;
  for (std::size_t i = 0; i < fixtures.size(); ++i) {
    const auto& f = fixtures[i];
    const auto& r = results[i];
    if (!r.ok) {
      m.failed.push_back(r.case_id);
      continue;
    }
    const auto truth = classify(f.truth, m.classes, norm);
    truths.push_back(truth);
    finals.push_back(classify(r.prediction(), m.classes, norm));
    initials.push_back(r.initial_ddx.empty() ? "other" : classify(r.initial_ddx.front(), m.classes, norm));
    const bool in_ddx = std::any_of(r.initial_ddx.begin(), r.initial_ddx.end(),
                                    [&](const auto& d) { return norm.same(d, truth); });
    ddx.push_back(in_ddx ? truth : "other");
    ddx_total += r.initial_ddx.size();
    pre.push_back(r.pre_evidence_text);
    if (f.nuclear_grade) {
      ++grade_n;
      const auto g = r.predicted_grade();
      grade_hit += g && grade_band(*g) == grade_band(*f.nuclear_grade);
    }
    if (f.gleason) {
      ++gl_n;
      if (const auto g = r.predicted_gleason()) {
        const auto [p, c] = gleason_accuracy(*g, *f.gleason);
        gl_primary += p;
        gl_combined += c;
      }
    }
    if (f.invasion) {
      inv_truth.push_back(*f.invasion);
      inv_pred.push_back(r.predicted_invasion().value_or(false));
    }
  }
  m.cases = truths.size();
  if (m.cases > 0) {
    m.final_bacc = balanced_accuracy(finals, truths, m.classes);
    m.final_acc = accuracy(finals, truths);
    m.initial_bacc = balanced_accuracy(initials, truths, m.classes).value;
    m.ddx_bacc = balanced_accuracy(ddx, truths, m.classes).value;
    m.ddx_length = static_cast<double>(ddx_total) / static_cast<double>(m.cases);
    for (const auto& [name, pats] : default_pemr_patterns()) m.pemr[name] = pemr(pre, pats);
  }
  if (grade_n > 0) m.grade_band_acc = static_cast<double>(grade_hit) / static_cast<double>(grade_n);
  if (gl_n > 0) {
    m.gleason_primary_acc = static_cast<double>(gl_primary) / static_cast<double>(gl_n);
    m.gleason_combined_acc = static_cast<double>(gl_combined) / static_cast<double>(gl_n);
  }
  if (!inv_truth.empty()) m.invasion = invasion_prf(inv_pred, inv_truth);
  return m;
}

json MetricsReport::to_json() const {
  json p = json::object();
  for (const auto& [k, v] : pemr) p[k] = {{"rate", v.rate}, {"mentioning", v.mentioning}, {"total", v.total}};
  return {{"format", "dx-metrics"},
          {"version", kReportVersion},
          {"cases", cases},
          {"failed", failed},
          {"classes", classes},
          {"final_bacc", {{"value", final_bacc.value}, {"recalls", final_bacc.recalls}, {"excluded", final_bacc.excluded}}},
          {"final_acc", final_acc},
          {"initial_bacc", initial_bacc},
          {"ddx_bacc", ddx_bacc},
          {"ddx_length", ddx_length},
          {"pemr", p},
          {"grade_band_acc", opt(grade_band_acc)},
          {"gleason_primary_acc", opt(gleason_primary_acc)},
          {"gleason_combined_acc", opt(gleason_combined_acc)},
          {"invasion", invasion ? prf_json(*invasion) : json(nullptr)}};
}

// ---- tables ----

std::string format_table(const std::vector<std::string>& headers, const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width(headers.size());
  for (std::size_t c = 0; c < headers.size(); ++c) width[c] = headers[c].size();
  for (const auto& r : rows) {
    for (std::size_t c = 0; c < r.size() && c < width.size(); ++c) width[c] = std::max(width[c], r[c].size());
  }
  auto line = [&](const std::vector<std::string>& cells) {
    std::string out;
    for (std::size_t c = 0; c < width.size(); ++c) {
      const std::string cell = c < cells.size() ? cells[c] : "";
      if (c) out += " | ";
      out += cell + std::string(width[c] - cell.size(), ' ');
    }
    while (!out.empty() && out.back() == ' ') out.pop_back();
    return out + "\n";
  };
  std::string out = line(headers);
  std::string rule;
  for (std::size_t c = 0; c < width.size(); ++c) rule += (c ? "-+-" : "") + std::string(width[c], '-');
  out += rule + "\n";
  for (const auto& r : rows) out += line(r);
  return out;
}

namespace {

const std::vector<std::string> kMetricHeaders{"Cases", "Failed", "Initial BAcc", "DDx Len", "Final BAcc", "Acc", "Grade Acc"};

std::vector<std::string> metric_cells(const MetricsReport& m) {
  return {std::to_string(m.cases),
          std::to_string(m.failed.size()),
          pct(m.initial_bacc),
          fixed2(m.ddx_length),
          pct(m.final_bacc.value),
          pct(m.final_acc),
          m.grade_band_acc ? pct(*m.grade_band_acc) : "-"};
}

}  // namespace

std::string metrics_table(const MetricsReport& m) { return format_table(kMetricHeaders, {metric_cells(m)}); }

// ---- ablation ----

AblationAxis parse_axis(std::string_view text) {
  if (text == "evidence_sources") return AblationAxis::kEvidenceSources;
  if (text == "roi_plan") return AblationAxis::kRoiPlan;
  if (text == "icl_count") return AblationAxis::kIclCount;
  throw ConfigError("unknown ablation axis '" + std::string(text) + "'");
}

std::string_view to_string(AblationAxis a) {
  switch (a) {
    case AblationAxis::kEvidenceSources: return "evidence_sources";
    case AblationAxis::kRoiPlan: return "roi_plan";
    case AblationAxis::kIclCount: return "icl_count";
  }
  return "?";
}

std::vector<std::string> label_columns(AblationAxis axis) {
  switch (axis) {
    case AblationAxis::kEvidenceSources: return {"Further Look", "Further Test"};
    case AblationAxis::kRoiPlan: return {"RoI plan"};
    case AblationAxis::kIclCount: return {"ICL samples"};
  }
  return {};
}

std::vector<AblationCell> expand_grid(AblationAxis axis, std::string_view grid, const SessionConfig& base) {
  const std::string text(grid);
  const char sep = (axis == AblationAxis::kRoiPlan && text.find(':') != std::string::npos) ? ';' : ',';
  std::vector<std::string> items;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, sep);) {
    item = trim(item);
    if (!item.empty()) items.push_back(item);
  }
  if (items.empty()) throw ConfigError("empty ablation grid");

  auto parse_count = [](const std::string& s, long lo, long hi) {
    std::size_t used = 0;
    long v = 0;
    try {
      v = std::stol(s, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != s.size() || v < lo || v > hi) {
      throw ConfigError("ablation value '" + s + "' must be an integer in " + std::to_string(lo) + ".." +
                        std::to_string(hi));
    }
    return static_cast<std::size_t>(v);
  };

  std::vector<AblationCell> cells;
  for (const auto& item : items) {
    AblationCell cell{{}, base};
    switch (axis) {
      case AblationAxis::kEvidenceSources: {
        std::string t;
        for (char c : item) t += static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
        if (t.size() != 2 || (t[0] != 'T' && t[0] != 'F') || (t[1] != 'T' && t[1] != 'F')) {
          throw ConfigError("evidence_sources cells are two of T/F (look, test), got '" + item + "'");
        }
        cell.config.allow_tools = t[0] == 'T';
        cell.config.allow_exams = t[1] == 'T';
        cell.labels = {std::string(1, t[0]), std::string(1, t[1])};
        break;
      }
      case AblationAxis::kRoiPlan: {
        if (sep == ';') {
          cell.config.screening_plan = parse_plan(item);
        } else {
          const auto k = parse_count(item, 1, 64);
          cell.config.screening_plan = SelectionPlan{"10x:" + item, {{Level::k10x, k, 0, ExtraMode::kRandom}}};
        }
        cell.labels = {describe(cell.config.screening_plan)};
        break;
      }
      case AblationAxis::kIclCount: {
        cell.config.icl_count = parse_count(item, 0, 1000);
        cell.labels = {item};
        break;
      }
    }
    cells.push_back(std::move(cell));
  }
  return cells;
}

AblationReport run_ablation(AblationAxis axis, std::string_view grid, const std::vector<CaseFixture>& fixtures,
                            const RunOptions& options) {
  const auto cells = expand_grid(axis, grid, options.session);
  AblationReport report{axis, label_columns(axis), {}};
  for (const auto& cell : cells) {
    RunOptions o = options;
    o.session = cell.config;
    o.transcript_dir.reset();
    const auto results = run_protocol(fixtures, Protocol::kEvidenceSeeking, o);
    report.rows.push_back({cell.labels, compute_metrics(fixtures, results)});
  }
  return report;
}

json AblationReport::to_json() const {
  json rows_j = json::array();
  for (const auto& r : rows) {
    json labels = json::object();
    for (std::size_t i = 0; i < label_columns.size() && i < r.labels.size(); ++i) labels[label_columns[i]] = r.labels[i];
    rows_j.push_back({{"labels", labels}, {"metrics", r.metrics.to_json()}});
  }
  return {{"format", "dx-ablation"}, {"version", kReportVersion}, {"axis", to_string(axis)}, {"rows", rows_j}};
}

std::string AblationReport::to_text() const {
  std::vector<std::string> headers = label_columns;
  headers.insert(headers.end(), kMetricHeaders.begin(), kMetricHeaders.end());
  std::vector<std::vector<std::string>> cells;
  for (const auto& r : rows) {
    auto row = r.labels;
    const auto m = metric_cells(r.metrics);
    row.insert(row.end(), m.begin(), m.end());
    cells.push_back(std::move(row));
  }
  return format_table(headers, cells);
}

}  // namespace dx
