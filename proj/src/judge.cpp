#include "dx/judge.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>

#include <nlohmann/json.hpp>

#include "dx/errors.hpp"
#include "dx/response_parser.hpp"

namespace dx {

using nlohmann::json;

namespace {

constexpr std::string_view kDefaultTables = R"JSON({
  "synonyms": {
    "ccrcc": "clear cell renal cell carcinoma",
    "kirc": "clear cell renal cell carcinoma",
    "chrcc": "chromophobe renal cell carcinoma",
    "kich": "chromophobe renal cell carcinoma",
    "prcc": "papillary renal cell carcinoma",
    "kirp": "papillary renal cell carcinoma",
    "renal clear cell carcinoma": "clear cell renal cell carcinoma",
    "gist": "gastrointestinal stromal tumor",
    "gastric stromal tumor": "gastrointestinal stromal tumor",
    "gastric gist": "gastrointestinal stromal tumor",
    "net": "neuroendocrine tumor",
    "neuroendocrine tumour": "neuroendocrine tumor",
    "prostatic adenocarcinoma": "prostate adenocarcinoma",
    "prostatic acinar adenocarcinoma": "prostate adenocarcinoma",
    "acinar adenocarcinoma of the prostate": "prostate adenocarcinoma",
    "thymic epithelial tumor": "thymoma"
  },
  "exclusions": [
    ["benign", "malignant"],
    ["no tumor", "carcinoma"],
    ["negative for malignancy", "carcinoma"],
    ["reactive change", "carcinoma"]
  ],
  "vague": [
    "tumor", "tumour", "cancer", "carcinoma", "neoplasm", "malignancy", "malignant tumor",
    "malignant neoplasm", "lesion", "disease", "unknown", "other", "abnormal", "abnormality",
    "mass", "not otherwise specified", "nos", "undetermined", "indeterminate"
  ],
  "exam_targets": {
    "pax8": ["renal cell carcinoma"],
    "pax-8": ["renal cell carcinoma"],
    "cd10": ["clear cell renal cell carcinoma", "papillary renal cell carcinoma"],
    "ca9": ["clear cell renal cell carcinoma"],
    "caix": ["clear cell renal cell carcinoma"],
    "ck7": ["papillary renal cell carcinoma", "chromophobe renal cell carcinoma", "gastric adenocarcinoma"],
    "ck20": ["gastric adenocarcinoma"],
    "cdx2": ["gastric adenocarcinoma"],
    "her2": ["gastric adenocarcinoma"],
    "amacr": ["papillary renal cell carcinoma", "prostate adenocarcinoma"],
    "cd117": ["chromophobe renal cell carcinoma", "gastrointestinal stromal tumor"],
    "dog1": ["gastrointestinal stromal tumor"],
    "colloidal iron": ["chromophobe renal cell carcinoma"],
    "synaptophysin": ["neuroendocrine tumor"],
    "syn": ["neuroendocrine tumor"],
    "cga": ["neuroendocrine tumor"],
    "chromogranin": ["neuroendocrine tumor"],
    "cd56": ["neuroendocrine tumor"],
    "cd20": ["lymphoma"],
    "cd3": ["lymphoma"],
    "cd30": ["lymphoma", "germ cell tumor"],
    "tdt": ["lymphoma", "thymoma"],
    "sall4": ["germ cell tumor"],
    "oct4": ["germ cell tumor"],
    "p63": ["thymic carcinoma", "thymoma"],
    "ck": ["thymic carcinoma", "thymoma"],
    "cd5": ["thymic carcinoma"],
    "psa": ["prostate adenocarcinoma"],
    "nkx3.1": ["prostate adenocarcinoma"],
    "p504s": ["prostate adenocarcinoma"],
    "hmb45": ["melanoma"],
    "ttf-1": ["lung adenocarcinoma"]
  }
})JSON";

std::vector<std::string> words(std::string_view s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    const auto u = static_cast<unsigned char>(c);
    if (std::isalnum(u) || c == '-' || c == '.') {
      cur += static_cast<char>(std::tolower(u));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  for (auto& w : out) {
    while (!w.empty() && (w.back() == '.' || w.back() == '-')) w.pop_back();
  }
  out.erase(std::remove(out.begin(), out.end(), std::string{}), out.end());
  return out;
}

bool contains_seq(const std::vector<std::string>& hay, const std::vector<std::string>& needle) {
  if (needle.empty() || needle.size() > hay.size()) return false;
  return std::search(hay.begin(), hay.end(), needle.begin(), needle.end()) != hay.end();
}

// Top-level split on a single delimiter, ignoring brackets.
std::vector<std::string> split_outside(std::string_view s, char delim) {
  std::vector<std::string> parts;
  int depth = 0;
  std::string cur;
  for (char c : s) {
    if (c == '(' || c == '[' || c == '{') ++depth;
    if (c == ')' || c == ']' || c == '}') depth = std::max(0, depth - 1);
    if (c == delim && depth == 0) {
      parts.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  parts.push_back(cur);
  return parts;
}

std::pair<std::string, std::vector<std::string>> strip_parentheticals(std::string_view s) {
  std::string outer;
  std::vector<std::string> inner;
  std::string cur;
  int depth = 0;
  for (char c : s) {
    if (c == '(') {
      if (depth++ > 0) cur += c;
      continue;
    }
    if (c == ')' && depth > 0) {
      if (--depth == 0) {
        inner.push_back(cur);
        cur.clear();
      } else {
        cur += c;
      }
      continue;
    }
    (depth > 0 ? cur : outer) += c;
  }
  return {outer, inner};
}

std::map<std::string, std::string> normalize_keys(const std::map<std::string, std::string>& m) {
  std::map<std::string, std::string> out;
  for (const auto& [k, v] : m) out[normalize_diagnosis(k)] = normalize_diagnosis(v);
  return out;
}

}  // namespace

std::string normalize_diagnosis(std::string_view text) {
  std::string out;
  bool space = false;
  for (char c : text) {
    const auto u = static_cast<unsigned char>(c);
    if (std::isspace(u)) {
      space = !out.empty();
      continue;
    }
    if (space) out += ' ';
    space = false;
    out += static_cast<char>(std::tolower(u));
  }
  while (!out.empty() && std::string_view(".;:,").find(out.back()) != std::string_view::npos) {
    out.pop_back();
    while (!out.empty() && out.back() == ' ') out.pop_back();
  }
  return out;
}

JudgeTables JudgeTables::defaults() { return from_json_text(kDefaultTables); }

JudgeTables JudgeTables::from_json_text(std::string_view text) {
  JudgeTables t;
  try {
    const auto j = json::parse(text);
    t.synonyms = normalize_keys(j.value("synonyms", std::map<std::string, std::string>{}));
    for (const auto& p : j.value("exclusions", json::array())) {
      if (!p.is_array() || p.size() != 2) throw FormatError("exclusion entries must be pairs");
      t.exclusions.emplace_back(normalize_diagnosis(p[0].get<std::string>()),
                                normalize_diagnosis(p[1].get<std::string>()));
    }
    for (const auto& v : j.value("vague", std::vector<std::string>{})) t.vague.insert(normalize_diagnosis(v));
    for (const auto& [k, v] : j.value("exam_targets", std::map<std::string, std::vector<std::string>>{})) {
      auto& dst = t.exam_targets[normalize_diagnosis(k)];
      for (const auto& d : v) dst.push_back(normalize_diagnosis(d));
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed judge tables: ") + e.what());
  }
  return t;
}

JudgeTables JudgeTables::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw NotFoundError("cannot open judge tables " + path.string());
  return from_json_text(std::string(std::istreambuf_iterator<char>(in), {}));
}

std::string JudgeTables::to_json_text() const {
  json ex = json::array();
  for (const auto& [a, b] : exclusions) ex.push_back({a, b});
  return json{{"synonyms", synonyms}, {"exclusions", ex}, {"vague", vague}, {"exam_targets", exam_targets}}.dump(2);
}

std::set<std::string> DiagnosisNormalizer::candidates(std::string_view text) const {
  std::set<std::string> out;
  const std::string full = normalize_diagnosis(text);
  if (full.empty()) return out;

  std::vector<std::string> bases{full};
  const auto head = normalize_diagnosis(split_outside(full, ',').front());
  if (!head.empty() && head != full) bases.push_back(head);

  for (const auto& b : bases) {
    out.insert(b);
    auto [outer, inner] = strip_parentheticals(b);
    const auto bare = normalize_diagnosis(outer);
    if (!bare.empty()) out.insert(bare);
    for (const auto& in : inner) {
      const auto n = normalize_diagnosis(in);
      if (!n.empty()) out.insert(n);
    }
    const auto slash = split_outside(bare, '/');
    if (slash.size() > 1) {
      for (const auto& part : slash) {
        const auto n = normalize_diagnosis(part);
        if (!n.empty()) out.insert(n);
      }
    }
  }
  std::set<std::string> mapped;
  for (const auto& c : out) {
    if (auto it = tables_->synonyms.find(c); it != tables_->synonyms.end()) mapped.insert(it->second);
  }
  out.insert(mapped.begin(), mapped.end());
  return out;
}

bool DiagnosisNormalizer::same(std::string_view a, std::string_view b) const {
  const auto ca = candidates(a);
  const auto cb = candidates(b);
  return std::any_of(ca.begin(), ca.end(), [&](const auto& c) { return cb.count(c) > 0; });
}

bool DiagnosisNormalizer::related(std::string_view diagnosis, std::string_view target) const {
  const auto cd = candidates(diagnosis);
  const auto ct = candidates(target);
  for (const auto& d : cd) {
    const auto wd = words(d);
    for (const auto& t : ct) {
      const auto wt = words(t);
      if (d == t || contains_seq(wd, wt) || contains_seq(wt, wd)) return true;
    }
  }
  return false;
}

JudgeVerdict rule_based_judge(const std::vector<std::string>& diagnoses, std::string_view truth,
                              const JudgeTables& tables, const std::vector<std::string>& exams) {
  const DiagnosisNormalizer norm(tables);
  JudgeVerdict v;

  for (std::size_t i = 0; i < diagnoses.size(); ++i) {
    if (norm.same(diagnoses[i], truth)) {
      v.match_position = i + 1;
      break;
    }
  }

  for (std::size_t i = 0; i < diagnoses.size() && !v.hacking; ++i) {
    const auto n = normalize_diagnosis(diagnoses[i]);
    if (n.empty() || tables.vague.count(n) > 0) {
      v.hacking = true;
      break;
    }
    for (std::size_t j = i + 1; j < diagnoses.size(); ++j) {
      if (norm.same(diagnoses[i], diagnoses[j])) {
        v.hacking = true;
        break;
      }
      for (const auto& [a, b] : tables.exclusions) {
        if ((norm.related(diagnoses[i], a) && norm.related(diagnoses[j], b)) ||
            (norm.related(diagnoses[i], b) && norm.related(diagnoses[j], a))) {
          v.hacking = true;
          break;
        }
      }
      if (v.hacking) break;
    }
  }

  if (exams.empty() || diagnoses.empty()) return v;
  std::vector<std::string> targets;
  bool known = false;
  for (const auto& exam : exams) {
    const auto we = words(exam);
    for (const auto& [keyword, dx] : tables.exam_targets) {
      if (!contains_seq(we, words(keyword))) continue;
      known = true;
      targets.insert(targets.end(), dx.begin(), dx.end());
    }
  }
  std::size_t covered = 0;
  for (const auto& d : diagnoses) {
    if (std::any_of(targets.begin(), targets.end(), [&](const auto& t) { return norm.related(d, t); })) ++covered;
  }
  if (covered >= std::min<std::size_t>(2, diagnoses.size())) {
    v.exam_quality = ExamQuality::kDifferentiates;
  } else if (known && covered == 0) {
    v.exam_quality = ExamQuality::kProblematic;
  }
  return v;
}

JudgeVerdict RuleBasedJudge::judge(const JudgeRequest& request) {
  return rule_based_judge(request.diagnoses, request.truth, tables_, request.exams);
}

}  // namespace dx
