#include "dx/synthetic.hpp"

#include <algorithm>
#include <cmath>

#include "dx/errors.hpp"
#include "dx/prompts.hpp"
#include "dx/random.hpp"

namespace dx {

using nlohmann::json;

namespace {

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

double hash01(std::string_view s) { return static_cast<double>(fnv1a(s) >> 11) * 0x1.0p-53; }

std::vector<float> unit_gaussian(std::size_t dim, Rng& rng) {
  std::vector<float> v(dim);
  double norm = 0.0;
  for (auto& x : v) {
    x = static_cast<float>(rng.normal());
    norm += static_cast<double>(x) * x;
  }
  norm = std::sqrt(norm);
  for (auto& x : v) x = static_cast<float>(x / norm);
  return v;
}

class AnchorBank {
 public:
  AnchorBank(std::size_t dim, std::uint64_t seed) : dim_(dim), seed_(seed) {}
  const std::vector<float>& get(const std::string& category) {
    auto it = anchors_.find(category);
    if (it == anchors_.end()) {
      Rng rng(seed_ ^ fnv1a(category));
      it = anchors_.emplace(category, unit_gaussian(dim_, rng)).first;
    }
    return it->second;
  }

 private:
  std::size_t dim_;
  std::uint64_t seed_;
  std::map<std::string, std::vector<float>> anchors_;
};

std::vector<float> sample(AnchorBank& bank, const std::vector<std::string>& parts, double noise, std::size_t dim,
                          Rng& rng) {
  std::vector<float> v(dim, 0.0f);
  for (const auto& p : parts) {
    const auto& a = bank.get(p);
    for (std::size_t i = 0; i < dim; ++i) v[i] += a[i];
  }
  const double sigma = noise / std::sqrt(static_cast<double>(dim));
  for (auto& x : v) x += static_cast<float>(sigma * rng.normal());
  return v;
}

// "A|B|B" picks one alternative uniformly.
std::string pick(const std::string& spec, Rng& rng) {
  std::vector<std::string> alts;
  std::size_t pos = 0;
  while (true) {
    const auto bar = spec.find('|', pos);
    alts.push_back(spec.substr(pos, bar - pos));
    if (bar == std::string::npos) break;
    pos = bar + 1;
  }
  return alts.size() == 1 ? alts.front() : alts[rng.below(alts.size())];
}

const std::map<std::string, std::pair<std::string, std::string>>& subtype_table() {
  static const std::map<std::string, std::pair<std::string, std::string>> t{
      {"ccRCC", {"Clear cell renal cell carcinoma", "CA9"}},
      {"chRCC", {"Chromophobe renal cell carcinoma", "CD117"}},
      {"pRCC", {"Papillary renal cell carcinoma", "AMACR"}}};
  return t;
}

}  // namespace

std::vector<ToolkitSpec> default_toolkit_specs() {
  return {
      {"pan-cancer", ToolkitMode::kGrounding, {Level::k10x, Level::k20x},
       {"tumor", "necrosis", "normal", "stroma"}, {"tumor", "necrosis"}, false},
      {"rcc-subtype", ToolkitMode::kGrounding, {Level::k10x, Level::k20x},
       {"ccRCC", "chRCC", "pRCC", "normal", "stroma"}, {"ccRCC", "chRCC", "pRCC"}, true},
      {"rcc-nuclear", ToolkitMode::kLocalization, {Level::k20x}, {"grade-1", "grade-2", "grade-3", "grade-4"}, {}, false},
      {"prostate-gleason", ToolkitMode::kGrounding, {Level::k20x},
       {"G3", "G4", "G5", "benign", "stroma"}, {"G3", "G4", "G5"}, false},
      {"invasion", ToolkitMode::kLocalization, {Level::k5x, Level::k10x, Level::k20x},
       {"vessel-invasion", "vessel-no-invasion", "nerve-invasion", "nerve-no-invasion"}, {}, false},
  };
}

SynthWorld make_world(const std::vector<SlideRecipe>& slides, const SynthOptions& opts) {
  if (opts.dim == 0) throw ConfigError("synthetic dimension must be positive");
  AnchorBank bank(opts.dim, opts.seed);
  CorpusBuilder builder(opts.dim, "synthetic planted-cluster corpus");
  Rng rng(opts.seed);

  // Reference slides: one row of supports per category and level.
  struct Support {
    std::vector<std::vector<float>> vecs;
    std::vector<std::string> ids;
  };
  std::map<std::pair<std::string, std::string>, std::map<Level, Support>> supports;  // (toolkit, category)
  const auto specs = default_toolkit_specs();
  for (const auto& spec : specs) {
    const std::string ref_slide = "ref-" + spec.name;
    builder.set_provenance(ref_slide, "synthetic reference library");
    for (Level level : spec.levels) {
      for (std::size_t c = 0; c < spec.categories.size(); ++c) {
        auto& sup = supports[{spec.name, spec.categories[c]}][level];
        for (std::size_t i = 0; i < opts.support; ++i) {
          const GridCoord coord{static_cast<std::int32_t>(i), static_cast<std::int32_t>(c)};
          auto v = sample(bank, {spec.categories[c]}, opts.noise, opts.dim, rng);
          builder.add(ref_slide, level, coord, v);
          sup.ids.push_back(patch_ref(ref_slide, level, coord));
          sup.vecs.push_back(std::move(v));
        }
      }
    }
  }

  for (const auto& s : slides) {
    builder.set_provenance(s.id, s.provenance);
    for (const auto& [level, side] : opts.grid) {
      for (int y = 0; y < side; ++y) {
        for (int x = 0; x < side; ++x) {
          std::vector<std::string> parts;
          if (rng.uniform() < s.tumor_fraction) {
            parts.push_back("tumor");
            for (const auto& c : s.tumor_components) parts.push_back(pick(c, rng));
          } else {
            parts.push_back(s.background[rng.below(s.background.size())]);
          }
          builder.add(s.id, level, {x, y}, sample(bank, parts, opts.noise, opts.dim, rng));
        }
      }
    }
  }

  SynthWorld world{std::move(builder).build(), {}};
  for (const auto& spec : specs) {
    Toolkit tk;
    tk.name = spec.name;
    tk.mode = spec.mode;
    tk.highlight_set = spec.highlight;
    std::vector<Prototype> subs;
    for (Level level : spec.levels) {
      for (const auto& cat : spec.categories) {
        const auto& sup = supports.at({spec.name, cat}).at(level);
        auto p = build_prototype(sup.vecs, cat, level, cat, sup.ids);
        if (spec.kmeans && level == Level::k10x &&
            std::find(spec.highlight.begin(), spec.highlight.end(), cat) != spec.highlight.end()) {
          auto extra = kmeans_augment(sup.vecs, p, opts.kmeans_k, opts.seed ^ fnv1a(cat));
          subs.insert(subs.end(), extra.begin(), extra.end());
        }
        tk.prototypes.push_back(std::move(p));
      }
    }
    tk.prototypes.insert(tk.prototypes.end(), subs.begin(), subs.end());
    tk.validate();
    world.toolkits.add(std::move(tk));
  }
  return world;
}

std::string subtype_name(const std::string& code) {
  auto it = subtype_table().find(code);
  if (it == subtype_table().end()) throw NotFoundError("unknown RCC subtype code '" + code + "'");
  return it->second.first;
}

std::string subtype_marker(const std::string& code) {
  auto it = subtype_table().find(code);
  if (it == subtype_table().end()) throw NotFoundError("unknown RCC subtype code '" + code + "'");
  return it->second.second;
}

json SynthCase::to_json() const {
  return {{"case_id", case_id},       {"slide_id", slide_id}, {"truth_code", truth_code},
          {"candidates", candidates}, {"grade", grade},       {"case_info", case_info}};
}

SynthCase SynthCase::from_json(const json& j) {
  try {
    SynthCase c;
    c.case_id = j.at("case_id").get<std::string>();
    c.slide_id = j.value("slide_id", "");
    c.truth_code = j.at("truth_code").get<std::string>();
    c.candidates = j.at("candidates").get<std::vector<std::string>>();
    c.grade = j.value("grade", 0);
    c.case_info = j.value("case_info", "");
    return c;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed simulated case: ") + e.what());
  }
}

BackendResponse SimulatedBackend::call(const BackendRequest& r) {
  const auto md = r.metadata;
  if (role_ == Role::kReasoner) {
    const std::string stage = md.value("stage", "");
    const std::string& top = case_.candidates.front();
    if (stage == "OnePass") {
      return {"<think>\nThe morphology fits a renal tumor.\n</think>\n<answer>\n\\boxed{" + subtype_name(top) +
              "}\n</answer>"};
    }
    if (stage == "Exploration") {
      std::string names;
      for (const auto& c : case_.candidates) names += (names.empty() ? "" : ", ") + subtype_name(c);
      std::string markers;
      for (const auto& c : case_.candidates) markers += (markers.empty() ? "" : ", ") + subtype_marker(c);
      const bool mention = fnv1a(case_.case_id) % 2 == 0;
      std::string think = "Renal tumor with several candidate subtypes.";
      if (mention) think += " The nuclear grade should be assessed as well.";
      return {"<think>\n" + think + "\n</think>\n<answer>\n\\DiffList{" + names +
              "}\n\\ExamList{Immunohistochemistry (" + markers +
              ")}\n\\ToolCallList{tool-ccRCC, tool-chRCC, tool-pRCC, tool-Nuclear}\n</answer>"};
    }
    // Definitive turn: only the latest evidence block is read.
    const auto cut = r.prompt.rfind("Here is the information:");
    const std::string evidence = cut == std::string::npos ? r.prompt : r.prompt.substr(cut);
    std::string chosen = top;
    for (const auto& c : case_.candidates) {
      if (evidence.find(c + ": positive") != std::string::npos ||
          evidence.find(subtype_marker(c) + ": positive") != std::string::npos) {
        chosen = c;
        break;
      }
    }
    std::string answer = subtype_name(chosen);
    const auto g = evidence.find("Nuclear grade: ");
    if (g != std::string::npos && g + 15 < evidence.size() && std::isdigit(static_cast<unsigned char>(evidence[g + 15]))) {
      answer += ", nuclear grade " + std::string(1, evidence[g + 15]);
    }
    return {"<think>\nWeighing the returned evidence.\n</think>\n<answer>\n\\boxed{" + answer + "}\n</answer>"};
  }
  if (role_ == Role::kInterpreter) {
    if (r.mode != "icl") return {"Sheets of tumor cells with variable cytoplasmic clearing; no necrosis."};
    const std::string category = md.value("category", "");
    const bool truth = category == case_.truth_code || category == "grade-" + std::to_string(case_.grade);
    const double p_correct = 1.0 - 0.5 / (1.0 + static_cast<double>(r.references.size()));
    const bool correct = hash01(case_.case_id + "|" + md.value("patch", "") + "|" + category) < p_correct;
    return {(truth == correct) ? "Yes" : "No"};
  }
  if (role_ == Role::kExamOracle) {
    std::map<std::string, std::string> table;
    for (const auto& c : kRccSubtypes) table[subtype_marker(c)] = c == case_.truth_code ? "positive" : "negative";
    return {exam_results_from_table(md.value("exams", std::vector<std::string>{}), table)};
  }
  throw BackendRejected(404, "simulated backend has no " + std::string(to_string(role_)) + " role");
}

std::string SimulatedBackend::id() const { return std::string(to_string(role_)) + "@simulated"; }

BackendSet simulated_backends(const SynthCase& c) {
  BackendSet s;
  for (Role r : {Role::kReasoner, Role::kInterpreter, Role::kExamOracle}) {
    s.by_role[r] = std::make_shared<SimulatedBackend>(r, c);
  }
  return s;
}

std::vector<SynthCase> make_synth_cases(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<SynthCase> out;
  for (std::size_t i = 0; i < n; ++i) {
    SynthCase c;
    c.case_id = "synth-" + std::to_string(i + 1);
    c.slide_id = "synth-slide-" + std::to_string(i + 1);
    c.truth_code = kRccSubtypes[i % kRccSubtypes.size()];
    c.candidates = kRccSubtypes;
    for (std::size_t k = c.candidates.size(); k > 1; --k) std::swap(c.candidates[k - 1], c.candidates[rng.below(k)]);
    c.grade = c.truth_code == "chRCC" ? 0 : 1 + static_cast<int>(rng.below(4));
    c.case_info = "Renal mass, partial nephrectomy. Microscopy shows a tumor of renal tubular origin.";
    out.push_back(std::move(c));
  }
  return out;
}

std::vector<SlideRecipe> recipes_for(const std::vector<SynthCase>& cases) {
  std::vector<SlideRecipe> out;
  for (const auto& c : cases) {
    SlideRecipe r;
    r.id = c.slide_id;
    r.tumor_components = {c.truth_code};
    if (c.grade > 0) r.tumor_components.push_back("grade-" + std::to_string(c.grade));
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<SlideRecipe> fixture_slide_recipes() {
  return {
      {"tcga-kirc-01", {"ccRCC", "grade-3"}, 0.35, {"normal", "stroma"}, "synthetic clear cell RCC"},
      {"tcga-stad-01", {"vessel-invasion|vessel-no-invasion"}, 0.35, {"normal", "stroma"},
       "synthetic gastric adenocarcinoma"},
      {"po-thymic-01", {}, 0.35, {"normal", "stroma"}, "synthetic thymic tumor"},
      {"tcga-prad-01", {"G3|G3|G4"}, 0.4, {"benign", "stroma"}, "synthetic prostate adenocarcinoma"},
  };
}

}  // namespace dx
