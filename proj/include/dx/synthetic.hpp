#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dx/backends.hpp"
#include "dx/embedding_store.hpp"
#include "dx/highlighter.hpp"

namespace dx {

// Planted-cluster generator: every category owns a random unit anchor; a patch
// is the sum of its anchors plus isotropic noise of norm ~`noise`.
struct SynthOptions {
  std::size_t dim = 32;
  std::uint64_t seed = 7;
  double noise = 0.35;
  std::size_t support = 12;  // reference patches per category and level
  std::size_t kmeans_k = 4;
  std::map<Level, int> grid{{Level::k5x, 8}, {Level::k10x, 16}, {Level::k20x, 24}};
};

struct ToolkitSpec {
  std::string name;
  ToolkitMode mode = ToolkitMode::kGrounding;
  std::vector<Level> levels;
  std::vector<std::string> categories;
  std::vector<std::string> highlight;
  bool kmeans = false;  // K-means sub-prototypes of the highlight categories at 10x
};

// pan-cancer, rcc-subtype, rcc-nuclear, prostate-gleason, invasion.
std::vector<ToolkitSpec> default_toolkit_specs();

struct SlideRecipe {
  std::string id;
  std::vector<std::string> tumor_components;  // anchors added to tumor patches
  double tumor_fraction = 0.3;
  std::vector<std::string> background{"normal", "stroma"};
  std::string provenance = "synthetic";
};

struct SynthWorld {
  Corpus corpus;
  ToolkitLibrary toolkits;
};

SynthWorld make_world(const std::vector<SlideRecipe>& slides, const SynthOptions& opts = {});

// ---- simulated cases ----

inline const std::vector<std::string> kRccSubtypes{"ccRCC", "chRCC", "pRCC"};
std::string subtype_name(const std::string& code);  // "ccRCC" -> "Clear cell renal cell carcinoma"
std::string subtype_marker(const std::string& code);  // discriminating IHC marker

struct SynthCase {
  std::string case_id;
  std::string slide_id;
  std::string truth_code;                // ccRCC | chRCC | pRCC
  std::vector<std::string> candidates;   // initial differential, codes
  int grade = 0;                         // 1..4, 0 when none
  std::string case_info;

  std::string truth() const { return subtype_name(truth_code); }
  nlohmann::json to_json() const;
  static SynthCase from_json(const nlohmann::json& j);
};

// Deterministic stand-in for the reasoner, interpreter and exam oracle of one
// case. The reasoner lists the candidates and asks for the marker panel and the
// RCC tools; its final call picks the first candidate with positive evidence,
// else the top of its differential. ICL answers are right with a probability
// that grows with the number of references.
class SimulatedBackend final : public Backend {
 public:
  SimulatedBackend(Role role, SynthCase c) : role_(role), case_(std::move(c)) {}
  BackendResponse call(const BackendRequest& request) override;
  std::string id() const override;

 private:
  Role role_;
  SynthCase case_;
};

BackendSet simulated_backends(const SynthCase& c);

// n cases with round-robin truths and seeded differential orderings, plus the
// matching slides.
std::vector<SynthCase> make_synth_cases(std::size_t n, std::uint64_t seed);
std::vector<SlideRecipe> recipes_for(const std::vector<SynthCase>& cases);

// Slide used by the worked-case fixtures: a clear cell RCC with grade 3 tumor,
// a gastric adenocarcinoma with vessel invasion, a thymic tumor, and a prostate
// slide.
std::vector<SlideRecipe> fixture_slide_recipes();

}  // namespace dx
