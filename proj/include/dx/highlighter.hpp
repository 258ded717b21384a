#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dx/embedding_store.hpp"
#include "dx/kernels.hpp"
#include "dx/random.hpp"

namespace dx {

struct Prototype {
  std::string description;
  Level level = Level::k10x;
  std::vector<float> vector;
  std::vector<std::string> support_ids;
  std::string category;
};

enum class ToolkitMode { kGrounding, kLocalization };

std::string_view to_string(ToolkitMode mode);
ToolkitMode parse_toolkit_mode(std::string_view text);

struct Toolkit {
  std::string name;
  std::vector<Prototype> prototypes;  // order is the tie-breaking order
  std::vector<std::string> highlight_set;
  ToolkitMode mode = ToolkitMode::kGrounding;

  std::vector<std::string> descriptions() const;
  std::vector<std::string> categories() const;  // first-seen order
  std::size_t dimension() const;
  // Prototypes at one magnification, original order preserved.
  Toolkit at_level(Level level) const;
  std::vector<Level> levels() const;
  // Columns whose description is in the highlight set.
  std::vector<std::size_t> highlight_columns() const;
  // Throws ConfigError/DimensionError when the invariants do not hold.
  void validate() const;
};

struct BuildOptions {
  bool normalize_support = false;
};

// Arithmetic mean of the support embeddings (accumulated in double).
Prototype build_prototype(std::span<const std::vector<float>> refs, std::string description,
                          Level level, std::string category,
                          std::vector<std::string> support_ids = {}, BuildOptions opts = {});

// Cosine similarity between every patch row and every prototype. Uses the OpenMP
// kernel; `serial` selects the reference kernel.
SimilarityMatrix similarity_matrix(const EmbeddingView& patches, const Toolkit& toolkit,
                                   std::string_view slide_id = {}, bool serial = false);
SimilarityMatrix similarity_matrix(std::span<const PatchRecord> patches, const Toolkit& toolkit);

struct Grounding {
  std::vector<std::size_t> assignment;   // patch -> prototype column
  std::vector<std::size_t> highlighted;  // H_R, ascending patch index
};

Grounding ground_regions(const SimilarityMatrix& s, const Toolkit& toolkit, bool serial = false);

enum class Provenance { kTopK, kRandom, kKMeans };
std::string_view to_string(Provenance p);

struct RoiEntry {
  std::size_t patch = 0;  // row index in the (y, x)-sorted level view
  Level level = Level::k10x;
  float score = 0.0f;
  Provenance provenance = Provenance::kTopK;
  GridCoord coord;
  std::string ref;          // filled by resolve()
  std::string description;  // prototype the entry was retrieved for, when any
};

struct RoiSelection {
  std::vector<RoiEntry> entries;
  std::string plan_name;
  bool shortfall = false;  // fewer candidates than requested
  bool clipped = false;    // k exceeded N for localization

  // Fills coord/ref of every entry at `level` from the level view.
  void resolve(std::string_view slide_id, Level level, const EmbeddingView& view);
  std::vector<std::string> refs() const;
};

// Top k_top patches of H_R by max similarity over `score_columns`, followed by
// k_random patches drawn without replacement from the rest of H_R.
RoiSelection select_rois_region(std::span<const std::size_t> highlighted, const SimilarityMatrix& s,
                                std::span<const std::size_t> score_columns, std::size_t k_top,
                                std::size_t k_random, Rng& rng);
RoiSelection select_rois_region(std::span<const std::size_t> highlighted, const SimilarityMatrix& s,
                                std::span<const std::size_t> score_columns, std::size_t k_top,
                                std::size_t k_random, std::uint64_t seed);

// Variant whose extra RoIs are the best remaining H_R patches for each K-means
// sub-prototype column, taken round-robin.
RoiSelection select_rois_kmeans(std::span<const std::size_t> highlighted, const SimilarityMatrix& s,
                                std::span<const std::size_t> score_columns,
                                std::span<const std::size_t> subprototype_columns,
                                std::size_t k_top, std::size_t k_extra);

// Per prototype column, the k patches with the highest similarity (ties by index).
std::vector<RoiSelection> localize_entities(const SimilarityMatrix& s, const Toolkit& toolkit,
                                            std::size_t k);

struct KMeansOptions {
  std::size_t max_iters = 100;
  double tol = 1e-6;  // relative WCSS change
};

struct KMeansResult {
  std::vector<std::vector<float>> centroids;
  std::vector<std::size_t> assignment;
  std::vector<double> wcss_history;  // after each assignment step
  std::size_t iterations = 0;
};

// Lloyd's algorithm seeded with k-means++.
KMeansResult kmeans(std::span<const std::vector<float>> members, std::size_t k, std::uint64_t seed,
                    KMeansOptions opts = {});

// K sub-prototypes of one category; descriptions are "<description>#<i>".
std::vector<Prototype> kmeans_augment(std::span<const std::vector<float>> members,
                                      const Prototype& base, std::size_t k, std::uint64_t seed,
                                      KMeansOptions opts = {});

struct GleasonResult {
  std::map<std::string, std::size_t> counts;  // per category
  std::map<std::string, double> areas;
  int primary = 0;
  int secondary = 0;
  std::string score() const { return std::to_string(primary) + "+" + std::to_string(secondary); }
};

inline constexpr double kGleasonSecondaryFraction = 0.05;

// Decision rule on per-pattern patch counts (keys "G3", "G4", "G5").
GleasonResult gleason_from_counts(const std::map<std::string, std::size_t>& counts,
                                  double area_per_patch = 1.0);
GleasonResult gleason_area_map(const SimilarityMatrix& s, const Toolkit& toolkit,
                               double area_per_patch);

// Region-plan driver used by the protocol engine and the CLI.
enum class ExtraMode { kRandom, kKMeans };

struct PlanStep {
  Level level = Level::k10x;
  std::size_t k_top = 0;
  std::size_t k_extra = 0;
  ExtraMode extra = ExtraMode::kRandom;
};

struct SelectionPlan {
  std::string name;
  std::vector<PlanStep> steps;
};

// top-3 @10x + 2 random @10x + top-3 @20x
SelectionPlan pan_cancer_plan();
// Same counts with K-means sub-prototype RoIs in place of the random ones.
SelectionPlan rcc_subtype_plan();
SelectionPlan parse_plan(std::string_view text);  // "name" or "10x:3+2r,20x:3"
std::string describe(const SelectionPlan& plan);

struct HighlightResult {
  RoiSelection selection;
  std::map<Level, std::size_t> highlighted_counts;
  std::map<Level, std::size_t> patch_counts;
  std::map<Level, std::vector<std::size_t>> assignments;  // for label export
};

// Runs grounding at every plan level and applies the plan. Throws
// EmptyHighlightError when no level has a highlighted patch.
HighlightResult highlight_slide(const Corpus& corpus, std::string_view slide_id,
                                const Toolkit& toolkit, const SelectionPlan& plan, Rng& rng);

// Localization at `level`, merged per category: best k unique patches across the
// category's sub-prototype columns.
std::map<std::string, RoiSelection> localize_categories(const Corpus& corpus,
                                                        std::string_view slide_id,
                                                        const Toolkit& toolkit, Level level,
                                                        std::size_t k);

// Toolkit files: <name>.toolkit.json plus <name>.emb holding the prototype rows.
void save_toolkit(const Toolkit& toolkit, const std::filesystem::path& dir);
Toolkit load_toolkit(const std::filesystem::path& json_path);

class ToolkitLibrary {
 public:
  ToolkitLibrary() = default;
  static ToolkitLibrary load(const std::filesystem::path& dir);
  void add(Toolkit toolkit);
  const Toolkit& get(std::string_view name) const;  // NotFoundError
  bool contains(std::string_view name) const;
  std::vector<std::string> names() const;

 private:
  std::map<std::string, Toolkit, std::less<>> toolkits_;
};

// Builds a toolkit from a recipe: each prototype entry names a description,
// category, level, support patch refs ("slide@level:x,y") and an optional
// "kmeans" sub-prototype count.
Toolkit build_toolkit(const std::filesystem::path& recipe_path, const Corpus& corpus,
                      std::uint64_t seed = 0);

}  // namespace dx
