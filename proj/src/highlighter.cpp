#include "dx/highlighter.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "dx/errors.hpp"

namespace dx {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Orders candidates by score descending, then patch index ascending.
struct ByScoreThenIndex {
  std::span<const float> score;
  bool operator()(std::size_t a, std::size_t b) const {
    return score[a] != score[b] ? score[a] > score[b] : a < b;
  }
};

std::vector<float> max_over_columns(const SimilarityMatrix& s, std::span<const std::size_t> cols) {
  std::vector<float> out(s.rows, -2.0f);
  for (std::size_t n = 0; n < s.rows; ++n) {
    if (cols.empty()) {
      for (std::size_t t = 0; t < s.cols; ++t) out[n] = std::max(out[n], s.at(n, t));
    } else {
      for (std::size_t t : cols) out[n] = std::max(out[n], s.at(n, t));
    }
  }
  return out;
}

std::vector<std::size_t> top_of(std::span<const std::size_t> candidates, std::span<const float> score,
                                std::size_t k) {
  std::vector<std::size_t> c(candidates.begin(), candidates.end());
  k = std::min(k, c.size());
  std::partial_sort(c.begin(), c.begin() + static_cast<std::ptrdiff_t>(k), c.end(),
                    ByScoreThenIndex{score});
  c.resize(k);
  return c;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw NotFoundError("cannot open " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

bool parse_int(std::string_view s, std::int32_t& out) {
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc{} && ptr == s.data() + s.size();
}

}  // namespace

std::string_view to_string(ToolkitMode mode) {
  return mode == ToolkitMode::kGrounding ? "grounding" : "localization";
}

ToolkitMode parse_toolkit_mode(std::string_view text) {
  if (text == "grounding") return ToolkitMode::kGrounding;
  if (text == "localization") return ToolkitMode::kLocalization;
  throw ConfigError("unknown toolkit mode '" + std::string(text) + "'");
}

std::string_view to_string(Provenance p) {
  switch (p) {
    case Provenance::kTopK: return "topk";
    case Provenance::kRandom: return "random";
    case Provenance::kKMeans: return "kmeans";
  }
  return "?";
}

std::vector<std::string> Toolkit::descriptions() const {
  std::vector<std::string> out;
  for (const auto& p : prototypes) out.push_back(p.description);
  return out;
}

std::vector<std::string> Toolkit::categories() const {
  std::vector<std::string> out;
  for (const auto& p : prototypes) {
    if (std::find(out.begin(), out.end(), p.category) == out.end()) out.push_back(p.category);
  }
  return out;
}

std::size_t Toolkit::dimension() const {
  return prototypes.empty() ? 0 : prototypes.front().vector.size();
}

Toolkit Toolkit::at_level(Level level) const {
  Toolkit sub{name, {}, highlight_set, mode};
  for (const auto& p : prototypes) {
    if (p.level == level) sub.prototypes.push_back(p);
  }
  return sub;
}

std::vector<Level> Toolkit::levels() const {
  std::vector<Level> out;
  for (const auto& p : prototypes) {
    if (std::find(out.begin(), out.end(), p.level) == out.end()) out.push_back(p.level);
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<std::size_t> Toolkit::highlight_columns() const {
  std::vector<std::size_t> cols;
  for (std::size_t t = 0; t < prototypes.size(); ++t) {
    const auto& p = prototypes[t];
    const bool hit = std::any_of(highlight_set.begin(), highlight_set.end(), [&](const auto& h) {
      return h == p.description || h == p.category;
    });
    if (hit) cols.push_back(t);
  }
  return cols;
}

void Toolkit::validate() const {
  if (prototypes.empty()) throw ConfigError("toolkit '" + name + "' has no prototypes");
  const std::size_t d = dimension();
  for (const auto& p : prototypes) {
    if (p.vector.size() != d) throw DimensionError("toolkit '" + name + "' mixes prototype dimensions");
    if (p.support_ids.empty()) {
      throw ConfigError("prototype '" + p.description + "' in toolkit '" + name + "' has no support");
    }
  }
  for (const auto& h : highlight_set) {
    const bool known = std::any_of(prototypes.begin(), prototypes.end(), [&](const auto& p) {
      return p.description == h || p.category == h;
    });
    if (!known) throw ConfigError("highlight '" + h + "' is not a description of toolkit '" + name + "'");
  }
}

Prototype build_prototype(std::span<const std::vector<float>> refs, std::string description, Level level,
                          std::string category, std::vector<std::string> support_ids,
                          BuildOptions opts) {
  if (refs.empty()) throw EmptySupportError("prototype '" + description + "' has an empty support set");
  const std::size_t d = refs.front().size();
  std::vector<double> acc(d, 0.0);
  for (const auto& r : refs) {
    if (r.size() != d) throw DimensionError("support set of '" + description + "' mixes dimensions");
    double scale = 1.0;
    if (opts.normalize_support) {
      double nn = 0.0;
      for (float v : r) nn += static_cast<double>(v) * v;
      if (nn == 0.0) throw ZeroNormError("zero-norm support embedding for '" + description + "'");
      scale = 1.0 / std::sqrt(nn);
    }
    for (std::size_t k = 0; k < d; ++k) acc[k] += static_cast<double>(r[k]) * scale;
  }
  Prototype p;
  p.description = std::move(description);
  p.level = level;
  p.category = category.empty() ? p.description : std::move(category);
  p.vector.resize(d);
  const double m = static_cast<double>(refs.size());
  for (std::size_t k = 0; k < d; ++k) p.vector[k] = static_cast<float>(acc[k] / m);
  if (support_ids.empty()) {
    for (std::size_t i = 0; i < refs.size(); ++i) support_ids.push_back(p.description + "/ref" + std::to_string(i));
  }
  p.support_ids = std::move(support_ids);
  return p;
}

SimilarityMatrix similarity_matrix(const EmbeddingView& patches, const Toolkit& toolkit,
                                   std::string_view slide_id, bool serial) {
  const std::size_t d = patches.dim;
  std::vector<float> proto_data;
  proto_data.reserve(toolkit.prototypes.size() * d);
  for (const auto& p : toolkit.prototypes) {
    if (p.vector.size() != d) {
      throw DimensionError("prototype '" + p.description + "' has d=" + std::to_string(p.vector.size()) +
                           " but patches have d=" + std::to_string(d));
    }
    proto_data.insert(proto_data.end(), p.vector.begin(), p.vector.end());
  }
  const MatrixRef pm{patches.data, patches.rows, d};
  const MatrixRef qm{proto_data, toolkit.prototypes.size(), d};
  std::size_t zero = 0;
  const auto qn = kernels::row_norms(qm, zero);
  if (zero != qm.rows) throw ZeroNormError("prototype '" + toolkit.prototypes[zero].description + "' has zero norm");
  const auto pn = serial ? kernels::row_norms(pm, zero) : kernels::row_norms_parallel(pm, zero);
  if (zero != pm.rows) {
    std::string who = "patch row " + std::to_string(zero);
    if (zero < patches.coords.size()) {
      who += " (" + std::string(slide_id) + " x=" + std::to_string(patches.coords[zero].x) +
             " y=" + std::to_string(patches.coords[zero].y) + ")";
    }
    throw ZeroNormError(who + " has a zero-norm embedding");
  }
  return serial ? kernels::cosine_serial(pm, qm, pn, qn) : kernels::cosine_parallel(pm, qm, pn, qn);
}

SimilarityMatrix similarity_matrix(std::span<const PatchRecord> patches, const Toolkit& toolkit) {
  const std::size_t d = patches.empty() ? toolkit.dimension() : patches.front().embedding.size();
  std::vector<float> data;
  std::vector<GridCoord> coords;
  data.reserve(patches.size() * d);
  for (const auto& p : patches) {
    if (p.embedding.size() != d) throw DimensionError("patch sequence mixes embedding dimensions");
    data.insert(data.end(), p.embedding.begin(), p.embedding.end());
    coords.push_back({p.x, p.y});
  }
  const EmbeddingView view{data, coords, patches.size(), d};
  return similarity_matrix(view, toolkit, patches.empty() ? std::string_view{} : patches.front().slide_id);
}

Grounding ground_regions(const SimilarityMatrix& s, const Toolkit& toolkit, bool serial) {
  if (toolkit.mode != ToolkitMode::kGrounding) {
    throw ConfigError("toolkit '" + toolkit.name + "' is not a grounding toolkit");
  }
  if (toolkit.highlight_set.empty()) throw ConfigError("toolkit '" + toolkit.name + "' has an empty highlight set");
  if (s.cols != toolkit.prototypes.size()) throw DimensionError("similarity matrix does not match toolkit");
  Grounding g;
  g.assignment = serial ? kernels::argmax_rows_serial(s) : kernels::argmax_rows_parallel(s);
  const auto cols = toolkit.highlight_columns();
  std::vector<char> is_highlight(s.cols, 0);
  for (std::size_t c : cols) is_highlight[c] = 1;
  for (std::size_t n = 0; n < g.assignment.size(); ++n) {
    if (is_highlight[g.assignment[n]]) g.highlighted.push_back(n);
  }
  return g;
}

void RoiSelection::resolve(std::string_view slide_id, Level level, const EmbeddingView& view) {
  for (auto& e : entries) {
    if (e.level != level || e.patch >= view.rows) continue;
    e.coord = view.coords[e.patch];
    e.ref = patch_ref(slide_id, level, e.coord);
  }
}

std::vector<std::string> RoiSelection::refs() const {
  std::vector<std::string> out;
  for (const auto& e : entries) out.push_back(e.ref);
  return out;
}

RoiSelection select_rois_region(std::span<const std::size_t> highlighted, const SimilarityMatrix& s,
                                std::span<const std::size_t> score_columns, std::size_t k_top,
                                std::size_t k_random, Rng& rng) {
  if (highlighted.empty()) throw EmptyHighlightError("no suspicious region found");
  const auto score = max_over_columns(s, score_columns);
  RoiSelection sel;
  sel.shortfall = highlighted.size() < k_top + k_random;
  const auto top = top_of(highlighted, score, k_top);
  for (std::size_t n : top) sel.entries.push_back({n, Level::k10x, score[n], Provenance::kTopK, {}, {}, {}});

  std::vector<std::size_t> rest;
  const std::set<std::size_t> taken(top.begin(), top.end());
  for (std::size_t n : highlighted) {
    if (!taken.count(n)) rest.push_back(n);
  }
  std::sort(rest.begin(), rest.end());
  const std::size_t draws = std::min(k_random, rest.size());
  for (std::size_t i = 0; i < draws; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(rest.size() - i));
    std::swap(rest[i], rest[j]);
    sel.entries.push_back({rest[i], Level::k10x, score[rest[i]], Provenance::kRandom, {}, {}, {}});
  }
  return sel;
}

RoiSelection select_rois_region(std::span<const std::size_t> highlighted, const SimilarityMatrix& s,
                                std::span<const std::size_t> score_columns, std::size_t k_top,
                                std::size_t k_random, std::uint64_t seed) {
  Rng rng(seed);
  return select_rois_region(highlighted, s, score_columns, k_top, k_random, rng);
}

RoiSelection select_rois_kmeans(std::span<const std::size_t> highlighted, const SimilarityMatrix& s,
                                std::span<const std::size_t> score_columns,
                                std::span<const std::size_t> subprototype_columns, std::size_t k_top,
                                std::size_t k_extra) {
  if (highlighted.empty()) throw EmptyHighlightError("no suspicious region found");
  const auto score = max_over_columns(s, score_columns);
  RoiSelection sel;
  sel.shortfall = highlighted.size() < k_top + k_extra;
  const auto top = top_of(highlighted, score, k_top);
  std::set<std::size_t> taken(top.begin(), top.end());
  for (std::size_t n : top) sel.entries.push_back({n, Level::k10x, score[n], Provenance::kTopK, {}, {}, {}});
  if (subprototype_columns.empty() || k_extra == 0) return sel;

  // Per sub-prototype candidate order, consumed round-robin.
  std::vector<std::vector<std::size_t>> orders;
  std::vector<std::vector<float>> column_scores;
  for (std::size_t c : subprototype_columns) {
    std::vector<float> col(s.rows);
    for (std::size_t n = 0; n < s.rows; ++n) col[n] = s.at(n, c);
    auto order = top_of(highlighted, col, highlighted.size());
    orders.push_back(std::move(order));
    column_scores.push_back(std::move(col));
  }
  std::vector<std::size_t> cursor(orders.size(), 0);
  std::size_t added = 0;
  bool progress = true;
  while (added < k_extra && progress) {
    progress = false;
    for (std::size_t c = 0; c < orders.size() && added < k_extra; ++c) {
      while (cursor[c] < orders[c].size() && taken.count(orders[c][cursor[c]])) ++cursor[c];
      if (cursor[c] == orders[c].size()) continue;
      const std::size_t n = orders[c][cursor[c]++];
      taken.insert(n);
      sel.entries.push_back({n, Level::k10x, column_scores[c][n], Provenance::kKMeans, {}, {}, {}});
      ++added;
      progress = true;
    }
  }
  return sel;
}

std::vector<RoiSelection> localize_entities(const SimilarityMatrix& s, const Toolkit& toolkit, std::size_t k) {
  if (toolkit.mode != ToolkitMode::kLocalization) {
    throw ConfigError("toolkit '" + toolkit.name + "' is not a localization toolkit");
  }
  if (k == 0) throw ContractError("localization requires k >= 1");
  if (s.cols != toolkit.prototypes.size()) throw DimensionError("similarity matrix does not match toolkit");
  const bool clipped = k > s.rows;
  k = std::min(k, s.rows);
  std::vector<std::size_t> all(s.rows);
  std::iota(all.begin(), all.end(), std::size_t{0});
  std::vector<RoiSelection> out(s.cols);
  std::vector<float> col(s.rows);
  for (std::size_t t = 0; t < s.cols; ++t) {
    for (std::size_t n = 0; n < s.rows; ++n) col[n] = s.at(n, t);
    auto& sel = out[t];
    sel.clipped = clipped;
    sel.plan_name = toolkit.prototypes[t].description;
    for (std::size_t n : top_of(all, col, k)) {
      sel.entries.push_back({n, toolkit.prototypes[t].level, col[n], Provenance::kTopK, {}, {},
                             toolkit.prototypes[t].description});
    }
  }
  return out;
}

namespace {

double sq_dist(const std::vector<double>& c, const std::vector<float>& x) {
  double acc = 0.0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double diff = static_cast<double>(x[k]) - c[k];
    acc += diff * diff;
  }
  return acc;
}

}  // namespace

KMeansResult kmeans(std::span<const std::vector<float>> members, std::size_t k, std::uint64_t seed,
                    KMeansOptions opts) {
  const std::size_t n = members.size();
  if (k == 0) throw ContractError("k-means requires K >= 1");
  if (n < k) {
    throw InsufficientSupportError("k-means needs at least K=" + std::to_string(k) + " members, got " +
                                   std::to_string(n));
  }
  const std::size_t d = members.front().size();
  for (const auto& m : members) {
    if (m.size() != d) throw DimensionError("k-means members mix dimensions");
  }
  Rng rng(seed);
  std::vector<std::vector<double>> centers;
  std::vector<char> chosen(n, 0);
  auto add_center = [&](std::size_t i) {
    chosen[i] = 1;
    centers.emplace_back(members[i].begin(), members[i].end());
  };
  add_center(static_cast<std::size_t>(rng.below(n)));
  std::vector<double> d2(n);
  while (centers.size() < k) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& c : centers) best = std::min(best, sq_dist(c, members[i]));
      d2[i] = chosen[i] ? 0.0 : best;
      total += d2[i];
    }
    std::size_t pick = n;
    if (total > 0.0) {
      const double r = rng.uniform() * total;
      double cum = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        cum += d2[i];
        if (d2[i] > 0.0 && cum > r) {
          pick = i;
          break;
        }
      }
      if (pick == n) {  // rounding at the top end
        for (std::size_t i = n; i-- > 0;) {
          if (d2[i] > 0.0) {
            pick = i;
            break;
          }
        }
      }
    } else {
      for (std::size_t i = 0; i < n && pick == n; ++i) {
        if (!chosen[i]) pick = i;
      }
    }
    add_center(pick);
  }

  KMeansResult res;
  res.assignment.assign(n, 0);
  double prev = std::numeric_limits<double>::infinity();
  for (std::size_t iter = 0; iter < std::max<std::size_t>(opts.max_iters, 1); ++iter) {
    double wcss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t arg = 0;
      double best = sq_dist(centers[0], members[i]);
      for (std::size_t c = 1; c < k; ++c) {
        const double v = sq_dist(centers[c], members[i]);
        if (v < best) {
          best = v;
          arg = c;
        }
      }
      res.assignment[i] = arg;
      wcss += best;
    }
    res.wcss_history.push_back(wcss);
    res.iterations = iter + 1;
    const bool converged = std::isfinite(prev) && (prev - wcss) <= opts.tol * prev;
    if (converged) break;
    prev = wcss;

    std::vector<std::vector<double>> sums(k, std::vector<double>(d, 0.0));
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      auto& s = sums[res.assignment[i]];
      for (std::size_t j = 0; j < d; ++j) s[j] += members[i][j];
      ++counts[res.assignment[i]];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;  // empty cluster keeps its centre
      for (std::size_t j = 0; j < d; ++j) centers[c][j] = sums[c][j] / static_cast<double>(counts[c]);
    }
  }
  for (const auto& c : centers) {
    std::vector<float> f(d);
    for (std::size_t j = 0; j < d; ++j) f[j] = static_cast<float>(c[j]);
    res.centroids.push_back(std::move(f));
  }
  return res;
}

std::vector<Prototype> kmeans_augment(std::span<const std::vector<float>> members, const Prototype& base,
                                      std::size_t k, std::uint64_t seed, KMeansOptions opts) {
  const auto res = kmeans(members, k, seed, opts);
  std::vector<Prototype> out;
  for (std::size_t c = 0; c < k; ++c) {
    Prototype p;
    p.description = base.description + "#" + std::to_string(c);
    p.category = base.category;
    p.level = base.level;
    p.vector = res.centroids[c];
    for (std::size_t i = 0; i < members.size(); ++i) {
      if (res.assignment[i] == c && i < base.support_ids.size()) p.support_ids.push_back(base.support_ids[i]);
    }
    if (p.support_ids.empty()) p.support_ids = base.support_ids;
    out.push_back(std::move(p));
  }
  return out;
}

GleasonResult gleason_from_counts(const std::map<std::string, std::size_t>& counts, double area_per_patch) {
  static const char* kPatterns[] = {"G3", "G4", "G5"};
  GleasonResult r;
  r.counts = counts;
  for (const auto& [cat, c] : counts) r.areas[cat] = static_cast<double>(c) * area_per_patch;
  auto count_of = [&](const char* p) {
    auto it = counts.find(p);
    return it == counts.end() ? std::size_t{0} : it->second;
  };
  std::size_t tumor = 0;
  for (const char* p : kPatterns) tumor += count_of(p);
  if (tumor == 0) throw NoTumorError("no patch was assigned to a Gleason pattern");

  int order[3] = {0, 1, 2};
  // Largest count first; equal counts keep the lower pattern first.
  std::stable_sort(order, order + 3, [&](int a, int b) { return count_of(kPatterns[a]) > count_of(kPatterns[b]); });
  r.primary = 3 + order[0];
  const double threshold = std::max(kGleasonSecondaryFraction * static_cast<double>(tumor), 1.0);
  const auto second = count_of(kPatterns[order[1]]);
  r.secondary = (second > 0 && static_cast<double>(second) >= threshold) ? 3 + order[1] : r.primary;
  return r;
}

GleasonResult gleason_area_map(const SimilarityMatrix& s, const Toolkit& toolkit, double area_per_patch) {
  const auto cats = toolkit.categories();
  for (const char* p : {"G3", "G4", "G5"}) {
    if (std::find(cats.begin(), cats.end(), p) == cats.end()) {
      throw ConfigError("Gleason toolkit '" + toolkit.name + "' lacks category " + p);
    }
  }
  if (s.cols != toolkit.prototypes.size()) throw DimensionError("similarity matrix does not match toolkit");
  const auto arg = kernels::argmax_rows_parallel(s);
  std::map<std::string, std::size_t> counts;
  for (const auto& c : cats) counts[c] = 0;
  for (std::size_t a : arg) ++counts[toolkit.prototypes[a].category];
  return gleason_from_counts(counts, area_per_patch);
}

SelectionPlan pan_cancer_plan() {
  return {"pan-8", {{Level::k10x, 3, 2, ExtraMode::kRandom}, {Level::k20x, 3, 0, ExtraMode::kRandom}}};
}

SelectionPlan rcc_subtype_plan() {
  return {"rcc-kmeans-8", {{Level::k10x, 3, 2, ExtraMode::kKMeans}, {Level::k20x, 3, 0, ExtraMode::kRandom}}};
}

std::string describe(const SelectionPlan& plan) {
  std::string out;
  for (const auto& s : plan.steps) {
    if (!out.empty()) out += ",";
    out += std::string(to_string(s.level)) + ":" + std::to_string(s.k_top);
    if (s.k_extra > 0) out += "+" + std::to_string(s.k_extra) + (s.extra == ExtraMode::kRandom ? "r" : "k");
  }
  return out;
}

SelectionPlan parse_plan(std::string_view text) {
  if (text == "pan-8" || text == "default") return pan_cancer_plan();
  if (text == "rcc-kmeans-8") return rcc_subtype_plan();
  SelectionPlan plan{std::string(text), {}};
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto comma = std::min(text.find(',', pos), text.size());
    const auto item = text.substr(pos, comma - pos);
    const auto colon = item.find(':');
    if (colon == std::string_view::npos) throw ConfigError("bad plan step '" + std::string(item) + "'");
    const auto level = try_parse_level(item.substr(0, colon));
    if (!level) throw ConfigError("bad plan level in '" + std::string(item) + "'");
    PlanStep step{*level, 0, 0, ExtraMode::kRandom};
    auto counts = item.substr(colon + 1);
    const auto plus = counts.find('+');
    std::int32_t v = 0;
    if (!parse_int(counts.substr(0, plus), v) || v < 0) throw ConfigError("bad top-k in '" + std::string(item) + "'");
    step.k_top = static_cast<std::size_t>(v);
    if (plus != std::string_view::npos) {
      auto extra = counts.substr(plus + 1);
      if (extra.empty()) throw ConfigError("bad extra count in '" + std::string(item) + "'");
      const char mode = extra.back();
      if (mode == 'r' || mode == 'k') {
        step.extra = mode == 'r' ? ExtraMode::kRandom : ExtraMode::kKMeans;
        extra.remove_suffix(1);
      }
      if (!parse_int(extra, v) || v < 0) throw ConfigError("bad extra count in '" + std::string(item) + "'");
      step.k_extra = static_cast<std::size_t>(v);
    }
    plan.steps.push_back(step);
    pos = comma + 1;
  }
  if (plan.steps.empty()) throw ConfigError("empty selection plan");
  return plan;
}

HighlightResult highlight_slide(const Corpus& corpus, std::string_view slide_id, const Toolkit& toolkit,
                                const SelectionPlan& plan, Rng& rng) {
  HighlightResult out;
  out.selection.plan_name = plan.name;
  struct LevelState {
    Toolkit sub;
    SimilarityMatrix s;
    Grounding g;
    std::set<std::size_t> taken;
  };
  std::map<Level, LevelState> states;
  for (const auto& step : plan.steps) {
    auto it = states.find(step.level);
    if (it == states.end()) {
      LevelState st;
      st.sub = toolkit.at_level(step.level);
      if (st.sub.prototypes.empty()) {
        throw ConfigError("toolkit '" + toolkit.name + "' has no prototypes at " + std::string(to_string(step.level)));
      }
      const auto view = corpus.view(slide_id, step.level);
      st.s = similarity_matrix(view, st.sub, slide_id);
      st.g = ground_regions(st.s, st.sub);
      out.highlighted_counts[step.level] = st.g.highlighted.size();
      out.patch_counts[step.level] = view.rows;
      out.assignments[step.level] = st.g.assignment;
      it = states.emplace(step.level, std::move(st)).first;
    }
    auto& st = it->second;
    std::vector<std::size_t> candidates;
    for (std::size_t n : st.g.highlighted) {
      if (!st.taken.count(n)) candidates.push_back(n);
    }
    if (candidates.empty()) {
      if (step.k_top + step.k_extra > 0) out.selection.shortfall = true;
      continue;
    }
    const auto score_cols = st.sub.highlight_columns();
    RoiSelection part;
    if (step.extra == ExtraMode::kKMeans) {
      std::vector<std::size_t> subs;
      for (std::size_t c : score_cols) {
        if (st.sub.prototypes[c].description != st.sub.prototypes[c].category) subs.push_back(c);
      }
      if (subs.empty()) subs = score_cols;
      part = select_rois_kmeans(candidates, st.s, score_cols, subs, step.k_top, step.k_extra);
    } else {
      part = select_rois_region(candidates, st.s, score_cols, step.k_top, step.k_extra, rng);
    }
    out.selection.shortfall = out.selection.shortfall || part.shortfall;
    for (auto& e : part.entries) {
      e.level = step.level;
      st.taken.insert(e.patch);
    }
    part.resolve(slide_id, step.level, corpus.view(slide_id, step.level));
    out.selection.entries.insert(out.selection.entries.end(), part.entries.begin(), part.entries.end());
  }
  if (out.selection.entries.empty()) throw EmptyHighlightError("no suspicious region found");
  return out;
}

std::map<std::string, RoiSelection> localize_categories(const Corpus& corpus, std::string_view slide_id,
                                                        const Toolkit& toolkit, Level level, std::size_t k) {
  const Toolkit sub = toolkit.at_level(level);
  if (sub.prototypes.empty()) {
    throw ConfigError("toolkit '" + toolkit.name + "' has no prototypes at " + std::string(to_string(level)));
  }
  const auto view = corpus.view(slide_id, level);
  const auto s = similarity_matrix(view, sub, slide_id);
  const auto per_column = localize_entities(s, sub, k);
  std::map<std::string, RoiSelection> out;
  for (std::size_t t = 0; t < per_column.size(); ++t) {
    auto& sel = out[sub.prototypes[t].category];
    sel.plan_name = sub.prototypes[t].category;
    sel.clipped = sel.clipped || per_column[t].clipped;
    sel.entries.insert(sel.entries.end(), per_column[t].entries.begin(), per_column[t].entries.end());
  }
  for (auto& [cat, sel] : out) {
    std::stable_sort(sel.entries.begin(), sel.entries.end(), [](const RoiEntry& a, const RoiEntry& b) {
      return a.score != b.score ? a.score > b.score : a.patch < b.patch;
    });
    std::set<std::size_t> seen;
    std::vector<RoiEntry> unique;
    for (auto& e : sel.entries) {
      if (unique.size() < k && seen.insert(e.patch).second) unique.push_back(std::move(e));
    }
    sel.entries = std::move(unique);
    sel.resolve(slide_id, level, view);
  }
  return out;
}

void save_toolkit(const Toolkit& toolkit, const fs::path& dir) {
  toolkit.validate();
  fs::create_directories(dir);
  RawBlock block;
  block.dim = toolkit.dimension();
  json protos = json::array();
  for (const auto& p : toolkit.prototypes) {
    block.values.insert(block.values.end(), p.vector.begin(), p.vector.end());
    protos.push_back({{"description", p.description},
                      {"category", p.category},
                      {"level", std::string(to_string(p.level))},
                      {"support_ids", p.support_ids}});
  }
  const std::string vectors = toolkit.name + ".emb";
  write_block(dir / vectors, block);
  json j = {{"format", "dx-toolkit"},        {"version", 1},
            {"name", toolkit.name},          {"mode", std::string(to_string(toolkit.mode))},
            {"highlight", toolkit.highlight_set}, {"vectors", vectors},
            {"prototypes", protos}};
  std::ofstream f(dir / (toolkit.name + ".toolkit.json"), std::ios::trunc);
  f << j.dump(2) << '\n';
}

Toolkit load_toolkit(const fs::path& json_path) {
  json j;
  try {
    j = json::parse(read_text(json_path));
  } catch (const json::parse_error& e) {
    throw FormatError("malformed toolkit file " + json_path.string() + ": " + e.what());
  }
  Toolkit t;
  try {
    t.name = j.at("name").get<std::string>();
    t.mode = parse_toolkit_mode(j.at("mode").get<std::string>());
    t.highlight_set = j.value("highlight", std::vector<std::string>{});
    const auto block = read_block(json_path.parent_path() / j.at("vectors").get<std::string>());
    const auto& protos = j.at("prototypes");
    if (block.values.size() != protos.size() * block.dim) {
      throw DimensionError("toolkit '" + t.name + "' vector block does not match its prototype list");
    }
    for (std::size_t i = 0; i < protos.size(); ++i) {
      Prototype p;
      p.description = protos[i].at("description").get<std::string>();
      p.category = protos[i].value("category", p.description);
      p.level = parse_level(protos[i].at("level").get<std::string>());
      p.support_ids = protos[i].value("support_ids", std::vector<std::string>{});
      p.vector.assign(block.values.begin() + static_cast<std::ptrdiff_t>(i * block.dim),
                      block.values.begin() + static_cast<std::ptrdiff_t>((i + 1) * block.dim));
      t.prototypes.push_back(std::move(p));
    }
  } catch (const json::exception& e) {
    throw FormatError("malformed toolkit file " + json_path.string() + ": " + e.what());
  }
  t.validate();
  return t;
}

ToolkitLibrary ToolkitLibrary::load(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw NotFoundError("toolkit directory " + dir.string() + " does not exist");
  ToolkitLibrary lib;
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const auto name = entry.path().filename().string();
    if (name.size() > 13 && name.ends_with(".toolkit.json")) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) lib.add(load_toolkit(f));
  return lib;
}

void ToolkitLibrary::add(Toolkit toolkit) {
  auto name = toolkit.name;
  toolkits_.insert_or_assign(std::move(name), std::move(toolkit));
}

const Toolkit& ToolkitLibrary::get(std::string_view name) const {
  auto it = toolkits_.find(name);
  if (it == toolkits_.end()) throw NotFoundError("unknown toolkit '" + std::string(name) + "'");
  return it->second;
}

bool ToolkitLibrary::contains(std::string_view name) const { return toolkits_.find(name) != toolkits_.end(); }

std::vector<std::string> ToolkitLibrary::names() const {
  std::vector<std::string> out;
  for (const auto& [n, t] : toolkits_) out.push_back(n);
  return out;
}

Toolkit build_toolkit(const fs::path& recipe_path, const Corpus& corpus, std::uint64_t seed) {
  json j;
  try {
    j = json::parse(read_text(recipe_path));
  } catch (const json::parse_error& e) {
    throw FormatError("malformed toolkit recipe " + recipe_path.string() + ": " + e.what());
  }
  // (slide, level) -> coordinate lookup, built on demand.
  std::map<std::pair<std::string, Level>, std::unordered_map<std::uint64_t, std::size_t>> index;
  auto lookup = [&](const std::string& ref) -> std::vector<float> {
    const auto at = ref.find('@');
    const auto colon = ref.find(':', at == std::string::npos ? 0 : at);
    const auto comma = ref.find(',', colon == std::string::npos ? 0 : colon);
    std::int32_t x = 0, y = 0;
    if (at == std::string::npos || colon == std::string::npos || comma == std::string::npos ||
        !parse_int(std::string_view(ref).substr(colon + 1, comma - colon - 1), x) ||
        !parse_int(std::string_view(ref).substr(comma + 1), y)) {
      throw FormatError("malformed support reference '" + ref + "'");
    }
    const std::string slide = ref.substr(0, at);
    const Level level = parse_level(std::string_view(ref).substr(at + 1, colon - at - 1));
    const auto view = corpus.view(slide, level);
    auto key = std::make_pair(slide, level);
    auto it = index.find(key);
    if (it == index.end()) {
      std::unordered_map<std::uint64_t, std::size_t> m;
      for (std::size_t i = 0; i < view.rows; ++i) {
        m[(static_cast<std::uint64_t>(static_cast<std::uint32_t>(view.coords[i].x)) << 32) |
          static_cast<std::uint32_t>(view.coords[i].y)] = i;
      }
      it = index.emplace(key, std::move(m)).first;
    }
    const auto hit = it->second.find((static_cast<std::uint64_t>(static_cast<std::uint32_t>(x)) << 32) |
                                     static_cast<std::uint32_t>(y));
    if (hit == it->second.end()) throw NotFoundError("support patch '" + ref + "' is not in the corpus");
    const auto row = view.row(hit->second);
    return {row.begin(), row.end()};
  };

  Toolkit t;
  try {
    t.name = j.at("name").get<std::string>();
    t.mode = parse_toolkit_mode(j.at("mode").get<std::string>());
    t.highlight_set = j.value("highlight", std::vector<std::string>{});
    const BuildOptions opts{j.value("normalize_support", false)};
    std::uint64_t salt = 0;
    for (const auto& jp : j.at("prototypes")) {
      const auto support = jp.at("support").get<std::vector<std::string>>();
      std::vector<std::vector<float>> refs;
      for (const auto& r : support) refs.push_back(lookup(r));
      const auto desc = jp.at("description").get<std::string>();
      auto base = build_prototype(refs, desc, parse_level(jp.at("level").get<std::string>()),
                                  jp.value("category", desc), support, opts);
      const auto k = jp.value("kmeans", std::size_t{1});
      if (k > 1) {
        for (auto& p : kmeans_augment(refs, base, k, seed + salt)) t.prototypes.push_back(std::move(p));
      } else {
        t.prototypes.push_back(std::move(base));
      }
      ++salt;
    }
  } catch (const json::exception& e) {
    throw FormatError("malformed toolkit recipe " + recipe_path.string() + ": " + e.what());
  }
  t.validate();
  return t;
}

}  // namespace dx
