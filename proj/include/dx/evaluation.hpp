#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "dx/judge.hpp"
#include "dx/protocol.hpp"
#include "dx/synthetic.hpp"

namespace dx {

struct CaseFixture {
  std::string case_id;
  std::string case_info;
  std::string slide_id;
  std::string truth;
  std::optional<int> nuclear_grade;                // Fuhrman/ISUP 1..4
  std::optional<std::pair<int, int>> gleason;      // primary, secondary
  std::optional<bool> invasion;
  std::optional<nlohmann::json> script;            // scripted backends
  std::optional<SynthCase> simulation;             // simulated backends
  bool live = false;
  Protocol protocol = Protocol::kEvidenceSeeking;
  std::map<std::string, std::string> human_exams;  // answers given instead of the oracle

  // `script` may be inline or a path relative to `base_dir`.
  static CaseFixture from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
  nlohmann::json to_json() const;
};

// Every *.json directly under `dir`, in file-name order.
std::vector<CaseFixture> load_fixtures(const std::filesystem::path& dir);

// ES fixtures answered by simulated backends.
std::vector<CaseFixture> synth_fixtures(const std::vector<SynthCase>& cases);

struct CaseResult {
  std::string case_id;
  bool ok = false;
  std::string error;
  std::string stage;
  std::vector<std::string> stage_trace;
  std::optional<std::string> final_diagnosis;
  bool inconclusive = false;
  std::vector<std::string> initial_ddx;
  std::vector<std::string> differential;
  std::vector<std::string> pre_evidence_text;  // think + answer of pre-evidence turns
  std::vector<std::string> observations;
  std::size_t reasoner_turns = 0;
  std::string log;

  std::string prediction() const;  // boxed, else top of the last differential
  std::optional<int> predicted_grade() const;
  std::optional<std::pair<int, int>> predicted_gleason() const;
  std::optional<bool> predicted_invasion() const;
};

struct RunOptions {
  SessionConfig session;
  const EngineResources* resources = nullptr;
  std::size_t parallelism = 1;
  std::optional<std::filesystem::path> transcript_dir;
  std::optional<BackendSet> live;  // shared clients for live fixtures
};

// Runs each fixture as its own session; per-case failures are recorded, never
// thrown. Results keep fixture order whatever the parallelism.
std::vector<CaseResult> run_protocol(const std::vector<CaseFixture>& fixtures, Protocol protocol,
                                     const RunOptions& options);

// ---- metrics ----

struct BaccResult {
  double value = 0.0;
  std::map<std::string, double> recalls;
  std::vector<std::string> excluded;  // classes without instances
};

BaccResult balanced_accuracy(const std::vector<std::string>& predictions, const std::vector<std::string>& truths,
                             const std::vector<std::string>& classes);
double accuracy(const std::vector<std::string>& predictions, const std::vector<std::string>& truths);

struct Prf {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  bool precision_undefined = false;
  bool recall_undefined = false;
};
Prf invasion_prf(const std::vector<bool>& predictions, const std::vector<bool>& truths);

// (primary hit, combined hit); patterns must lie in 3..5.
std::pair<bool, bool> gleason_accuracy(std::pair<int, int> predicted, std::pair<int, int> truth);

// 0 for grades 1-2, 1 for grades 3-4.
int grade_band(int grade);

struct PemrResult {
  double rate = 0.0;
  std::size_t mentioning = 0;
  std::size_t total = 0;
};
PemrResult pemr(const std::vector<std::vector<std::string>>& transcripts, const std::vector<std::string>& patterns);

std::map<std::string, std::vector<std::string>> default_pemr_patterns();

// Maps a free-text diagnosis onto one of `classes` with the judge normalizer;
// "other" when none matches.
std::string classify(std::string_view diagnosis, const std::vector<std::string>& classes,
                     const DiagnosisNormalizer& norm);

struct MetricsReport {
  std::size_t cases = 0;
  std::vector<std::string> failed;
  std::vector<std::string> classes;
  BaccResult final_bacc;
  double final_acc = 0.0;
  double initial_bacc = 0.0;
  double ddx_bacc = 0.0;
  double ddx_length = 0.0;
  std::map<std::string, PemrResult> pemr;
  std::optional<double> grade_band_acc;
  std::optional<double> gleason_primary_acc;
  std::optional<double> gleason_combined_acc;
  std::optional<Prf> invasion;

  nlohmann::json to_json() const;
};

MetricsReport compute_metrics(const std::vector<CaseFixture>& fixtures, const std::vector<CaseResult>& results,
                              const JudgeTables& tables = JudgeTables::defaults());

// ---- ablation ----

enum class AblationAxis { kEvidenceSources, kRoiPlan, kIclCount };
AblationAxis parse_axis(std::string_view text);  // ConfigError
std::string_view to_string(AblationAxis a);

struct AblationCell {
  std::vector<std::string> labels;  // one per label column
  SessionConfig config;
};

// Validates the whole grid before anything runs.
std::vector<AblationCell> expand_grid(AblationAxis axis, std::string_view grid, const SessionConfig& base);
std::vector<std::string> label_columns(AblationAxis axis);

struct AblationRow {
  std::vector<std::string> labels;
  MetricsReport metrics;
};

struct AblationReport {
  AblationAxis axis;
  std::vector<std::string> label_columns;
  std::vector<AblationRow> rows;

  nlohmann::json to_json() const;
  std::string to_text() const;
};

AblationReport run_ablation(AblationAxis axis, std::string_view grid, const std::vector<CaseFixture>& fixtures,
                            const RunOptions& options);

// Aligned plain-text table.
std::string format_table(const std::vector<std::string>& headers, const std::vector<std::vector<std::string>>& rows);
std::string metrics_table(const MetricsReport& m);

inline constexpr int kReportVersion = 1;

}  // namespace dx
