#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "dx/errors.hpp"
#include "dx/judge.hpp"
#include "dx/reward.hpp"
#include "generators.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace dx;

TEST(Reward, RankWeightsNormalize) {
  for (double alpha : {0.5, 2.0}) {
    for (std::size_t n = 1; n <= 64; ++n) {
      const auto w = rank_weights(n, alpha);
      long double sum = 0;
      for (double x : w) sum += x;
      EXPECT_NEAR(static_cast<double>(sum), 1.0, 1e-12);
      const auto o = oracle::rank_weights(n, alpha);
      for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(w[i], static_cast<double>(o[i]), 1e-15);
    }
  }
  EXPECT_THROW(rank_weights(3, 0.0), ContractError);
}

TEST(Reward, DiagnosticClosedForm) {
  EXPECT_DOUBLE_EQ(diagnostic_reward(1, 1, 0.5), 1.0);
  EXPECT_DOUBLE_EQ(diagnostic_reward(1, 1, 2.0), 1.0);
  const double a = std::exp(-2.0) / (std::exp(-2.0) + std::exp(-4.0) + std::exp(-6.0));
  EXPECT_NEAR(diagnostic_reward(3, 1, 0.5), a, 1e-12);
  EXPECT_NEAR(diagnostic_reward(3, 1, 0.5), 0.8668133321973347, 1e-9);
  const double b = std::exp(-1.0) / (std::exp(-0.5) + std::exp(-1.0) + std::exp(-1.5));
  EXPECT_NEAR(diagnostic_reward(3, 2, 2.0), b, 1e-12);
  EXPECT_NEAR(diagnostic_reward(3, 2, 2.0), 0.3071958857184984, 1e-9);
  EXPECT_EQ(diagnostic_reward(3, std::nullopt, 0.5), 0.0);
  EXPECT_THROW(diagnostic_reward(0, 1, 0.5), ContractError);
  EXPECT_THROW(diagnostic_reward(2, 3, 0.5), ContractError);
}

TEST(Reward, DiagnosticMonotoneAndFlattening) {
  for (double alpha : {0.5, 1.0, 2.0}) {
    for (std::size_t n = 2; n <= 20; ++n) {
      for (std::size_t i = 1; i < n; ++i) EXPECT_GT(diagnostic_reward(n, i, alpha), diagnostic_reward(n, i + 1, alpha));
    }
  }
  for (std::size_t n = 2; n <= 20; ++n) EXPECT_LT(diagnostic_reward(n, 1, 2.0), diagnostic_reward(n, 1, 0.5));
}

TEST(Reward, Consistency) {
  EXPECT_DOUBLE_EQ(consistency_reward(ExamQuality::kDifferentiates, 0.1), 0.1);
  EXPECT_DOUBLE_EQ(consistency_reward(ExamQuality::kNeutral, 0.1), 0.0);
  EXPECT_DOUBLE_EQ(consistency_reward(ExamQuality::kProblematic, 0.1), -0.1);
  EXPECT_EQ(parse_exam_quality("problematic"), ExamQuality::kProblematic);
}

TEST(Reward, ToolCallRules) {
  const auto rules = ToolRules::defaults();
  EXPECT_DOUBLE_EQ(toolcall_reward({"tool-ccRCC", "tool-Nuclear"}, {"Clear cell renal cell carcinoma (ccRCC)"}, rules, 0.1),
                   0.1);
  EXPECT_DOUBLE_EQ(toolcall_reward({}, {"Gastric adenocarcinoma"}, rules, 0.1), 0.0);
  EXPECT_DOUBLE_EQ(toolcall_reward({"tool-pRCC"}, {"Lymphoma"}, rules, 0.1), -0.1);
  EXPECT_DOUBLE_EQ(toolcall_reward({"tool-unknown"}, {"Lymphoma"}, rules, 0.1), -0.1);
  EXPECT_DOUBLE_EQ(toolcall_reward({"tool-Gleason"}, {"Prostate adenocarcinoma"}, rules, 0.1), 0.1);
  EXPECT_DOUBLE_EQ(toolcall_reward({}, {"Gastric adenocarcinoma"}, rules, 0.1, "lymphovascular invasion is described"), 0.0);
  EXPECT_DOUBLE_EQ(
      toolcall_reward({"tool-invasion"}, {"Gastric adenocarcinoma"}, rules, 0.1, "lymphovascular invasion is described"),
      0.1);
  const auto o = evaluate_tool_calls({"tool-ccRCC"}, {"ccRCC"}, rules, 0.1);
  EXPECT_EQ(o.missing, (std::vector<std::string>{"tool-Nuclear"}));
  EXPECT_TRUE(o.false_calls.empty());
}

TEST(Reward, ToolRulesJsonRoundTrip) {
  const auto rules = ToolRules::defaults();
  const auto back = ToolRules::from_json_text(rules.to_json_text());
  EXPECT_EQ(back.to_json_text(), rules.to_json_text());
  EXPECT_TRUE(back.known("tool-invasion"));
  EXPECT_FALSE(back.known("tool-x"));
  EXPECT_THROW(ToolRules::from_json_text("[1,2"), Error);
  TempDir dir;
  std::ofstream(dir.path() / "r.json") << rules.to_json_text();
  EXPECT_EQ(ToolRules::load(dir.path() / "r.json").to_json_text(), rules.to_json_text());
}

TEST(Reward, TotalExamples) {
  const RewardConfig cfg;
  const auto rules = ToolRules::defaults();
  const auto junk = parse_response("no tags");
  const auto f = total_reward(junk, JudgeVerdict{1, ExamQuality::kDifferentiates, false}, cfg, rules);
  EXPECT_DOUBLE_EQ(f.total, -1.0);
  EXPECT_EQ(f.n_f, 2);
  EXPECT_EQ(f.r_d, 0.0);

  const auto ok = parse_response(
      "<think>t</think><answer>\\DiffList{Clear cell renal cell carcinoma (ccRCC)}"
      "\\ToolCallList{tool-ccRCC, tool-Nuclear}</answer>");
  const auto good = total_reward(ok, JudgeVerdict{1, ExamQuality::kDifferentiates, false}, cfg, rules);
  EXPECT_NEAR(good.total, 1.2, 1e-12);

  const auto plain = parse_response("<think>t</think><answer>\\DiffList{Gastric adenocarcinoma}</answer>");
  const auto hack = total_reward(plain, JudgeVerdict{std::nullopt, ExamQuality::kNeutral, true}, cfg, rules);
  EXPECT_NEAR(hack.total, -0.3, 1e-12);
  EXPECT_TRUE(hack.hacking);
}

TEST(Reward, FormatBranchDominatesAndIsPure) {
  Rng rng(31);
  const RewardConfig cfg;
  const auto rules = ToolRules::defaults();
  for (int i = 0; i < 2000; ++i) {
    auto r = gen::well_formed(rng);
    r.tag_error = rng.below(2);
    r.presentation_error = !r.tag_error || rng.below(2);
    r.format_errors = int(r.tag_error) + int(r.presentation_error);
    const JudgeVerdict v{rng.below(2) ? std::optional<std::size_t>(1) : std::nullopt, ExamQuality::kDifferentiates,
                         bool(rng.below(2))};
    const auto base = total_reward(r, v, cfg, rules);
    EXPECT_DOUBLE_EQ(base.total, -cfg.format_penalty * r.format_errors);
    auto m = r;
    m.diff_list = gen::items(rng, 1);
    m.exam_list = gen::items(rng, 0);
    m.tool_list = {"tool-pRCC", "tool-x"};
    const auto mutated = total_reward(m, v, cfg, rules);
    EXPECT_EQ(0, std::memcmp(&base.total, &mutated.total, sizeof(double)));
    const auto again = total_reward(r, v, cfg, rules);
    EXPECT_EQ(0, std::memcmp(&base.total, &again.total, sizeof(double)));
  }
}

TEST(Reward, ConfigValidation) {
  RewardConfig cfg;
  cfg.alpha = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = RewardConfig{};
  cfg.hacking_penalty = -1;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Judge, SynonymMatch) {
  const auto t = JudgeTables::defaults();
  const auto v = rule_based_judge({"Clear cell renal cell carcinoma (ccRCC)", "Papillary renal cell carcinoma"}, "ccRCC", t);
  EXPECT_EQ(v.match_position, 1u);
  EXPECT_FALSE(v.hacking);
  const auto second = rule_based_judge({"Thymoma", "Thymic carcinoma"}, "thymic carcinoma", t);
  EXPECT_EQ(second.match_position, 2u);
  EXPECT_FALSE(rule_based_judge({"Thymoma"}, "Lymphoma", t).match_position);
}

TEST(Judge, Hacking) {
  const auto t = JudgeTables::defaults();
  EXPECT_TRUE(rule_based_judge({"Thymoma", "Thymoma"}, "Thymoma", t).hacking);
  EXPECT_TRUE(rule_based_judge({"Carcinoma"}, "Thymoma", t).hacking);
  EXPECT_TRUE(rule_based_judge({"Benign nodule", "Malignant melanoma"}, "Melanoma", t).hacking);
  EXPECT_FALSE(rule_based_judge({"Thymoma", "Thymic carcinoma"}, "Thymoma", t).hacking);
}

TEST(Judge, ExamQuality) {
  const auto t = JudgeTables::defaults();
  const std::vector<std::string> rcc{"Clear cell renal cell carcinoma", "Papillary renal cell carcinoma"};
  EXPECT_EQ(rule_based_judge(rcc, "x", t, {"IHC CD10", "CK7"}).exam_quality, ExamQuality::kDifferentiates);
  EXPECT_EQ(rule_based_judge(rcc, "x", t, {"PSA"}).exam_quality, ExamQuality::kProblematic);
  EXPECT_EQ(rule_based_judge(rcc, "x", t, {"repeat biopsy"}).exam_quality, ExamQuality::kNeutral);
  EXPECT_EQ(rule_based_judge(rcc, "x", t).exam_quality, ExamQuality::kNeutral);
}

TEST(Judge, NormalizerAndTables) {
  EXPECT_EQ(normalize_diagnosis("  Clear   Cell RCC. "), "clear cell rcc");
  const auto t = JudgeTables::defaults();
  const DiagnosisNormalizer n(t);
  EXPECT_TRUE(n.same("KIRC", "Clear cell renal cell carcinoma"));
  EXPECT_TRUE(n.same("Thymic carcinoma / thymoma", "Thymoma"));
  EXPECT_FALSE(n.same("Thymoma", "Lymphoma"));
  EXPECT_EQ(JudgeTables::from_json_text(t.to_json_text()).to_json_text(), t.to_json_text());
  RuleBasedJudge judge;
  EXPECT_EQ(judge.judge({{"GIST"}, {}, "Gastrointestinal stromal tumor"}).match_position, 1u);
}
