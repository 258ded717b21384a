#include <gtest/gtest.h>

#include <memory>

#include "dx/errors.hpp"
#include "dx/evaluation.hpp"
#include "dx/synthetic.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace dx;
using nlohmann::json;

namespace {

std::vector<std::string> labels(const std::vector<std::size_t>& codes, const std::vector<std::string>& names) {
  std::vector<std::string> out;
  for (auto c : codes) out.push_back(names[c]);
  return out;
}

struct SynthBench {
  std::vector<CaseFixture> fixtures;
  SynthWorld world;
  EngineResources res;
};

const SynthBench& bench() {
  static const auto b = [] {
    const auto cases = make_synth_cases(10, 11);
    auto out = std::make_unique<SynthBench>(SynthBench{synth_fixtures(cases), make_world(recipes_for(cases)), {}});
    out->res.corpus = &out->world.corpus;
    out->res.toolkits = &out->world.toolkits;
    return out;
  }();
  return *b;
}

}  // namespace

TEST(Metrics, BalancedAccuracyExamples) {
  const std::vector<std::string> classes{"a", "b", "c"};
  const auto r = balanced_accuracy({"a", "a", "b", "a", "a"}, {"a", "b", "b", "c", "c"}, classes);
  EXPECT_DOUBLE_EQ(r.value, 0.5);
  EXPECT_DOUBLE_EQ(r.recalls.at("a"), 1.0);
  EXPECT_DOUBLE_EQ(r.recalls.at("b"), 0.5);
  EXPECT_DOUBLE_EQ(r.recalls.at("c"), 0.0);
  EXPECT_DOUBLE_EQ(balanced_accuracy({"a", "b"}, {"a", "b"}, classes).value, 1.0);
  EXPECT_EQ(balanced_accuracy({"a", "b"}, {"a", "b"}, classes).excluded, (std::vector<std::string>{"c"}));
  EXPECT_THROW(balanced_accuracy({}, {}, classes), EmptyEvalError);
  EXPECT_THROW(balanced_accuracy({"a"}, {"z"}, classes), ContractError);
  EXPECT_THROW(balanced_accuracy({"a"}, {"a", "b"}, classes), ContractError);
}

TEST(Metrics, MatchConfusionMatrixOracle) {
  Rng rng(51);
  const std::vector<std::string> names{"ccRCC", "chRCC", "pRCC", "other"};
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng.below(200), k = 2 + rng.below(3);
    std::vector<std::size_t> truth(n), pred(n);
    oracle::Confusion cm(names.size());
    for (std::size_t i = 0; i < n; ++i) {
      truth[i] = rng.below(k);
      pred[i] = rng.below(names.size());
      cm.add(truth[i], pred[i]);
    }
    const std::vector<std::string> classes(names.begin(), names.begin() + static_cast<long>(k));
    EXPECT_EQ(balanced_accuracy(labels(pred, names), labels(truth, names), classes).value, cm.balanced_accuracy());
    EXPECT_EQ(accuracy(labels(pred, names), labels(truth, names)), cm.accuracy());

    std::vector<bool> bp(n), bt(n);
    for (std::size_t i = 0; i < n; ++i) {
      bp[i] = rng.below(2);
      bt[i] = rng.below(2);
    }
    const auto o = oracle::binary(bp, bt);
    const auto m = invasion_prf(bp, bt);
    EXPECT_EQ(m.precision, o.p);
    EXPECT_EQ(m.recall, o.r);
    EXPECT_EQ(m.f1, o.f1);
  }
}

TEST(Metrics, BalancedCorporaGiveEqualBaccAndAcc) {
  Rng rng(52);
  const std::vector<std::string> names{"x", "y", "z"};
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t per = 1 + rng.below(20);
    std::vector<std::size_t> truth, pred;
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t i = 0; i < per; ++i) {
        truth.push_back(c);
        pred.push_back(rng.below(3));
      }
    }
    const auto t = labels(truth, names), p = labels(pred, names);
    EXPECT_NEAR(balanced_accuracy(p, t, names).value, accuracy(p, t), 1e-12);
  }
}

TEST(Metrics, InvasionExamples) {
  const auto m = invasion_prf({true, true, true, true, false, false}, {true, true, true, false, true, false});
  EXPECT_DOUBLE_EQ(m.precision, 0.75);
  EXPECT_DOUBLE_EQ(m.recall, 0.75);
  EXPECT_DOUBLE_EQ(m.f1, 0.75);
  const auto perfect = invasion_prf({true, false}, {true, false});
  EXPECT_DOUBLE_EQ(perfect.f1, 1.0);
  const auto none = invasion_prf({false, false}, {true, false});
  EXPECT_TRUE(none.precision_undefined);
  EXPECT_EQ(none.precision, 0.0);
  EXPECT_EQ(none.f1, 0.0);
  EXPECT_THROW(invasion_prf({}, {}), EmptyEvalError);
}

TEST(Metrics, GleasonAndGrades) {
  EXPECT_EQ(gleason_accuracy({3, 4}, {3, 4}), std::make_pair(true, true));
  EXPECT_EQ(gleason_accuracy({4, 3}, {3, 4}), std::make_pair(false, false));
  EXPECT_EQ(gleason_accuracy({3, 3}, {3, 4}), std::make_pair(true, false));
  EXPECT_THROW(gleason_accuracy({2, 3}, {3, 4}), ContractError);
  EXPECT_EQ(grade_band(2), 0);
  EXPECT_EQ(grade_band(3), 1);
  EXPECT_THROW(grade_band(5), ContractError);
}

TEST(Metrics, Pemr) {
  const std::vector<std::string> pats{"nuclear grade"};
  const auto r = pemr({{"Nuclear Grade is high"}, {"nothing"}, {"x", "nuclear grade"}, {}}, pats);
  EXPECT_DOUBLE_EQ(r.rate, 0.5);
  EXPECT_EQ(r.mentioning, 2u);
  EXPECT_EQ(pemr({}, pats).rate, 0.0);
  EXPECT_THROW(pemr({{"x"}}, {}), ContractError);
}

TEST(Harness, WorkedFixturesRunAndReport) {
  const auto world = make_world(fixture_slide_recipes());
  EngineResources res;
  res.corpus = &world.corpus;
  res.toolkits = &world.toolkits;
  const auto fixtures = load_fixtures(DX_FIXTURE_DIR "/worked_cases");
  ASSERT_EQ(fixtures.size(), 3u);
  TempDir dir;
  RunOptions opts;
  opts.resources = &res;
  opts.transcript_dir = dir.path();
  const auto results = run_protocol(fixtures, Protocol::kEvidenceSeeking, opts);
  for (const auto& r : results) {
    EXPECT_TRUE(r.ok) << r.case_id << ": " << r.error;
    EXPECT_TRUE(std::filesystem::exists(dir.path() / (r.case_id + ".jsonl")));
  }
  EXPECT_EQ(results[0].predicted_grade(), 3);
  EXPECT_EQ(results[1].predicted_invasion(), true);
  const auto m = compute_metrics(fixtures, results);
  EXPECT_DOUBLE_EQ(m.final_bacc.value, 1.0);
  EXPECT_DOUBLE_EQ(m.final_acc, 1.0);
  EXPECT_GE(m.ddx_length, 1.0);
  EXPECT_TRUE(m.failed.empty());
  ASSERT_TRUE(m.grade_band_acc);
  EXPECT_DOUBLE_EQ(*m.grade_band_acc, 1.0);
  // The case-1 plan calls tool-Nuclear before any evidence arrives.
  const auto nuclear = pemr({results[0].pre_evidence_text}, default_pemr_patterns().at("nuclear"));
  EXPECT_EQ(nuclear.mentioning, 1u);
  // Final BAcc agrees with the metric applied to the extracted boxed strings.
  const DiagnosisNormalizer norm(JudgeTables::defaults());
  std::vector<std::string> preds, truths;
  for (std::size_t i = 0; i < 3; ++i) {
    preds.push_back(classify(results[i].prediction(), m.classes, norm));
    truths.push_back(classify(fixtures[i].truth, m.classes, norm));
  }
  EXPECT_EQ(balanced_accuracy(preds, truths, m.classes).value, m.final_bacc.value);
}

TEST(Harness, OnePassAndFailuresAreRecorded) {
  CaseFixture op;
  op.case_id = "op-1";
  op.case_info = "x";
  op.truth = "Thymoma";
  op.protocol = Protocol::kOnePass;
  op.script = json{{"script",
                    {{{"role", "reasoner"}, {"response", "<think>t</think><answer>\\boxed{Thymoma}</answer>"}}}}};
  CaseFixture broken = op;
  broken.case_id = "broken";
  broken.script = json{{"script", json::array()}};
  const auto world = make_world(fixture_slide_recipes());
  EngineResources res{&world.corpus, &world.toolkits, ToolRegistry::defaults()};
  RunOptions opts;
  opts.resources = &res;
  const auto results = run_protocol({op, broken}, Protocol::kOnePass, opts);
  EXPECT_TRUE(results[0].ok);
  EXPECT_EQ(results[0].reasoner_turns, 1u);
  EXPECT_FALSE(results[1].ok);
  const auto m = compute_metrics({op, broken}, results);
  EXPECT_EQ(m.failed, (std::vector<std::string>{"broken"}));
}

TEST(Harness, FixtureValidation) {
  EXPECT_THROW(CaseFixture::from_json({{"case_id", "x"}, {"case_info", "y"}, {"truth", "z"}}), Error);
  EXPECT_THROW(CaseFixture::from_json({{"case_id", "x"},
                                       {"case_info", "y"},
                                       {"truth", "z"},
                                       {"nuclear_grade", 7},
                                       {"script", {{"script", json::array()}}}}),
               Error);
  const auto cases = make_synth_cases(3, 1);
  const auto f = synth_fixtures(cases);
  const auto back = CaseFixture::from_json(f[0].to_json());
  EXPECT_EQ(back.to_json(), f[0].to_json());
}

TEST(Ablation, GridsExpand) {
  const SessionConfig base;
  const auto es = expand_grid(AblationAxis::kEvidenceSources, "FF,TF,FT,TT", base);
  ASSERT_EQ(es.size(), 4u);
  EXPECT_FALSE(es[0].config.allow_tools);
  EXPECT_FALSE(es[0].config.allow_exams);
  EXPECT_TRUE(es[1].config.allow_tools);
  EXPECT_FALSE(es[1].config.allow_exams);
  EXPECT_EQ(expand_grid(AblationAxis::kRoiPlan, "1,3,6", base).size(), 3u);
  EXPECT_EQ(expand_grid(AblationAxis::kIclCount, "0,1,5,10", base)[3].config.icl_count, 10u);
  EXPECT_THROW(expand_grid(AblationAxis::kEvidenceSources, "TX", base), ConfigError);
  EXPECT_THROW(expand_grid(AblationAxis::kIclCount, "", base), ConfigError);
  EXPECT_THROW(parse_axis("colour"), ConfigError);
}

TEST(Ablation, EvidenceSourcesOnSyntheticCorpusIsDeterministic) {
  const auto& b = bench();
  RunOptions opts;
  opts.resources = &b.res;
  const auto a = run_ablation(AblationAxis::kEvidenceSources, "FF,TF,FT,TT", b.fixtures, opts);
  ASSERT_EQ(a.rows.size(), 4u);
  for (const auto& row : a.rows) {
    EXPECT_EQ(row.metrics.cases, 10u);
    EXPECT_TRUE(row.metrics.failed.empty());
    EXPECT_GE(row.metrics.final_bacc.value, 0.0);
    EXPECT_LE(row.metrics.final_bacc.value, 1.0);
  }
  // Both evidence sources together beat no evidence on the simulated corpus.
  EXPECT_GT(a.rows[3].metrics.final_bacc.value, a.rows[0].metrics.final_bacc.value);
  const auto again = run_ablation(AblationAxis::kEvidenceSources, "FF,TF,FT,TT", b.fixtures, opts);
  EXPECT_EQ(a.to_json().dump(), again.to_json().dump());
  const auto text = a.to_text();
  EXPECT_NE(text.find("Further Look"), std::string::npos);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 6);
}

TEST(Ablation, TableFormatting) {
  const auto t = format_table({"a", "bb"}, {{"1", "2"}, {"333", "4"}});
  EXPECT_EQ(t, "a   | bb\n----+---\n1   | 2\n333 | 4\n");
}
