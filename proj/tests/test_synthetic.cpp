#include <gtest/gtest.h>

#include <set>

#include "dx/synthetic.hpp"

using namespace dx;

TEST(Synthetic, WorldIsDeterministic) {
  const auto recipes = fixture_slide_recipes();
  const auto a = make_world(recipes), b = make_world(recipes);
  ASSERT_EQ(a.corpus.total_records(), b.corpus.total_records());
  EXPECT_EQ(a.toolkits.names(), b.toolkits.names());
  const auto pa = a.corpus.fetch_patches("tcga-kirc-01", Level::k10x);
  const auto pb = b.corpus.fetch_patches("tcga-kirc-01", Level::k10x);
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i].embedding, pb[i].embedding);
  for (const auto& spec : default_toolkit_specs()) EXPECT_TRUE(a.toolkits.contains(spec.name)) << spec.name;
}

TEST(Synthetic, CasesCoverSubtypes) {
  const auto cases = make_synth_cases(9, 3);
  ASSERT_EQ(cases.size(), 9u);
  std::set<std::string> codes;
  for (const auto& c : cases) {
    codes.insert(c.truth_code);
    EXPECT_EQ(SynthCase::from_json(c.to_json()).to_json(), c.to_json());
    EXPECT_FALSE(c.candidates.empty());
  }
  EXPECT_EQ(codes.size(), 3u);
  EXPECT_EQ(recipes_for(cases).size(), 9u);
  EXPECT_EQ(subtype_name("ccRCC"), "Clear cell renal cell carcinoma");
}

TEST(Synthetic, SimulatedBackendsAnswerEveryRole) {
  const auto c = make_synth_cases(1, 5)[0];
  const auto set = simulated_backends(c);
  for (auto role : kAllRoles) {
    if (role == Role::kJudge) continue;
    EXPECT_TRUE(set.has(role)) << to_string(role);
  }
  BackendRequest r;
  r.role = Role::kExamOracle;
  r.metadata = {{"exams", {"IHC " + subtype_marker(c.truth_code)}}};
  const auto text = set.at(Role::kExamOracle).call(r).text;
  EXPECT_NE(text.find(subtype_marker(c.truth_code)), std::string::npos) << text;
}
