#include <gtest/gtest.h>

#include <httplib.h>

#include "dx/service.hpp"
#include "dx/synthetic.hpp"
#include "test_util.hpp"

using namespace dx;
using nlohmann::json;

namespace {

const EngineResources& resources() {
  static const SynthWorld w = make_world(fixture_slide_recipes());
  static const EngineResources r{&w.corpus, &w.toolkits, ToolRegistry::defaults()};
  return r;
}

json case_one_request(const std::string& id) {
  const std::filesystem::path dir = DX_FIXTURE_DIR "/worked_cases";
  const auto f = json::parse(read_text(dir / "case1.json"));
  return {{"session_id", id},
          {"case", {{"case_id", f["case_id"]}, {"case_info", f["case_info"]}, {"slide_id", f["slide_id"]}}},
          {"script", json::parse(read_text(dir / "scripts/case1.json"))}};
}

const json kAnswers = {{"PAX8", "Positive"}, {"CD10", "Positive"}, {"CK7", "Negative"}, {"CK20", "Negative"}};

}  // namespace

TEST(Service, DirectCallsFollowTheHumanPath) {
  TempDir logs;
  ServiceOptions o;
  o.resources = &resources();
  o.log_dir = logs.path();
  SessionService svc(o);
  auto [code, st] = svc.create(case_one_request("c1"));
  ASSERT_EQ(code, 201) << st.dump();
  EXPECT_TRUE(st["awaiting_evidence"].get<bool>());
  EXPECT_EQ(svc.create(case_one_request("c1")).first, 409);
  EXPECT_EQ(svc.submit("c1", {{"answers", json::object()}}).first, 400);
  EXPECT_EQ(svc.submit("c1", {{"answers", {{"PAX8", 1}}}}).first, 400);
  EXPECT_EQ(svc.lock("c1", "alice", true).first, 200);
  EXPECT_EQ(svc.submit("c1", {{"answers", kAnswers}, {"client", "bob"}}).first, 423);
  EXPECT_EQ(svc.lock("c1", "bob", true).first, 423);
  const auto [ok, fin] = svc.submit("c1", {{"answers", kAnswers}, {"client", "alice"}});
  ASSERT_EQ(ok, 200) << fin.dump();
  EXPECT_EQ(fin["final_diagnosis"], "Clear cell renal cell carcinoma (ccRCC), nuclear grade 3");
  EXPECT_EQ(svc.submit("c1", {{"answers", kAnswers}, {"client", "alice"}}).first, 409);
  EXPECT_EQ(svc.advance("c1").first, 409);
  EXPECT_EQ(svc.state("nope").first, 404);
  EXPECT_TRUE(std::filesystem::exists(logs.path() / "c1.jsonl"));
  const auto events = read_session_log(logs.path() / "c1.jsonl");
  EXPECT_EQ(events.back()["event"], "end");
  EXPECT_EQ(svc.create({{"case", {{"case_id", "x"}}}}).first, 400);
  EXPECT_EQ(svc.create({{"case", {{"case_info", "x"}}}}).first, 400);
}

TEST(Service, HttpEndpointsAuthAndSse) {
  ServiceOptions o;
  o.resources = &resources();
  o.token = "secret";
  SessionService svc(o);
  const int port = svc.start();
  httplib::Client cli("127.0.0.1", port);
  EXPECT_EQ(cli.Get("/v1/health")->status, 200);
  EXPECT_EQ(cli.Get("/v1/sessions")->status, 401);
  cli.set_bearer_token_auth("secret");

  auto created = cli.Post("/v1/sessions", case_one_request("h1").dump(), "application/json");
  ASSERT_EQ(created->status, 201) << created->body;
  EXPECT_EQ(cli.Post("/v1/sessions", "{not json", "application/json")->status, 400);
  const auto list = json::parse(cli.Get("/v1/sessions")->body);
  EXPECT_EQ(list["sessions"], json::array({"h1"}));
  EXPECT_EQ(cli.Get("/v1/sessions/zzz")->status, 404);

  // SSE replays from the start and ends when the session finishes.
  std::string stream;
  std::thread reader([&] {
    httplib::Client c2("127.0.0.1", port);
    c2.set_bearer_token_auth("secret");
    c2.set_read_timeout(10, 0);
    c2.Get("/v1/sessions/h1/events", [&](const char* data, std::size_t n) {
      stream.append(data, n);
      return true;
    });
  });
  auto sub = cli.Post("/v1/sessions/h1/exams", json{{"answers", kAnswers}}.dump(), "application/json");
  ASSERT_EQ(sub->status, 200) << sub->body;
  reader.join();
  EXPECT_NE(stream.find("id: 0\nevent: header\n"), std::string::npos);
  EXPECT_NE(stream.find("event: end\n"), std::string::npos);
  EXPECT_NE(stream.find("nuclear grade 3"), std::string::npos);

  // Resuming after the last seen id skips what was delivered.
  httplib::Headers h{{"Last-Event-ID", "0"}};
  std::string resumed;
  cli.Get("/v1/sessions/h1/events", h, [&](const char* data, std::size_t n) {
    resumed.append(data, n);
    return true;
  });
  EXPECT_EQ(resumed.find("id: 0\n"), std::string::npos);
  EXPECT_EQ(resumed.rfind("id: 1\n", 0), 0u);

  const auto log = cli.Get("/v1/sessions/h1/log");
  EXPECT_EQ(log->status, 200);
  EXPECT_NE(log->body.find("\"event\":\"end\""), std::string::npos);
  const auto st = json::parse(cli.Get("/v1/sessions/h1")->body);
  EXPECT_EQ(st["stage"], "Done");
  EXPECT_EQ(st["lock_holder"], nullptr);
  svc.stop();
}

TEST(Service, AdvanceUsesTheOracle) {
  ServiceOptions o;
  o.resources = &resources();
  SessionService svc(o);
  ASSERT_EQ(svc.create(case_one_request("a1")).first, 201);
  const auto [code, st] = svc.advance("a1");
  ASSERT_EQ(code, 200) << st.dump();
  EXPECT_EQ(st["stage"], "Done");
  EXPECT_EQ(svc.create({{"case", {{"case_info", "x"}}}, {"config", {{"bogus", 1}}}, {"script", {{"script", json::array()}}}}).first,
            400);
}
