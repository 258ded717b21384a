#include "dx/cli.hpp"

#include <CLI11.hpp>

#include <csignal>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>

#include "dx/config.hpp"
#include "dx/errors.hpp"
#include "dx/evaluation.hpp"
#include "dx/judge.hpp"
#include "dx/reward.hpp"
#include "dx/service.hpp"
#include "dx/synthetic.hpp"

namespace dx {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

inline constexpr int kCliSchemaVersion = 1;

json record(const std::string& kind, json body) {
  body["schema"] = "dx-cli/" + kind;
  body["version"] = kCliSchemaVersion;
  return body;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw NotFoundError("cannot open " + p.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

json read_json(const fs::path& p) {
  const auto text = read_file(p);
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
}

// Corpus and toolkits, either from disk or the built-in synthetic world.
struct World {
  std::optional<Corpus> corpus;
  std::optional<ToolkitLibrary> toolkits;
  EngineResources resources;
  bool synthetic = false;
};

std::unique_ptr<World> load_world(const EngineConfig& cfg, const std::vector<SlideRecipe>& extra = {}) {
  auto w = std::make_unique<World>();
  if (cfg.corpus) {
    if (!cfg.toolkits) throw ConfigError("a corpus needs a toolkit directory (--toolkits or engine.toolkits)");
    w->corpus = ingest_corpus(*cfg.corpus);
    w->toolkits = ToolkitLibrary::load(*cfg.toolkits);
  } else {
    auto recipes = fixture_slide_recipes();
    recipes.insert(recipes.end(), extra.begin(), extra.end());
    auto world = make_world(recipes);
    w->corpus = std::move(world.corpus);
    w->toolkits = std::move(world.toolkits);
    w->synthetic = true;
  }
  w->resources.corpus = &*w->corpus;
  w->resources.toolkits = &*w->toolkits;
  return w;
}

std::vector<SlideRecipe> simulation_recipes(const std::vector<CaseFixture>& fixtures) {
  std::vector<SynthCase> cases;
  for (const auto& f : fixtures) {
    if (f.simulation) cases.push_back(*f.simulation);
  }
  return recipes_for(cases);
}

std::map<std::string, std::string> read_answers(std::istream& in, std::ostream& out,
                                                const std::vector<std::string>& pending) {
  out << "pending examinations:\n";
  for (const auto& e : pending) out << "  ? " << e << "\n";
  out << "enter 'name: result' lines, blank line to submit\n";
  std::map<std::string, std::string> answers;
  for (std::string line; std::getline(in, line);) {
    line = trim(line);
    if (line.empty()) break;
    const auto colon = line.find(':');
    if (colon == std::string::npos) {
      out << "  ignored (no colon): " << line << "\n";
      continue;
    }
    answers[trim(line.substr(0, colon))] = trim(line.substr(colon + 1));
  }
  return answers;
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err, std::istream& in) {
  CLI::App app{"Evidence-seeking diagnostic engine over patch-embedding corpora", "engine"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  bool as_json = false;
  std::optional<std::string> embeddings, toolkits_dir, profile;
  std::optional<std::size_t> parallelism, max_rounds;
  std::optional<std::uint64_t> seed;
  app.add_option("--config", config_path, "INI config file");
  app.add_flag("--json", as_json, "Emit schema-versioned JSON records");
  app.add_option("--embeddings", embeddings, "Embedding corpus directory (overrides engine.corpus)");
  app.add_option("--toolkits", toolkits_dir, "Toolkit directory (overrides engine.toolkits)");
  app.add_option("--profile", profile, "test | live");
  app.add_option("--parallelism", parallelism, "Concurrent sessions in eval/ablate");
  app.add_option("--max-rounds", max_rounds, "Evidence rounds per session");
  app.add_option("--seed", seed, "Session seed");

  // ingest
  auto* ingest = app.add_subcommand("ingest", "Validate and summarize an embedding corpus");
  std::string ingest_dir;
  bool check = false;
  ingest->add_option("--corpus", ingest_dir, "Corpus directory")->required();
  ingest->add_flag("--check", check, "Validate only");

  // toolkit
  auto* toolkit = app.add_subcommand("toolkit", "Build or inspect prototype toolkits");
  toolkit->require_subcommand(1);
  auto* tk_build = toolkit->add_subcommand("build", "Build a toolkit from a recipe");
  std::string recipe, tk_corpus, tk_out;
  tk_build->add_option("--recipe", recipe, "Recipe JSON")->required();
  tk_build->add_option("--corpus", tk_corpus, "Corpus holding the support patches")->required();
  tk_build->add_option("--out", tk_out, "Output directory")->required();
  auto* tk_inspect = toolkit->add_subcommand("inspect", "Describe a toolkit file");
  std::string tk_file;
  tk_inspect->add_option("--toolkit", tk_file, "Toolkit JSON")->required();

  // highlight
  auto* highlight = app.add_subcommand("highlight", "Screen one slide and print the selected RoIs");
  std::string hl_slide, hl_toolkit = "pan-cancer", hl_plan = "pan-8";
  highlight->add_option("--slide", hl_slide, "Slide id")->required();
  highlight->add_option("--toolkit", hl_toolkit, "Toolkit name");
  highlight->add_option("--plan", hl_plan, "Selection plan name or spec");

  // run
  auto* run = app.add_subcommand("run", "Run one diagnostic session");
  std::string case_file, run_slide, mode = "oracle", script_file, log_file, run_protocol_name;
  run->add_option("--case", case_file, "Case JSON")->required();
  run->add_option("--slide", run_slide, "Slide id (overrides the case)");
  run->add_option("--mode", mode, "interactive | oracle")->check(CLI::IsMember({"interactive", "oracle"}));
  run->add_option("--script", script_file, "Scripted backend JSON (overrides the case)");
  run->add_option("--log", log_file, "Write the session log here");
  run->add_option("--protocol", run_protocol_name, "op | es")->check(CLI::IsMember({"op", "es"}));

  // score
  auto* score = app.add_subcommand("score", "Score one reasoner reply against a truth");
  std::string transcript, truth_file, context_file, rules_file, tables_file;
  std::optional<double> alpha;
  score->add_option("--transcript", transcript, "Raw reasoner reply")->required();
  score->add_option("--truth", truth_file, "File holding the ground-truth diagnosis")->required();
  score->add_option("--alpha", alpha, "Rank temperature");
  score->add_option("--context", context_file, "Case text used by the tool rules");
  score->add_option("--tool-rules", rules_file, "Tool rules JSON");
  score->add_option("--judge-tables", tables_file, "Judge tables JSON");

  // eval
  auto* eval = app.add_subcommand("eval", "Run a fixture corpus and report metrics");
  std::string eval_dir, eval_protocol = "es", report_path, transcripts_dir;
  eval->add_option("--corpus", eval_dir, "Fixture directory")->required();
  eval->add_option("--protocol", eval_protocol, "op | es")->check(CLI::IsMember({"op", "es"}));
  eval->add_option("--report", report_path, "Write the JSON report here");
  eval->add_option("--transcripts", transcripts_dir, "Write session logs here");

  // ablate
  auto* ablate = app.add_subcommand("ablate", "Run an ablation grid");
  std::string axis, grid, ablate_dir, ablate_report;
  std::size_t synth_cases = 10;
  std::uint64_t synth_seed = 11;
  ablate->add_option("--axis", axis, "evidence_sources | roi_plan | icl_count")->required();
  ablate->add_option("--grid", grid, "Grid cells, e.g. FF,TF,FT,TT")->required();
  ablate->add_option("--corpus", ablate_dir, "Fixture directory (default: synthetic cases)");
  ablate->add_option("--cases", synth_cases, "Synthetic case count");
  ablate->add_option("--synth-seed", synth_seed, "Synthetic corpus seed");
  ablate->add_option("--report", ablate_report, "Write the JSON report here");

  // serve
  auto* serve = app.add_subcommand("serve", "Serve the session API over HTTP");
  std::string host = "127.0.0.1", log_dir;
  int port = 8080;
  serve->add_option("--host", host, "Bind address");
  serve->add_option("--port", port, "Port");
  serve->add_option("--log-dir", log_dir, "Session log directory");

  // synth
  auto* synth = app.add_subcommand("synth", "Write a synthetic corpus, toolkits and fixtures");
  std::string synth_out;
  std::size_t synth_n = 10;
  std::uint64_t synth_world_seed = 11;
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--cases", synth_n, "Case count");
  synth->add_option("--synth-seed", synth_world_seed, "Generator seed");

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "engine: " << e.what() << "\n" << app.help();
    return kExitUsage;
  }

  try {
    EngineConfig cfg;
    if (!config_path.empty()) cfg.apply_ini(config_path);
    cfg.apply_process_env();
    if (embeddings) cfg.corpus = *embeddings;
    if (toolkits_dir) cfg.toolkits = *toolkits_dir;
    if (profile) cfg.profile = *profile;
    if (parallelism) cfg.parallelism = std::max<std::size_t>(1, *parallelism);
    if (max_rounds) cfg.session.max_rounds = *max_rounds;
    if (seed) cfg.session.seed = *seed;
    if (alpha) cfg.reward.alpha = *alpha;
    cfg.validate();

    if (*ingest) {
      const auto corpus = ingest_corpus(ingest_dir);
      json slides = json::array();
      for (const auto& m : corpus.slides()) {
        json levels = json::object();
        for (const auto& [lv, info] : m.levels) levels[std::string(to_string(lv))] = info.count;
        slides.push_back({{"slide_id", m.slide_id}, {"levels", levels}, {"provenance", m.provenance}});
      }
      if (as_json) {
        out << record("ingest", {{"dimension", corpus.dimension()},
                                 {"total_records", corpus.total_records()},
                                 {"slides", slides},
                                 {"valid", true}})
                   .dump()
            << "\n";
      } else {
        out << "corpus ok: " << corpus.slides().size() << " slides, d=" << corpus.dimension() << ", "
            << corpus.total_records() << " records\n";
        if (!check) {
          for (const auto& s : slides) out << "  " << s["slide_id"].get<std::string>() << " " << s["levels"].dump() << "\n";
        }
      }
      return kExitOk;
    }

    if (*tk_build) {
      const auto corpus = ingest_corpus(tk_corpus);
      const auto tk = build_toolkit(recipe, corpus, cfg.session.seed);
      save_toolkit(tk, tk_out);
      if (as_json) {
        out << record("toolkit", {{"name", tk.name}, {"prototypes", tk.prototypes.size()}, {"out", tk_out}}).dump()
            << "\n";
      } else {
        out << "built " << tk.name << " with " << tk.prototypes.size() << " prototypes -> " << tk_out << "\n";
      }
      return kExitOk;
    }

    if (*tk_inspect) {
      const auto tk = load_toolkit(tk_file);
      json protos = json::array();
      for (const auto& p : tk.prototypes) {
        protos.push_back({{"description", p.description}, {"category", p.category}, {"level", to_string(p.level)},
                          {"support", p.support_ids.size()}});
      }
      if (as_json) {
        out << record("toolkit", {{"name", tk.name},
                                  {"mode", to_string(tk.mode)},
                                  {"dimension", tk.dimension()},
                                  {"highlight", tk.highlight_set},
                                  {"prototypes", protos}})
                   .dump()
            << "\n";
      } else {
        out << tk.name << " (" << to_string(tk.mode) << ", d=" << tk.dimension() << ")\n";
        for (const auto& p : protos) {
          out << "  " << p["description"].get<std::string>() << " @" << p["level"].get<std::string>() << " support "
              << p["support"].get<std::size_t>() << "\n";
        }
      }
      return kExitOk;
    }

    if (*highlight) {
      const auto world = load_world(cfg);
      const auto& tk = world->toolkits->get(hl_toolkit);
      Rng rng(cfg.session.seed);
      const auto result = highlight_slide(*world->corpus, hl_slide, tk, parse_plan(hl_plan), rng);
      json rois = json::array();
      for (const auto& e : result.selection.entries) {
        rois.push_back({{"ref", e.ref}, {"level", to_string(e.level)}, {"score", e.score},
                        {"provenance", to_string(e.provenance)}, {"description", e.description}});
      }
      if (as_json) {
        out << record("highlight", {{"slide", hl_slide}, {"plan", result.selection.plan_name}, {"rois", rois}}).dump()
            << "\n";
      } else {
        for (const auto& r : rois) {
          out << r["ref"].get<std::string>() << "  " << r["provenance"].get<std::string>() << "  "
              << r["score"].get<double>() << "\n";
        }
      }
      return kExitOk;
    }

    if (*run) {
      const fs::path cpath = case_file;
      json cj = read_json(cpath);
      if (!cj.contains("truth")) cj["truth"] = "";
      if (!cj.contains("case_id")) cj["case_id"] = cpath.stem().string();
      if (!script_file.empty()) cj["script"] = fs::absolute(script_file).string();
      if (!cj.contains("script") && !cj.contains("simulation")) cj["live"] = true;
      auto fixture = CaseFixture::from_json(cj, cpath.parent_path());
      if (!run_slide.empty()) fixture.slide_id = run_slide;

      BackendSet backends;
      if (fixture.script) {
        backends = BackendSet::scripted(std::make_shared<MockScript>(MockScript::from_json(*fixture.script)));
      } else if (fixture.simulation) {
        backends = simulated_backends(*fixture.simulation);
      } else {
        if (cfg.urls.empty()) throw ConfigError("no script in the case and no backend endpoints configured");
        backends = BackendSet::http(cfg.endpoints());
      }
      std::vector<SlideRecipe> extra;
      if (fixture.simulation) extra = recipes_for({*fixture.simulation});
      const auto world = load_world(cfg, extra);
      SessionConfig scfg = cfg.session;
      scfg.protocol = run_protocol_name.empty() ? fixture.protocol : parse_protocol(run_protocol_name);

      Session s(fixture.case_id, CaseInput{fixture.case_id, fixture.case_info, fixture.slide_id}, scfg,
                world->resources, std::move(backends));
      s.start();
      while (!s.finished()) {
        std::map<std::string, std::string> answers;
        if (mode == "interactive" && !s.pending_exams().empty()) {
          answers = read_answers(in, err, s.pending_exams());
        } else if (mode == "oracle" && s.rounds() == 0) {
          answers = fixture.human_exams;
        }
        s.execute(answers);
        if (!s.finished()) s.conclude();
      }
      if (!log_file.empty()) {
        std::ofstream lf(log_file, std::ios::binary | std::ios::trunc);
        lf << s.log_text();
      }
      if (as_json) {
        out << record("run", {{"session", s.state_json()}}).dump(-1, ' ', false, json::error_handler_t::replace) << "\n";
      } else {
        std::string trace;
        for (const auto& t : s.stage_trace()) trace += (trace.empty() ? "" : " -> ") + t;
        out << "stages: " << trace << "\n";
        if (s.final_diagnosis()) out << "final: " << *s.final_diagnosis() << "\n";
        if (s.inconclusive()) {
          std::string d;
          for (const auto& x : s.differential()) d += (d.empty() ? "" : ", ") + x;
          out << "inconclusive; differential: " << d << "\n";
        }
        if (s.stage() == Stage::kAborted) out << "aborted: " << s.abort_cause() << "\n";
      }
      return s.stage() == Stage::kAborted ? kExitDomain : kExitOk;
    }

    if (*score) {
      const auto raw = read_file(transcript);
      const auto truth = trim(read_file(truth_file));
      const auto tables = tables_file.empty() ? JudgeTables::defaults() : JudgeTables::load(tables_file);
      const auto rules = rules_file.empty() ? ToolRules::defaults() : ToolRules::load(rules_file);
      const auto context = context_file.empty() ? std::string() : read_file(context_file);
      const auto parsed = parse_response(raw);
      const auto verdict = rule_based_judge(parsed.diagnoses(), truth, tables, parsed.exam_list);
      const auto b = total_reward(parsed, verdict, cfg.reward, rules, context);
      if (as_json) {
        out << record("score", {{"r_d", b.r_d},
                                {"r_e", b.r_e},
                                {"r_t", b.r_t},
                                {"hacking", b.hacking},
                                {"n_f", b.n_f},
                                {"total", b.total},
                                {"alpha", cfg.reward.alpha},
                                {"match_position", verdict.match_position ? json(*verdict.match_position) : json(nullptr)},
                                {"exam_quality", to_string(verdict.exam_quality)}})
                   .dump()
            << "\n";
      } else {
        out << "n_f      " << b.n_f << "\n"
            << "hacking  " << (b.hacking ? "yes" : "no") << "\n"
            << "R_d      " << b.r_d << "\n"
            << "R_e      " << b.r_e << "\n"
            << "R_t      " << b.r_t << "\n"
            << "total    " << b.total << "\n";
      }
      return kExitOk;
    }

    if (*eval || *ablate) {
      std::vector<CaseFixture> fixtures;
      const std::string dir = *eval ? eval_dir : ablate_dir;
      if (!dir.empty()) {
        fixtures = load_fixtures(dir);
      } else {
        fixtures = synth_fixtures(make_synth_cases(synth_cases, synth_seed));
      }
      const auto world = load_world(cfg, simulation_recipes(fixtures));
      RunOptions opts;
      opts.session = cfg.session;
      opts.resources = &world->resources;
      opts.parallelism = cfg.parallelism;
      if (!cfg.urls.empty()) opts.live = BackendSet::http(cfg.endpoints());

      if (*eval) {
        if (!transcripts_dir.empty()) opts.transcript_dir = fs::path(transcripts_dir);
        const auto results = run_protocol(fixtures, parse_protocol(eval_protocol), opts);
        const auto metrics = compute_metrics(fixtures, results);
        json cases = json::array();
        for (const auto& r : results) {
          cases.push_back({{"case_id", r.case_id}, {"ok", r.ok}, {"error", r.error}, {"stage_trace", r.stage_trace},
                           {"prediction", r.prediction()}, {"inconclusive", r.inconclusive}});
        }
        json report = record("eval", {{"protocol", eval_protocol}, {"metrics", metrics.to_json()}, {"cases", cases}});
        if (!report_path.empty()) {
          std::ofstream rf(report_path);
          rf << report.dump(2) << "\n";
        }
        if (as_json) {
          out << report.dump() << "\n";
        } else {
          out << metrics_table(metrics);
          for (const auto& id : metrics.failed) out << "failed: " << id << "\n";
        }
        return kExitOk;
      }

      const auto report = run_ablation(parse_axis(axis), grid, fixtures, opts);
      const json rj = record("ablation", report.to_json());
      if (!ablate_report.empty()) {
        std::ofstream rf(ablate_report);
        rf << rj.dump(2) << "\n";
      }
      if (as_json) out << rj.dump() << "\n";
      else out << report.to_text();
      return kExitOk;
    }

    if (*serve) {
      const auto world = load_world(cfg);
      ServiceOptions so;
      so.session = cfg.session;
      so.resources = &world->resources;
      so.token = cfg.token;
      if (!cfg.urls.empty()) so.live = BackendSet::http(cfg.endpoints());
      if (!log_dir.empty()) so.log_dir = fs::path(log_dir);
      SessionService service(std::move(so));
      err << "serving on " << host << ":" << port << "\n";
      service.listen(host, port);
      return kExitOk;
    }

    if (*synth) {
      const auto cases = make_synth_cases(synth_n, synth_world_seed);
      auto recipes = recipes_for(cases);
      const auto world = make_world(recipes);
      const fs::path root = synth_out;
      world.corpus.write(root / "corpus");
      for (const auto& name : world.toolkits.names()) save_toolkit(world.toolkits.get(name), root / "toolkits");
      fs::create_directories(root / "fixtures");
      for (const auto& f : synth_fixtures(cases)) {
        std::ofstream(root / "fixtures" / (f.case_id + ".json")) << f.to_json().dump(2) << "\n";
      }
      if (as_json) {
        out << record("synth", {{"out", root.string()}, {"cases", cases.size()}}).dump() << "\n";
      } else {
        out << "wrote " << cases.size() << " cases, corpus and toolkits under " << root.string() << "\n";
      }
      return kExitOk;
    }
  } catch (const Error& e) {
    err << "engine: " << e.what() << "\n";
    return kExitDomain;
  } catch (const std::exception& e) {
    err << "engine: " << e.what() << "\n";
    return kExitDomain;
  }
  return kExitUsage;
}

}  // namespace dx
