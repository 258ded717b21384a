// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dx/evaluation.hpp"
#include "dx/highlighter.hpp"
#include "dx/kernels.hpp"
#include "dx/protocol.hpp"
#include "dx/random.hpp"
#include "dx/response_parser.hpp"
#include "dx/reward.hpp"
#include "dx/synthetic.hpp"
#include "generators.hpp"
#include "oracles.hpp"
#include "replay.hpp"
#include "test_util.hpp"

using namespace dx;
using nlohmann::json;

namespace {

struct Check {
  bool ok = true;
  std::ostringstream detail;

  void expect(bool cond, const std::string& what) {
    if (!cond && ok) detail << what << "; ";
    ok = ok && cond;
  }
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::vector<std::vector<float>> random_rows(Rng& rng, std::size_t n, std::size_t d) {
  std::vector<std::vector<float>> out(n, std::vector<float>(d));
  for (auto& r : out) {
    for (auto& v : r) v = static_cast<float>(rng.normal());
  }
  return out;
}

Toolkit make_toolkit(const std::vector<std::vector<float>>& vecs, ToolkitMode mode, std::size_t n_highlight) {
  Toolkit tk;
  tk.name = "acc";
  tk.mode = mode;
  for (std::size_t i = 0; i < vecs.size(); ++i) {
    tk.prototypes.push_back({"p" + std::to_string(i), Level::k10x, vecs[i], {"r" + std::to_string(i)},
                             "c" + std::to_string(i)});
  }
  for (std::size_t i = 0; i < n_highlight && i < vecs.size(); ++i) tk.highlight_set.push_back("p" + std::to_string(i));
  return tk;
}

std::vector<PatchRecord> to_records(const std::vector<std::vector<float>>& rows) {
  std::vector<PatchRecord> out;
  out.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) out.push_back({"s", static_cast<std::int32_t>(i), 0, Level::k10x, rows[i]});
  return out;
}

const std::filesystem::path kWorked = DX_FIXTURE_DIR "/worked_cases";

// 1: ranked diagnostic reward, totals, format-branch dominance.
void reward(Check& c) {
  double worst = 0;
  for (double alpha : {0.5, 2.0}) {
    for (std::size_t n = 1; n <= 64; ++n) {
      const auto w = rank_weights(n, alpha);
      const long double sum = std::accumulate(w.begin(), w.end(), 0.0L);
      worst = std::max(worst, static_cast<double>(std::abs(sum - 1.0L)));
    }
  }
  c.expect(worst <= 1e-12, "rank weight sum off by " + std::to_string(worst));
  c.expect(std::abs(diagnostic_reward(3, 1, 0.5) - 0.8668133321973347) <= 1e-9, "R_d(3,1,0.5)");
  c.expect(std::abs(diagnostic_reward(3, 2, 2.0) - 0.3071958857184984) <= 1e-9, "R_d(3,2,2)");
  c.expect(diagnostic_reward(1, 1, 0.5) == 1.0 && diagnostic_reward(1, 1, 2.0) == 1.0, "R_d(1,1)");

  const RewardConfig cfg;
  const auto rules = ToolRules::defaults();
  const auto good = total_reward(parse_response("<think>t</think><answer>\\DiffList{Clear cell renal cell carcinoma "
                                                "(ccRCC)}\\ToolCallList{tool-ccRCC, tool-Nuclear}</answer>"),
                                 JudgeVerdict{1, ExamQuality::kDifferentiates, false}, cfg, rules);
  c.expect(std::abs(good.total - 1.2) <= 1e-9, "total 1.2 example");
  const auto hack = total_reward(parse_response("<think>t</think><answer>\\DiffList{Gastric adenocarcinoma}</answer>"),
                                 JudgeVerdict{std::nullopt, ExamQuality::kNeutral, true}, cfg, rules);
  c.expect(std::abs(hack.total + 0.3) <= 1e-9, "total -0.3 example");

  Rng rng(101);
  std::size_t bad = 0;
  for (int i = 0; i < 10000; ++i) {
    auto r = gen::well_formed(rng);
    r.tag_error = rng.below(2);
    r.presentation_error = !r.tag_error || rng.below(2);
    r.format_errors = int(r.tag_error) + int(r.presentation_error);
    const JudgeVerdict v{rng.below(2) ? std::optional<std::size_t>(1) : std::nullopt, ExamQuality::kDifferentiates,
                         bool(rng.below(2))};
    const auto base = total_reward(r, v, cfg, rules);
    auto m = r;
    m.diff_list = gen::items(rng, 1);
    m.exam_list = gen::items(rng, 0);
    m.tool_list = {"tool-pRCC", "tool-x"};
    const auto mutated = total_reward(m, v, cfg, rules);
    if (base.total != -cfg.format_penalty * r.format_errors ||
        std::memcmp(&base.total, &mutated.total, sizeof(double)) != 0) {
      ++bad;
    }
  }
  c.expect(bad == 0, std::to_string(bad) + " transcripts broke dominance");
  c.detail << "10000 format-error transcripts; ";
}

// 2: highlighter kernels against brute force.
void highlighter(Check& c) {
  Rng rng(202);
  double worst = 0;
  std::size_t argmax_bad = 0, topk_bad = 0, roi_bad = 0, scale_bad = 0;
  const int instances = 1000;
  for (int trial = 0; trial < instances; ++trial) {
    const std::size_t n = 1 + rng.below(2000), t = 1 + rng.below(16), d = 1 + rng.below(64);
    auto patches = random_rows(rng, n, d);
    const auto protos = random_rows(rng, t, d);
    const std::size_t nh = 1 + rng.below(t);
    const auto tk = make_toolkit(protos, ToolkitMode::kGrounding, nh);
    const auto s = similarity_matrix(to_records(patches), tk);
    const auto o = oracle::cosine(patches, protos);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < t; ++j) worst = std::max(worst, std::abs(o[i][j] - s.at(i, j)));
    }

    const auto g = ground_regions(s, tk);
    std::vector<std::size_t> expect_h;
    for (std::size_t i = 0; i < n; ++i) {
      const auto a = oracle::argmax(s.row(i));
      if (g.assignment[i] != a) ++argmax_bad;
      if (a < nh) expect_h.push_back(i);
    }
    if (g.highlighted != expect_h) ++argmax_bad;

    const std::size_t k = 1 + rng.below(8);
    auto loc = tk;
    loc.mode = ToolkitMode::kLocalization;
    const auto h = localize_entities(s, loc, k);
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), std::size_t{0});
    for (std::size_t j = 0; j < t; ++j) {
      std::vector<float> col(n);
      for (std::size_t i = 0; i < n; ++i) col[i] = s.at(i, j);
      const auto want = oracle::topk(all, col, k);
      bool same = h[j].entries.size() == want.size();
      for (std::size_t i = 0; same && i < want.size(); ++i) same = h[j].entries[i].patch == want[i];
      if (!same) ++topk_bad;
    }

    if (!expect_h.empty()) {
      std::vector<std::size_t> cols(nh);
      std::iota(cols.begin(), cols.end(), std::size_t{0});
      const std::size_t k_top = 1 + rng.below(4), k_rand = rng.below(4);
      const auto sel = select_rois_region(expect_h, s, cols, k_top, k_rand, rng.next());
      std::vector<double> score(n, -2.0);
      for (auto i : expect_h) {
        for (auto j : cols) score[i] = std::max(score[i], static_cast<double>(s.at(i, j)));
      }
      const auto top = oracle::topk(expect_h, score, k_top);
      std::set<std::size_t> seen, pool(expect_h.begin(), expect_h.end());
      bool ok = sel.entries.size() == std::min(k_top + k_rand, expect_h.size());
      for (std::size_t i = 0; ok && i < sel.entries.size(); ++i) {
        const auto p = sel.entries[i].patch;
        ok = pool.count(p) && seen.insert(p).second && (i >= top.size() || p == top[i]);
      }
      if (!ok) ++roi_bad;
    }

    const float scale = std::ldexp(1.0f, static_cast<int>(rng.below(17)) - 8);
    for (auto& r : patches) {
      for (auto& v : r) v *= scale;
    }
    const auto g2 = ground_regions(similarity_matrix(to_records(patches), tk), tk);
    if (g2.assignment != g.assignment) ++scale_bad;
  }
  c.expect(worst <= 1e-5, "similarity deviation " + std::to_string(worst));
  c.expect(argmax_bad == 0, std::to_string(argmax_bad) + " argmax mismatches");
  c.expect(topk_bad == 0, std::to_string(topk_bad) + " top-k mismatches");
  c.expect(roi_bad == 0, std::to_string(roi_bad) + " RoI mismatches");
  c.expect(scale_bad == 0, std::to_string(scale_bad) + " scale-variant argmax");
  c.detail << instances << " instances, max dev " << worst << "; ";
}

const SynthWorld& fixture_world() {
  static const SynthWorld w = make_world(fixture_slide_recipes());
  return w;
}

CaseFixture worked(int n) {
  return CaseFixture::from_json(json::parse(read_text(kWorked / ("case" + std::to_string(n) + ".json"))), kWorked);
}

// 3: the three worked cases over HTTP.
void worked_casesases(Check& c) {
  EngineResources res;
  res.corpus = &fixture_world().corpus;
  res.toolkits = &fixture_world().toolkits;
  const std::vector<std::string> finals{"Clear cell renal cell carcinoma (ccRCC), nuclear grade 3",
                                        "Gastric adenocarcinoma", "Thymic carcinoma"};
  const std::vector<std::string> simple{"Exploration", "Execution", "Done"};
  const std::vector<std::string> reentry{"Exploration", "Execution", "Exploration-reentry", "Execution", "Done"};
  for (int n = 1; n <= 3; ++n) {
    const auto out = replay::over_http(worked(n), res);
    const auto tag = "case " + std::to_string(n);
    c.expect(out.stage == "Done", tag + " stage " + out.stage);
    c.expect(out.final_diagnosis == finals[n - 1], tag + " final diagnosis");
    c.expect(out.trace == (n == 3 ? reentry : simple), tag + " stage trace");
    if (n == 1) {
      const auto icl = replay::interpreter_tools(out.requests, "icl");
      for (const std::string t : {"tool-ccRCC", "tool-chRCC", "tool-pRCC", "tool-Nuclear"}) {
        c.expect(std::find(icl.begin(), icl.end(), t) != icl.end(), "missing ICL request " + t);
      }
    }
  }
}

// 4: parser totality, fixture answers, round trip.
void parser(Check& c) {
  Rng rng(404);
  std::size_t bad = 0;
  for (int i = 0; i < 100000; ++i) {
    const auto r = parse_response(gen::noise(rng));
    if (r.format_errors < 0 || r.format_errors > 2 || r.format_errors != int(r.tag_error) + int(r.presentation_error)) ++bad;
  }
  c.expect(bad == 0, std::to_string(bad) + " fuzz outputs out of range");
  const auto replies = gen::scripted_replies(kWorked);
  c.expect(replies.size() == 7, "expected 7 scripted replies");
  for (const auto& r : replies) c.expect(parse_response(r).format_errors == 0, "n_f > 0 on a fixture reply");
  std::size_t rt_bad = 0;
  for (int i = 0; i < 10000; ++i) {
    const auto r = gen::well_formed(rng);
    const auto back = parse_response(serialize_response(r));
    if (back.format_errors != 0 || !same_fields(r, back)) ++rt_bad;
  }
  c.expect(rt_bad == 0, std::to_string(rt_bad) + " round-trip failures");
  c.detail << "100000 fuzz inputs, 10000 round trips; ";
}

// 5: fuzzed sessions.
void protocol(Check& c) {
  EngineResources res;
  res.corpus = &fixture_world().corpus;
  res.toolkits = &fixture_world().toolkits;
  Rng rng(505);
  const std::vector<std::string> slides{"tcga-kirc-01", "tcga-prad-01", "po-thymic-01", ""};
  std::size_t nondet = 0, unbounded = 0, shrank = 0;
  const int sessions = 500;
  for (int i = 0; i < sessions; ++i) {
    const auto seed = rng.next();
    SessionConfig cfg;
    cfg.seed = seed;
    cfg.max_rounds = 1 + rng.below(3);
    const CaseInput in{"f" + std::to_string(i), "info", slides[rng.below(slides.size())]};
    Rng ra(seed), rb(seed);
    Session a("x", in, cfg, res, BackendSet::scripted(gen::adversarial_script(ra)));
    Session b("x", in, cfg, res, BackendSet::scripted(gen::adversarial_script(rb)));
    a.start();
    std::vector<Evidence> seen;
    bool mono = true;
    while (!a.finished()) {
      a.execute();
      if (!a.finished()) a.conclude();
      if (a.evidence().size() < seen.size()) mono = false;
      for (std::size_t k = 0; mono && k < seen.size(); ++k) mono = a.evidence()[k].to_json() == seen[k].to_json();
      seen = a.evidence();
    }
    b.run();
    if (!mono) ++shrank;
    if (a.log_text() != b.log_text()) ++nondet;
    if (static_cast<std::size_t>(a.rounds()) > cfg.max_rounds ||
        a.turns().size() > cfg.max_rounds + 1 + static_cast<std::size_t>(cfg.retry_budget)) {
      ++unbounded;
    }
  }
  c.expect(nondet == 0, std::to_string(nondet) + " nondeterministic sessions");
  c.expect(unbounded == 0, std::to_string(unbounded) + " sessions over bound");
  c.expect(shrank == 0, std::to_string(shrank) + " sessions lost evidence");
  c.detail << sessions << " sessions; ";
}

// 6: metrics against a confusion-matrix oracle.
void metrics(Check& c) {
  Rng rng(606);
  const std::vector<std::string> names{"ccRCC", "chRCC", "pRCC", "other"};
  auto labels = [&](const std::vector<std::size_t>& codes) {
    std::vector<std::string> out;
    for (auto k : codes) out.push_back(names[k]);
    return out;
  };
  std::size_t bad = 0;
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
    if (balanced_accuracy(labels(pred), labels(truth), classes).value != cm.balanced_accuracy()) ++bad;
    if (accuracy(labels(pred), labels(truth)) != cm.accuracy()) ++bad;
    std::vector<bool> bp(n), bt(n);
    for (std::size_t i = 0; i < n; ++i) {
      bp[i] = rng.below(2);
      bt[i] = rng.below(2);
    }
    const auto o = oracle::binary(bp, bt);
    const auto m = invasion_prf(bp, bt);
    if (m.precision != o.p || m.recall != o.r || m.f1 != o.f1) ++bad;
  }
  c.expect(bad == 0, std::to_string(bad) + " oracle mismatches");
  std::size_t unbalanced = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t per = 1 + rng.below(20);
    std::vector<std::size_t> truth, pred;
    for (std::size_t cl = 0; cl < 3; ++cl) {
      for (std::size_t i = 0; i < per; ++i) {
        truth.push_back(cl);
        pred.push_back(rng.below(3));
      }
    }
    const std::vector<std::string> classes(names.begin(), names.begin() + 3);
    if (std::abs(balanced_accuracy(labels(pred), labels(truth), classes).value - accuracy(labels(pred), labels(truth))) >
        1e-12) {
      ++unbalanced;
    }
  }
  c.expect(unbalanced == 0, std::to_string(unbalanced) + " balanced corpora with BAcc != Acc");
  c.detail << "1000 oracle trials, 200 balanced corpora; ";
}

// 7: ablation grids on the synthetic corpus.
void ablation(Check& c) {
  const auto cases = make_synth_cases(10, 11);
  const auto fixtures = synth_fixtures(cases);
  const auto world = make_world(recipes_for(cases));
  EngineResources res;
  res.corpus = &world.corpus;
  res.toolkits = &world.toolkits;
  RunOptions opts;
  opts.resources = &res;
  struct Grid {
    AblationAxis axis;
    const char* spec;
    std::size_t rows;
  };
  for (const auto& g : {Grid{AblationAxis::kEvidenceSources, "FF,TF,FT,TT", 4}, Grid{AblationAxis::kRoiPlan, "1,3,6", 3}}) {
    const auto r = run_ablation(g.axis, g.spec, fixtures, opts);
    const std::string tag(to_string(g.axis));
    c.expect(r.rows.size() == g.rows, tag + " row count");
    for (const auto& row : r.rows) {
      c.expect(row.metrics.cases == 10 && row.metrics.failed.empty(), tag + " row lost cases");
      c.expect(row.labels.size() == r.label_columns.size(), tag + " label shape");
    }
    const auto text = r.to_text();
    c.expect(static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n')) == g.rows + 2, tag + " table shape");
    std::printf("%s", text.c_str());
  }
  c.detail << "10 synthetic cases; ";
}

// 8: similarity plus grounding at scale.
void performance(Check& c) {
  const std::size_t n = 100000, t = 32, d = 512;
  Rng rng(808);
  std::vector<float> data(n * d);
  for (auto& v : data) v = static_cast<float>(rng.normal());
  std::vector<GridCoord> coords(n);
  for (std::size_t i = 0; i < n; ++i) coords[i] = {static_cast<std::int32_t>(i % 400), static_cast<std::int32_t>(i / 400)};
  const EmbeddingView view{data, coords, n, d};
  const auto tk = make_toolkit(random_rows(rng, t, d), ToolkitMode::kGrounding, 4);

  const auto t0 = Clock::now();
  const auto s = similarity_matrix(view, tk, "perf");
  const auto g = ground_regions(s, tk);
  const double elapsed = seconds_since(t0);

  std::vector<std::vector<float>> sample, protos;
  std::vector<std::size_t> idx;
  for (int i = 0; i < 1000; ++i) {
    idx.push_back(rng.below(n));
    const auto r = view.row(idx.back());
    sample.emplace_back(r.begin(), r.end());
  }
  for (const auto& p : tk.prototypes) protos.push_back(p.vector);
  const auto o = oracle::cosine(sample, protos);
  double worst = 0;
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    for (std::size_t j = 0; j < t; ++j) worst = std::max(worst, std::abs(o[i][j] - s.at(idx[i], j)));
    if (g.assignment[idx[i]] != oracle::argmax(s.row(idx[i]))) ++wrong;
  }
  c.expect(worst <= 1e-5, "sample deviation " + std::to_string(worst));
  c.expect(wrong == 0, std::to_string(wrong) + " sampled assignments wrong");
  c.expect(elapsed < 5.0, "kernel time over 5 s");
  c.detail << "100000x32x512 in " << elapsed << " s on " << kernels::max_threads() << " thread(s), max dev " << worst
           << "; ";
}

struct Criterion {
  int id;
  const char* name;
  double limit_s;
  std::function<void(Check&)> run;
};

}  // namespace

int main() {
  const std::vector<Criterion> all{
      {1, "reward", 10, reward},         {2, "highlighter", 60, highlighter}, {3, "worked-cases", 30, worked_casesases},
      {4, "response-parser", 0, parser}, {5, "protocol", 120, protocol},      {6, "metrics", 0, metrics},
      {7, "ablation", 60, ablation},     {8, "performance", 0, performance},
  };
  int failed = 0;
  std::vector<std::string> lines;
  for (const auto& cr : all) {
    Check c;
    const auto t0 = Clock::now();
    try {
      cr.run(c);
    } catch (const std::exception& e) {
      c.expect(false, std::string("exception: ") + e.what());
    }
    const double took = seconds_since(t0);
    if (cr.limit_s > 0) c.expect(took < cr.limit_s, "over the " + std::to_string(int(cr.limit_s)) + " s limit");
    char head[96];
    std::snprintf(head, sizeof head, "criterion %d %-16s %s %7.2fs  ", cr.id, cr.name, c.ok ? "PASS" : "FAIL", took);
    lines.push_back(head + c.detail.str());
    std::printf("%s\n", lines.back().c_str());
    std::fflush(stdout);
    failed += c.ok ? 0 : 1;
  }
  std::printf("\n");
  for (const auto& l : lines) std::printf("%s\n", l.c_str());
  std::printf("%d/%zu criteria passed\n", static_cast<int>(all.size()) - failed, all.size());
  return failed == 0 ? 0 : 1;
}
