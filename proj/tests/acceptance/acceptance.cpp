// Acceptance gate: one PASS/FAIL line per criterion, non-zero exit on any failure.
#include <fmt/format.h>
#include <httplib.h>

#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <random>
#include <set>
#include <sstream>

#include "keycomp/keywords.hpp"
#include "keycomp/oracle.hpp"
#include "keycomp/prompting.hpp"
#include "keycomp/report.hpp"
#include "keycomp/runner.hpp"
#include "keycomp/scoring.hpp"
#include "support/fixtures.hpp"

using namespace keycomp;
using namespace keycomp::testing;
using json = nlohmann::json;

namespace {

constexpr double kAggregationTolerance = 1e-12;
constexpr double kTruthTableBudgetSeconds = 1.0;
constexpr int kSimilarityTrials = 1000;
constexpr int kMockItems = 20;
constexpr int kMockRuns = 3;

struct Outcome {
  bool ok = true;
  std::string detail;

  void require(bool cond, const std::string& what) {
    if (!cond && ok) {
      ok = false;
      detail = what;
    }
  }
};

Selection pick(Choice c) {
  if (c == Choice::Invalid) return Selection::invalid();
  return Selection::pick(c, c == Choice::OptionA ? "A" : "B");
}

// Reference scorer written without the library: a task bit is set only when
// the first question answered with the first option and the second with the second.
struct Bits {
  int text, image, group;
};
Bits brute_force(const std::array<Choice, 4>& c) {
  int text = 1, image = 1;
  const Choice expected[4] = {Choice::OptionA, Choice::OptionB, Choice::OptionA, Choice::OptionB};
  for (int q = 0; q < 4; ++q) {
    if (c[q] != expected[q]) (q < 2 ? text : image) = 0;
  }
  return {text, image, text * image};
}

std::vector<std::array<Choice, 4>> all_combinations() {
  const Choice values[3] = {Choice::OptionA, Choice::OptionB, Choice::Invalid};
  std::vector<std::array<Choice, 4>> out;
  for (int code = 0; code < 81; ++code) {
    std::array<Choice, 4> c{};
    int rest = code;
    for (int q = 0; q < 4; ++q, rest /= 3) c[q] = values[rest % 3];
    out.push_back(c);
  }
  return out;
}

Outcome truth_table() {
  Outcome o;
  const auto start = std::chrono::steady_clock::now();
  int checked = 0;
  for (const auto& c : all_combinations()) {
    const ItemScore s = score_item(0, {pick(c[0]), pick(c[1]), pick(c[2]), pick(c[3])});
    const Bits b = brute_force(c);
    o.require(s.text_correct == b.text && s.image_correct == b.image && s.group_correct == b.group,
              fmt::format("mismatch at combination {}", checked));
    o.require(s.group_correct == (s.text_correct && s.image_correct), "group is not text AND image");
    ++checked;
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  o.require(checked == 81, "expected 81 combinations");
  o.require(secs < kTruthTableBudgetSeconds, fmt::format("took {:.3f}s", secs));
  if (o.ok) o.detail = fmt::format("81/81 combinations agree, {:.4f}s", secs);
  return o;
}

Outcome invalid_handling() {
  Outcome o;
  int with_invalid = 0;
  for (const auto& c : all_combinations()) {
    const bool text_invalid = c[0] == Choice::Invalid || c[1] == Choice::Invalid;
    const bool image_invalid = c[2] == Choice::Invalid || c[3] == Choice::Invalid;
    if (!text_invalid && !image_invalid) continue;
    ++with_invalid;
    const ItemScore s = score_item(0, {pick(c[0]), pick(c[1]), pick(c[2]), pick(c[3])});
    if (text_invalid) o.require(s.text_correct == 0, "invalid text sub-answer scored correct");
    if (image_invalid) o.require(s.image_correct == 0, "invalid image sub-answer scored correct");
    o.require(s.group_correct == 0, "group correct despite an invalid sub-answer");
  }
  o.require(with_invalid == 65, fmt::format("{} combinations contain an invalid answer, expected 65", with_invalid));
  if (o.ok) o.detail = "65/65 combinations with an invalid sub-answer score 0 on the affected task";
  return o;
}

Outcome aggregation() {
  Outcome o;
  // 100 items per run, 40 / 42 / 41 of them fully correct.
  std::vector<std::vector<ItemScore>> runs;
  for (int correct : {40, 42, 41}) {
    std::vector<ItemScore> run;
    for (int i = 0; i < 100; ++i) {
      const bool ok = i < correct;
      run.push_back(score_item(i, {pick(Choice::OptionA), pick(ok ? Choice::OptionB : Choice::OptionA),
                                   pick(Choice::OptionA), pick(ok ? Choice::OptionB : Choice::OptionA)}));
    }
    runs.push_back(std::move(run));
  }
  const RunReport r = aggregate(runs);
  const std::array<double, 3> direct{40.0, 42.0, 41.0};
  const Stat s = summarize_runs(direct);
  for (const Stat* st : {&r.text, &r.image, &r.group, &s}) {
    o.require(std::abs(st->mean - 41.0) <= kAggregationTolerance, fmt::format("mean {}", st->mean));
    o.require(st->std.has_value() && std::abs(*st->std - 1.0) <= kAggregationTolerance, "std is not 1.0");
  }
  if (o.ok) o.detail = fmt::format("mean {} std {} (tolerance {:g})", r.group.mean, *r.group.std, kAggregationTolerance);
  return o;
}

Outcome similarity_baseline() {
  Outcome o;
  std::mt19937_64 rng(20240101);
  std::uniform_real_distribution<double> real(-1.0, 1.0);
  std::uniform_int_distribution<int> small(0, 2);
  std::vector<SimilarityMatrix> matrices;
  for (int t = 0; t < kSimilarityTrials; ++t) {
    SimilarityMatrix m;
    m.item_id = t;
    const bool coarse = t % 4 == 0;  // small integers make ties common
    for (auto& row : m.s) {
      for (auto& v : row) v = coarse ? small(rng) : real(rng);
    }
    matrices.push_back(m);
  }
  auto oracle = [](const SimilarityMatrix& m) {
    const auto& s = m.s;
    const int text = s[0][0] > s[1][0] && s[1][1] > s[0][1];
    const int image = s[0][0] > s[0][1] && s[1][1] > s[1][0];
    return Bits{text, image, text && image};
  };
  const RunReport report = score_similarity_baseline(matrices);
  std::vector<SimilarityMatrix> shifted = matrices;
  for (auto& m : shifted) {
    for (auto& row : m.s) {
      for (auto& v : row) v = 2 * v + 7;
    }
  }
  const RunReport moved = score_similarity_baseline(shifted);
  o.require(report.runs.size() == 1 && report.runs[0].size() == matrices.size(), "unexpected report shape");
  for (std::size_t i = 0; o.ok && i < matrices.size(); ++i) {
    const Bits b = oracle(matrices[i]);
    const ItemScore& s = report.runs[0][i];
    o.require(s.text_correct == b.text && s.image_correct == b.image && s.group_correct == b.group,
              fmt::format("matrix {} disagrees with the argmax oracle", i));
    const ItemScore& t = moved.runs[0][i];
    o.require(t.text_correct == s.text_correct && t.image_correct == s.image_correct &&
                  t.group_correct == s.group_correct,
              fmt::format("matrix {} changed under x -> 2x+7", i));
  }
  if (o.ok) o.detail = fmt::format("{} matrices agree with the oracle and are invariant under 2x+7", kSimilarityTrials);
  return o;
}

struct CountingHooks {
  std::shared_ptr<CountingTransport> vlm = std::make_shared<CountingTransport>(std::make_shared<EchoVlmTransport>());
  std::shared_ptr<CountingTransport> llm;

  explicit CountingHooks(std::shared_ptr<Transport> llm_inner = std::make_shared<RuleLlmTransport>())
      : llm(std::make_shared<CountingTransport>(std::move(llm_inner))) {}

  RunHooks hooks() const {
    RunHooks h;
    h.vlm_transport = vlm;
    h.llm_transport = llm;
    return h;
  }
};

bool is_exactly(const Stat& s, double mean) { return s.mean == mean && s.std.has_value() && *s.std == 0.0; }

Outcome mock_end_to_end() {
  Outcome o;
  TempDir dir;
  const auto ds = write_synthetic_dataset(dir / "data", kMockItems);
  auto cfg = mock_config(ds, dir / "run");
  cfg.llm_runs = kMockRuns;
  CountingHooks counted;
  const RunReport r = run_experiment(cfg, counted.hooks());
  o.require(is_exactly(r.text, 100.0) && is_exactly(r.image, 100.0) && is_exactly(r.group, 100.0),
            fmt::format("scores {} / {} / {}", format_stat(r.text), format_stat(r.image), format_stat(r.group)));
  o.require(counted.vlm->calls() == 2u * kMockItems, fmt::format("{} VLM calls", counted.vlm->calls()));
  o.require(counted.llm->calls() == 4u * kMockRuns * kMockItems, fmt::format("{} LLM calls", counted.llm->calls()));

  auto neither_cfg = mock_config(ds, dir / "neither");
  CountingHooks neither(std::make_shared<ConstantLlmTransport>("Neither."));
  const RunReport n = run_experiment(neither_cfg, neither.hooks());
  o.require(n.text.mean == 0.0 && n.image.mean == 0.0 && n.group.mean == 0.0, "constant Neither scored above zero");
  o.require(n.invalid_rate == 100.0, fmt::format("invalid_rate {}", n.invalid_rate));
  if (o.ok) {
    o.detail = fmt::format("{} items: {} / {} / {}, {} VLM + {} LLM calls per item; Neither -> 0.0, invalid {}%",
                           kMockItems, format_stat(r.text), format_stat(r.image), format_stat(r.group),
                           counted.vlm->calls() / kMockItems, counted.llm->calls() / kMockItems, n.invalid_rate);
  }
  return o;
}

Outcome replay_determinism() {
  Outcome o;
  TempDir dir;
  const auto ds = write_synthetic_dataset(dir / "data", kMockItems);
  auto cfg = mock_config(ds, dir / "record");
  CountingHooks rec;
  run_experiment(cfg, rec.hooks());

  auto replay_cfg = mock_config(ds, dir / "replay");
  replay_cfg.mode = ReplayMode::StrictReplay;
  replay_cfg.journal = cfg.journal_path();
  CountingHooks replay;
  run_experiment(replay_cfg, replay.hooks());
  const std::string a = read_text(dir / "record/report.json");
  const std::string b = read_text(dir / "replay/report.json");
  o.require(!a.empty() && a == b, "report.json differs between record and strict replay");
  const auto calls = replay.vlm->calls() + replay.llm->calls();
  o.require(calls == 0, fmt::format("{} transport calls during strict replay", calls));
  if (o.ok) o.detail = fmt::format("report.json identical ({} bytes), 0 transport calls", a.size());
  return o;
}

Outcome keyword_goldens() {
  Outcome o;
  std::ifstream in(test_data("golden/keywords.jsonl"));
  o.require(static_cast<bool>(in), "golden file missing");
  const ReferenceTagger tagger;
  int cases = 0;
  for (std::string line; o.ok && std::getline(in, line);) {
    if (line.empty()) continue;
    const auto j = json::parse(line);
    const auto captions = j["captions"].get<std::vector<std::string>>();
    const auto words = extract_keywords(captions, tagger).words;
    o.require(words == j["keywords"].get<std::vector<std::string>>(), fmt::format("golden {} differs", cases));
    std::set<std::string> seen(words.begin(), words.end());
    o.require(seen.size() == words.size(), fmt::format("golden {} has duplicates", cases));
    for (const auto& w : words) o.require(is_content(tagger.tag_word(w)), fmt::format("'{}' is not content", w));
    ++cases;
  }
  o.require(cases == 15, fmt::format("{} golden cases, expected 15", cases));
  if (o.ok) o.detail = "15/15 captions reproduce their keyword lists";
  return o;
}

Outcome prompt_bytes() {
  Outcome o;
  const auto& v5 = PromptRegistry::defaults().lookup("V5");
  const KeywordSet kw{{"rabbit", "faster", "than", "turtle"}, KeywordSource::ConcatenatedCaptions};
  const std::string d0 = "A rabbit is running ahead of a turtle on a dirt path.";
  const std::string d1 = "A turtle crosses the finish line while a rabbit sleeps under a tree.";
  const std::string c0 = "the rabbit is faster than the turtle";
  const std::string c1 = "the turtle is faster than the rabbit";
  o.require(build_description_prompt(*v5.description, kw).rendered == read_text(test_data("golden/v5_description.txt")),
            "Description differs from golden");
  o.require(build_text_task_prompt(*v5.text_task, d0, c0, c1).rendered ==
                read_text(test_data("golden/v5_text_task.txt")),
            "TextTask differs from golden");
  o.require(build_image_task_prompt(*v5.image_task, c0, d0, d1).rendered ==
                read_text(test_data("golden/v5_image_task.txt")),
            "ImageTask differs from golden");

  const std::string head = "Describe this image in detail, paying attention to:";
  auto render = [&](std::vector<std::string> words) {
    return build_description_prompt(*v5.description, {std::move(words), KeywordSource::ConcatenatedCaptions}).rendered;
  };
  o.require(render({}) == head, "k = 0 join");
  o.require(render({"ball"}) == head + " ball", "k = 1 join");
  o.require(render({"a", "b", "c", "d"}) == head + " a, b, c, d", "k = 4 join");
  if (o.ok) o.detail = "3 golden renders match; k = 0, 1, 4 joins exact";
  return o;
}

Outcome category_filter() {
  Outcome o;
  const std::vector<std::pair<Category, int>> counts{{Category::NoTag, 50},           {Category::ComplexReasoning, 30},
                                                     {Category::VisuallyDifficult, 12}, {Category::UnusualImage, 5},
                                                     {Category::UnusualText, 2},      {Category::AmbiguouslyCorrect, 1}};
  CategoryMap cats;
  std::vector<ItemScore> run;
  int id = 0;
  for (const auto& [cat, n] : counts) {
    for (int i = 0; i < n; ++i, ++id) {
      cats.insert(id, cat);
      run.push_back(score_item(id, {pick(Choice::OptionA), pick(Choice::OptionB), pick(Choice::OptionA),
                                    pick(Choice::OptionB)}));
    }
  }
  RunReport r = aggregate({run});
  r.label = "categories";
  r.breakdown = category_breakdown(r, cats, 5.0);
  o.require(r.breakdown.size() == counts.size(), fmt::format("{} categories listed", r.breakdown.size()));
  std::set<Category> excluded;
  for (const auto& c : r.breakdown) {
    if (c.excluded) excluded.insert(c.category);
    const auto it = std::find_if(counts.begin(), counts.end(), [&](const auto& p) { return p.first == c.category; });
    o.require(it != counts.end() && std::abs(c.share - it->second) < 1e-9, "share mismatch");
  }
  o.require(excluded == std::set<Category>{Category::UnusualText, Category::AmbiguouslyCorrect},
            fmt::format("{} categories excluded", excluded.size()));
  const auto j = report_to_json(r);
  int flagged = 0;
  for (const auto& c : j["breakdown"]) flagged += c["excluded"].get<bool>() ? 1 : 0;
  o.require(j["breakdown"].size() == 6 && flagged == 2, "raw output does not keep excluded categories flagged");
  if (o.ok) o.detail = "2% and 1% excluded, 5% kept; all six retained in output";
  return o;
}

Outcome oracle_round_trip() {
  Outcome o;
  TempDir dir;
  const int n = 4;
  const auto ds = write_synthetic_dataset(dir / "data", n);
  auto cfg = mock_config(ds, dir / "run");
  cfg.oracle_enabled = true;
  cfg.oracle_k = 5;
  std::map<std::pair<long long, int>, std::string> chosen;
  {
    OracleService service(cfg);
    httplib::Client client("127.0.0.1", service.start("127.0.0.1", 0));
    const auto items = json::parse(client.Get("/items")->body);
    for (const auto& e : items) {
      const int sample = (e["item_id"].get<int>() + e["image_index"].get<int>()) % cfg.oracle_k;
      const json body{{"item_id", e["item_id"]},
                      {"image_index", e["image_index"]},
                      {"chosen_sample_index", sample},
                      {"chooser", "acceptance"}};
      const auto res = client.Post("/selections", body.dump(), "application/json");
      o.require(res && res->status == 201, "selection rejected");
      chosen[{e["item_id"].get<long long>(), e["image_index"].get<int>()}] =
          e["candidates"][sample]["text"].get<std::string>();
    }
  }
  {
    OracleService restarted(cfg);
    httplib::Client client("127.0.0.1", restarted.start("127.0.0.1", 0));
    const auto progress = json::parse(client.Get("/progress")->body);
    o.require(progress["completed"] == 2 * n && progress["total"] == 2 * n, "progress after restart is not 2N");
  }
  run_experiment(cfg);
  TranscriptStore journal(cfg.journal_path());
  std::istringstream answers(read_text(cfg.output_dir / "answers.jsonl"));
  for (std::string line; std::getline(answers, line);) {
    const auto a = json::parse(line);
    const auto t = journal.find(a["transcript"].get<std::string>());
    const int q = a["sub_question"].get<int>();
    for (int j = 0; j < 2; ++j) {
      if (q < 2 && j != q) continue;
      o.require(t && t->request_prompt.find(chosen[{a["item_id"].get<long long>(), j}]) != std::string::npos,
                "selection prompt lacks the chosen description");
    }
  }
  if (o.ok) o.detail = fmt::format("{} selections persisted across restart and embedded verbatim", 2 * n);
  return o;
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"scoring truth table", truth_table},
      {"invalid handling", invalid_handling},
      {"aggregation", aggregation},
      {"similarity baseline", similarity_baseline},
      {"mock end-to-end", mock_end_to_end},
      {"replay determinism", replay_determinism},
      {"keyword goldens", keyword_goldens},
      {"prompt bytes", prompt_bytes},
      {"category filter", category_filter},
      {"oracle round-trip (headless)", oracle_round_trip},
  };
  int failures = 0;
  for (const auto& [name, check] : criteria) {
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += o.ok ? 0 : 1;
    fmt::print("{} {}: {}\n", o.ok ? "PASS" : "FAIL", name, o.detail);
  }
  fmt::print("{}/{} criteria passed\n", criteria.size() - failures, criteria.size());
  return failures == 0 ? 0 : 1;
}
