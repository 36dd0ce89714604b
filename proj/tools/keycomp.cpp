// keycomp: command-line front end for experiments, ablations, the oracle
// service and report rendering.
#include <CLI11.hpp>
#include <fmt/format.h>
#include <fmt/ranges.h>
#include <signal.h>

#include <fstream>
#include <iostream>

#include "keycomp/error.hpp"
#include "keycomp/keywords.hpp"
#include "keycomp/oracle.hpp"
#include "keycomp/report.hpp"
#include "keycomp/runner.hpp"
#include "keycomp/scoring.hpp"

namespace {

using namespace keycomp;

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw LoadError("cannot write " + path.string());
  out << text;
}

int cmd_run(const std::string& config_path, const std::string& mode, const std::string& output,
            const std::string& journal) {
  ExperimentConfig config = load_experiment_config(config_path);
  if (!mode.empty()) config.mode = parse_replay_mode(mode);
  if (!output.empty()) {
    if (!config.journal) config.journal = config.journal_path();  // keep reading the configured journal
    config.output_dir = output;
  }
  if (!journal.empty()) config.journal = std::filesystem::absolute(journal);
  const RunReport report = run_experiment(config);
  const std::array<RunReport, 1> one{report};
  std::cout << render_markdown(one);
  std::cout << fmt::format("\nrun directory: {}\n", config.output_dir.string());
  return 0;
}

int cmd_ablate(const std::vector<std::string>& paths, const std::string& mode, const std::string& output) {
  std::vector<ExperimentConfig> configs;
  for (const auto& p : paths) {
    configs.push_back(load_experiment_config(p));
    if (!mode.empty()) configs.back().mode = parse_replay_mode(mode);
  }
  const AblationTable table = run_ablation(configs);
  const std::string md = render_ablation_markdown(table);
  std::cout << md;
  if (!output.empty()) {
    std::filesystem::create_directories(output);
    write_text(std::filesystem::path(output) / "ablation.md", md);
    write_text(std::filesystem::path(output) / "ablation.json", ablation_to_json(table).dump(2) + "\n");
  }
  return 0;
}

int cmd_oracle_serve(const std::string& config_path, const std::string& bind) {
  ExperimentConfig config = load_experiment_config(config_path);
  config.oracle_enabled = true;
  const auto [host, port] = parse_bind_address(bind);

  // Block the stop signals before any thread starts so only sigwait sees them.
  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);

  OracleService service(config);
  const int bound = service.start(host, port);
  std::cerr << fmt::format("oracle: {} images, {} selected; listening on http://{}:{}\n", service.total(),
                           service.store().size(), host, bound);
  int sig = 0;
  sigwait(&signals, &sig);
  service.stop();
  std::cerr << fmt::format("oracle: stopped, {} of {} selections stored in {}\n", service.store().size(),
                           service.total(), service.store().path().string());
  return 0;
}

int cmd_score_similarity(const std::string& input, const std::string& format) {
  const auto matrices = load_similarity(input);
  const RunReport report = score_similarity_baseline(matrices);
  const std::array<RunReport, 1> one{report};
  std::cout << render(one, parse_report_format(format));
  return 0;
}

int cmd_report(const std::vector<std::string>& run_dirs, const std::string& format) {
  std::vector<RunReport> reports;
  for (const auto& dir : run_dirs) reports.push_back(load_report(dir));
  std::cout << render(reports, parse_report_format(format));
  return 0;
}

int cmd_keywords(const std::vector<std::string>& captions, const std::string& backend, const std::string& argument) {
  const auto tagger = make_tagger(backend, argument);
  std::string joined;
  for (const auto& c : captions) joined += (joined.empty() ? "" : " ") + c;
  for (const auto& t : tag_pos(tokenize(joined), *tagger)) {
    std::cout << fmt::format("{}\t{}\n", t.token.surface, to_string(t.pos));
  }
  const KeywordSet keywords = extract_keywords(captions, *tagger);
  std::cout << fmt::format("keywords: {}\n", fmt::join(keywords.words, ", "));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"keyword-guided compositional reasoning harness"};
  app.require_subcommand(1);

  std::string config_path, mode, output, journal;
  auto* run = app.add_subcommand("run", "run one experiment");
  run->add_option("--config", config_path, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  run->add_option("--mode", mode, "live | record | replay | strict-replay (overrides the config)");
  run->add_option("--output", output, "run directory (overrides the config; the journal stays where it was)");
  run->add_option("--journal", journal, "transcript journal to read and append");

  std::vector<std::string> config_paths;
  auto* ablate = app.add_subcommand("ablate", "run several configs and compare them against the first");
  ablate->add_option("--configs", config_paths, "experiment configs")->required()->expected(2, -1);
  ablate->add_option("--mode", mode, "replay mode for every config");
  ablate->add_option("--output", output, "directory for ablation.md and ablation.json");

  auto* oracle = app.add_subcommand("oracle", "human oracle service");
  oracle->require_subcommand(1);
  std::string bind = "127.0.0.1:8787";
  auto* serve = oracle->add_subcommand("serve", "serve candidate descriptions and collect selections");
  serve->add_option("--config", config_path, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  serve->add_option("--bind", bind, "host:port")->capture_default_str();

  std::string input, format = "md";
  auto* similarity = app.add_subcommand("score-similarity", "score caption-image similarity matrices");
  similarity->add_option("--input", input, "JSON lines {id, s00, s01, s10, s11}")->required()->check(CLI::ExistingFile);
  similarity->add_option("--format", format, "json | csv | md")->capture_default_str();

  std::vector<std::string> run_dirs;
  auto* report = app.add_subcommand("report", "render stored run reports");
  report->add_option("--format", format, "json | csv | md")->capture_default_str();
  report->add_option("run_dirs", run_dirs, "run directories")->required();

  std::vector<std::string> captions;
  std::string backend = "reference", tagger_arg;
  auto* keywords = app.add_subcommand("keywords", "tag captions and print their keywords");
  keywords->add_option("captions", captions, "one or two captions")->required()->expected(1, 2);
  keywords->add_option("--tagger", backend, "reference | external")->capture_default_str();
  keywords->add_option("--tagger-arg", tagger_arg, "lexicon path (reference) or command (external)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) return cmd_run(config_path, mode, output, journal);
    if (*ablate) return cmd_ablate(config_paths, mode, output);
    if (*serve) return cmd_oracle_serve(config_path, bind);
    if (*similarity) return cmd_score_similarity(input, format);
    if (*report) return cmd_report(run_dirs, format);
    if (*keywords) return cmd_keywords(captions, backend, tagger_arg);
  } catch (const RunAborted& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
