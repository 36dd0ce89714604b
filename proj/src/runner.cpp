#include "keycomp/runner.hpp"

#include <fmt/format.h>
#include <fmt/ranges.h>

#include <array>
#include <atomic>
#include <condition_variable>
#include <deque>
#include <fstream>
#include <functional>
#include <set>
#include <thread>

#include "keycomp/digest.hpp"
#include "keycomp/error.hpp"
#include "keycomp/oracle.hpp"
#include "keycomp/report.hpp"

namespace keycomp {

namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;

// Runs tasks on a bounded set of threads. Tasks may enqueue follow-up tasks.
// The first exception stops the queue; run() rethrows it once every worker has
// finished its current task.
class WorkQueue {
 public:
  explicit WorkQueue(int workers) : workers_(std::max(workers, 1)) {}

  void push(std::function<void()> task) {
    {
      std::lock_guard lock(mutex_);
      tasks_.push_back(std::move(task));
    }
    cv_.notify_one();
  }

  void run() {
    std::vector<std::thread> threads;
    for (int w = 0; w < workers_; ++w) threads.emplace_back([this] { work(); });
    for (auto& t : threads) t.join();
    if (error_) std::rethrow_exception(error_);
  }

 private:
  void work() {
    for (;;) {
      std::function<void()> task;
      {
        std::unique_lock lock(mutex_);
        cv_.wait(lock, [this] { return error_ || !tasks_.empty() || in_flight_ == 0; });
        if (error_ || tasks_.empty()) {
          cv_.notify_all();
          return;
        }
        task = std::move(tasks_.front());
        tasks_.pop_front();
        ++in_flight_;
      }
      try {
        task();
      } catch (...) {
        std::lock_guard lock(mutex_);
        if (!error_) error_ = std::current_exception();
      }
      {
        std::lock_guard lock(mutex_);
        --in_flight_;
      }
      cv_.notify_all();
    }
  }

  int workers_;
  std::mutex mutex_;
  std::condition_variable cv_;
  std::deque<std::function<void()>> tasks_;
  int in_flight_ = 0;
  std::exception_ptr error_;
};

void check_keys(const json& j, std::initializer_list<std::string_view> allowed, std::string_view where) {
  if (!j.is_object()) throw ConfigError(fmt::format("{}: expected an object", where));
  for (const auto& [key, _] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw ConfigError(fmt::format("{}: unknown key '{}'", where, key));
    }
  }
}

template <typename T>
T get_or(const json& j, const char* key, T fallback, std::string_view where) {
  const auto it = j.find(key);
  if (it == j.end() || it->is_null()) return fallback;
  try {
    return it->get<T>();
  } catch (const json::exception&) {
    throw ConfigError(fmt::format("{}: '{}' has the wrong type", where, key));
  }
}

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : (base / path).lexically_normal();
}

EndpointConfig endpoint_from_json(const json& j, Role role, const fs::path& base, std::string_view where) {
  check_keys(j, {"type", "base_url", "model", "auth_env", "timeout_s", "max_retries", "response", "script"}, where);
  EndpointConfig e;
  e.role = role;
  e.type = parse_endpoint_type(get_or<std::string>(j, "type", "http", where));
  e.base_url = get_or<std::string>(j, "base_url", "", where);
  e.model_name = get_or<std::string>(j, "model", "", where);
  if (e.model_name.empty()) {
    if (e.type == EndpointType::Http) throw ConfigError(fmt::format("{}: http endpoints need a model", where));
    e.model_name = std::string(to_string(e.type));
  }
  e.auth_env = get_or<std::string>(j, "auth_env", "", where);
  e.timeout_seconds = get_or<double>(j, "timeout_s", e.timeout_seconds, where);
  e.max_retries = get_or<int>(j, "max_retries", e.max_retries, where);
  e.constant_response = get_or<std::string>(j, "response", "", where);
  const auto script = get_or<std::string>(j, "script", "", where);
  if (!script.empty()) e.script_path = resolve(base, script);
  return e;
}

SamplingParams sampling_from_json(const json& j, SamplingParams p, std::string_view where) {
  check_keys(j, {"temperature", "num_beams", "max_tokens"}, where);
  p.temperature = get_or<double>(j, "temperature", p.temperature, where);
  p.num_beams = get_or<int>(j, "num_beams", p.num_beams, where);
  p.max_tokens = get_or<int>(j, "max_tokens", p.max_tokens, where);
  return p;
}

json endpoint_to_json(const EndpointConfig& e) {
  json j{{"type", to_string(e.type)},
         {"model", e.model_name},
         {"timeout_s", e.timeout_seconds},
         {"max_retries", e.max_retries}};
  if (!e.base_url.empty()) j["base_url"] = e.base_url;
  if (!e.auth_env.empty()) j["auth_env"] = e.auth_env;
  if (e.type == EndpointType::MockConstant) j["response"] = e.constant_response;
  if (!e.script_path.empty()) j["script"] = e.script_path.string();
  return j;
}

json sampling_to_json(const SamplingParams& p) {
  return json{{"temperature", p.temperature}, {"num_beams", p.num_beams}, {"max_tokens", p.max_tokens}};
}

void write_file(const fs::path& path, std::string_view content) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw LoadError("cannot write " + tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw LoadError("write failure on " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string dataset_fingerprint(const std::vector<WinogroundItem>& items) {
  std::string s = serialize_dataset(items);
  for (const auto& item : items) s += item.image_0.digest + item.image_1.digest;
  return sha256_hex(s);
}

// Per-item description texts consumed by the selection step.
struct ItemDescriptions {
  std::array<std::string, 2> text_task;                 // [image]
  std::array<std::array<std::string, 2>, 2> image_task;  // [caption][image]
};

struct SubAnswer {
  std::string prompt_id;
  std::string key;
  std::string response;
  Selection selection;  // index space
};

Selection to_index_space(Selection s, bool flipped) {
  if (!flipped || s.value == Choice::Invalid) return s;
  s.value = s.value == Choice::OptionA ? Choice::OptionB : Choice::OptionA;
  return s;
}

}  // namespace

std::string_view to_string(DescriptionSharing sharing) {
  return sharing == DescriptionSharing::PerImage ? "per_image" : "per_task";
}

DescriptionSharing parse_description_sharing(std::string_view s) {
  if (s == "per_image") return DescriptionSharing::PerImage;
  if (s == "per_task") return DescriptionSharing::PerTask;
  throw ConfigError(fmt::format("unknown description_sharing '{}' (known: per_image, per_task)", s));
}

void ExperimentConfig::validate() const {
  if (metadata.empty()) throw ConfigError("config: dataset.metadata is required");
  if (llm_runs < 1) throw ConfigError("config: llm_runs must be >= 1");
  if (oracle_enabled && oracle_k < 2) throw ConfigError("config: oracle.k must be >= 2 when the oracle is enabled");
  if (oracle_enabled && description_sharing == DescriptionSharing::PerTask) {
    throw ConfigError("config: the oracle needs description_sharing = per_image");
  }
  if (parallelism < 1) throw ConfigError("config: parallelism must be >= 1");
  if (min_category_share < 0 || min_category_share > 100) {
    throw ConfigError("config: min_category_share must lie in [0, 100]");
  }
  vlm.validate();
  vlm_sampling.validate();
  llm_sampling.validate();
}

ExperimentConfig experiment_config_from_json(const json& j, const fs::path& base_dir) {
  check_keys(j,
             {"name", "dataset", "tagger", "prompts", "vlm", "llm", "llm_runs", "mode", "oracle", "output_dir",
              "journal", "fixed_clock", "flip_order", "parallelism", "description_sharing", "min_category_share"},
             "config");
  ExperimentConfig c;
  c.name = get_or<std::string>(j, "name", c.name, "config");

  const json& ds = j.value("dataset", json::object());
  check_keys(ds, {"metadata", "images_root", "categories"}, "config.dataset");
  const auto metadata = get_or<std::string>(ds, "metadata", "", "config.dataset");
  if (metadata.empty()) throw ConfigError("config.dataset: 'metadata' is required");
  c.metadata = resolve(base_dir, metadata);
  c.images_root = resolve(base_dir, get_or<std::string>(ds, "images_root", ".", "config.dataset"));
  if (const auto cats = get_or<std::string>(ds, "categories", "", "config.dataset"); !cats.empty()) {
    c.categories = resolve(base_dir, cats);
  }

  if (const auto it = j.find("tagger"); it != j.end()) {
    if (it->is_string()) {
      c.tagger_backend = it->get<std::string>();
    } else {
      check_keys(*it, {"backend", "lexicon", "command"}, "config.tagger");
      c.tagger_backend = get_or<std::string>(*it, "backend", "reference", "config.tagger");
      if (const auto lex = get_or<std::string>(*it, "lexicon", "", "config.tagger"); !lex.empty()) {
        c.tagger_argument = resolve(base_dir, lex).string();
      }
      if (const auto cmd = get_or<std::string>(*it, "command", "", "config.tagger"); !cmd.empty()) {
        c.tagger_argument = cmd;
      }
    }
  }

  if (const auto it = j.find("prompts"); it != j.end()) {
    check_keys(*it, {"variant", "templates"}, "config.prompts");
    c.prompt_variant = get_or<std::string>(*it, "variant", c.prompt_variant, "config.prompts");
    if (const auto t = get_or<std::string>(*it, "templates", "", "config.prompts"); !t.empty()) {
      c.prompt_templates = resolve(base_dir, t);
    }
  }

  auto model_section = [&](const char* name, Role role, EndpointConfig& endpoint, SamplingParams& sampling) {
    const auto it = j.find(name);
    if (it == j.end()) return;
    const std::string where = fmt::format("config.{}", name);
    check_keys(*it, {"endpoint", "sampling"}, where);
    endpoint = endpoint_from_json(it->value("endpoint", json::object()), role, base_dir, where + ".endpoint");
    if (it->contains("sampling")) sampling = sampling_from_json((*it)["sampling"], sampling, where + ".sampling");
  };
  model_section("vlm", Role::VLM, c.vlm, c.vlm_sampling);
  model_section("llm", Role::LLM, c.llm, c.llm_sampling);

  c.llm_runs = get_or<int>(j, "llm_runs", c.llm_runs, "config");
  c.mode = parse_replay_mode(get_or<std::string>(j, "mode", std::string(to_string(c.mode)), "config"));
  if (const auto it = j.find("oracle"); it != j.end()) {
    check_keys(*it, {"enabled", "k", "show_captions", "static_dir"}, "config.oracle");
    c.oracle_enabled = get_or<bool>(*it, "enabled", false, "config.oracle");
    c.oracle_k = get_or<int>(*it, "k", c.oracle_k, "config.oracle");
    c.oracle_show_captions = get_or<bool>(*it, "show_captions", false, "config.oracle");
    if (const auto s = get_or<std::string>(*it, "static_dir", "", "config.oracle"); !s.empty()) {
      c.oracle_static_dir = resolve(base_dir, s);
    }
  }
  c.output_dir = resolve(base_dir, get_or<std::string>(j, "output_dir", c.output_dir.string(), "config"));
  if (const auto journal = get_or<std::string>(j, "journal", "", "config"); !journal.empty()) {
    c.journal = resolve(base_dir, journal);
  }
  if (const auto clock = get_or<std::string>(j, "fixed_clock", "", "config"); !clock.empty()) c.fixed_clock = clock;
  c.flip_order = get_or<bool>(j, "flip_order", false, "config");
  c.parallelism = get_or<int>(j, "parallelism", c.parallelism, "config");
  c.description_sharing =
      parse_description_sharing(get_or<std::string>(j, "description_sharing", "per_image", "config"));
  c.min_category_share = get_or<double>(j, "min_category_share", c.min_category_share, "config");
  c.validate();
  return c;
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(fmt::format("{}: {}", path.string(), e.what()));
  }
  return experiment_config_from_json(j, fs::absolute(path).parent_path());
}

json experiment_config_to_json(const ExperimentConfig& c) {
  json dataset{{"metadata", c.metadata.string()}, {"images_root", c.images_root.string()}};
  if (c.categories) dataset["categories"] = c.categories->string();
  json tagger{{"backend", c.tagger_backend}};
  if (!c.tagger_argument.empty()) {
    tagger[c.tagger_backend == "external" ? "command" : "lexicon"] = c.tagger_argument;
  }
  json prompts{{"variant", c.prompt_variant}};
  if (c.prompt_templates) prompts["templates"] = c.prompt_templates->string();
  json oracle{{"enabled", c.oracle_enabled}, {"k", c.oracle_k}, {"show_captions", c.oracle_show_captions}};
  if (c.oracle_static_dir) oracle["static_dir"] = c.oracle_static_dir->string();
  json j{{"name", c.name},
         {"dataset", dataset},
         {"tagger", tagger},
         {"prompts", prompts},
         {"vlm", {{"endpoint", endpoint_to_json(c.vlm)}, {"sampling", sampling_to_json(c.vlm_sampling)}}},
         {"llm", {{"endpoint", endpoint_to_json(c.llm)}, {"sampling", sampling_to_json(c.llm_sampling)}}},
         {"llm_runs", c.llm_runs},
         {"mode", to_string(c.mode)},
         {"oracle", oracle},
         {"output_dir", c.output_dir.string()},
         {"journal", c.journal_path().string()},
         {"flip_order", c.flip_order},
         {"parallelism", c.parallelism},
         {"description_sharing", to_string(c.description_sharing)},
         {"min_category_share", c.min_category_share}};
  if (c.fixed_clock) j["fixed_clock"] = *c.fixed_clock;
  return j;
}

ExperimentContext::ExperimentContext(ExperimentConfig config, const RunHooks& hooks) : config_(std::move(config)) {
  config_.validate();
  items_ = load_dataset(config_.metadata, config_.images_root);
  if (config_.categories) categories_ = load_categories(*config_.categories);
  registry_ = config_.prompt_templates ? PromptRegistry::from_file(*config_.prompt_templates) : PromptRegistry::defaults();
  variant_ = &registry_.lookup(config_.prompt_variant);
  if (!variant_->is_direct()) config_.llm.validate();
  if (variant_->is_direct() && config_.oracle_enabled) {
    throw ConfigError(fmt::format("config: variant {} answers directly and has no descriptions to choose from",
                                  variant_->id));
  }
  tagger_ = hooks.tagger ? hooks.tagger : make_tagger(config_.tagger_backend, config_.tagger_argument);

  GatewayOptions options;
  options.mode = config_.mode;
  options.store = std::make_shared<TranscriptStore>(config_.journal_path());
  options.clock = config_.fixed_clock ? Clock::fixed(*config_.fixed_clock) : Clock::system();
  options.sleeper = hooks.sleeper;
  gateway_ = std::make_unique<Gateway>(std::move(options));
  if (hooks.vlm_transport) gateway_->attach(config_.vlm, hooks.vlm_transport);
  if (hooks.llm_transport) gateway_->attach(config_.llm, hooks.llm_transport);
}

PromptInstance ExperimentContext::description_prompt(std::span<const std::string> captions) const {
  return build_description_prompt(*variant_->description, extract_keywords(captions, *tagger_));
}

PromptInstance ExperimentContext::description_prompt(const WinogroundItem& item) const {
  const std::array<std::string, 2> captions{item.caption_0, item.caption_1};
  return description_prompt(captions);
}

std::vector<ModelTranscript> ExperimentContext::description_samples(const WinogroundItem& item, int image_index,
                                                                    int k) {
  SamplingParams params = config_.vlm_sampling;
  return gateway_->sample_descriptions(config_.vlm, item.image(image_index), description_prompt(item), k, params);
}

RunReport run_experiment(const ExperimentConfig& config, const RunHooks& hooks) {
  ExperimentContext ctx(config, hooks);
  const ExperimentConfig& cfg = ctx.config();
  const auto& items = ctx.items();
  const PromptVariant& variant = ctx.variant();
  Gateway& gateway = ctx.gateway();
  const std::size_t n = items.size();
  const int runs = cfg.llm_runs;
  const bool flip = cfg.flip_order;

  fs::create_directories(cfg.output_dir);
  write_file(cfg.output_dir / "config.snapshot", experiment_config_to_json(cfg).dump(2) + "\n");

  std::unique_ptr<OracleStore> oracle;
  if (cfg.oracle_enabled) {
    oracle = std::make_unique<OracleStore>(cfg.selections_path());
    std::size_t missing = 0;
    for (const auto& item : items) {
      for (int j = 0; j < 2; ++j) missing += oracle->find(item.id, j) ? 0 : 1;
    }
    if (missing > 0) {
      throw ConfigError(fmt::format("oracle selections missing for {} of {} images in {}; collect them with "
                                    "`keycomp oracle serve` first",
                                    missing, 2 * n, cfg.selections_path().string()));
    }
  } else if (!fs::exists(cfg.selections_path())) {
    write_file(cfg.selections_path(), "");
  }

  std::vector<ItemDescriptions> descriptions(n);
  // answers[item][sub-question][run]
  std::vector<std::array<std::vector<SubAnswer>, 4>> answers(n);
  for (auto& a : answers) {
    for (auto& q : a) q.resize(static_cast<std::size_t>(runs));
  }
  std::vector<std::atomic<int>> units_done(n);

  auto llm_params = [&](int run) {
    SamplingParams p = cfg.llm_sampling;
    p.sample_index = run;
    return p;
  };

  auto answer_sub_question = [&](std::size_t i, int q) {
    const WinogroundItem& item = items[i];
    const bool text_task = q == kCaptionForI0 || q == kCaptionForI1;
    const int a = text_task ? q - kCaptionForI0 : q - kImageForC0;
    const OptionLabels labels = text_task ? OptionLabels::captions() : OptionLabels::images();
    const int first = flip ? 1 : 0;
    const int second = 1 - first;
    for (int r = 0; r < runs; ++r) {
      PromptInstance prompt;
      ModelTranscript t;
      if (variant.is_direct()) {
        SamplingParams p = cfg.vlm_sampling;
        p.sample_index = r;
        if (text_task) {
          prompt = build_direct_text_prompt(*variant.direct_text, item.caption(first), item.caption(second), labels);
          t = gateway.ask_vlm(cfg.vlm, std::span<const ImageRef>(&item.image(a), 1), prompt, p);
        } else {
          prompt = build_direct_image_prompt(*variant.direct_image, item.caption(a));
          const std::array<ImageRef, 2> shown{item.image(first), item.image(second)};
          t = gateway.ask_vlm(cfg.vlm, shown, prompt, p);
        }
      } else if (text_task) {
        prompt = build_text_task_prompt(*variant.text_task, descriptions[i].text_task[a], item.caption(first),
                                        item.caption(second), labels);
        t = gateway.complete(cfg.llm, prompt, llm_params(r));
      } else {
        const auto& d = descriptions[i].image_task[a];
        prompt = build_image_task_prompt(*variant.image_task, item.caption(a), d[first], d[second], labels);
        t = gateway.complete(cfg.llm, prompt, llm_params(r));
      }
      const Selection display = extract_selection(t.response_text, labels.first, labels.second);
      answers[i][q][r] = SubAnswer{prompt.template_id, t.key, t.response_text, to_index_space(display, flip)};
    }
    ++units_done[i];
  };

  auto describe_item = [&](std::size_t i) {
    const WinogroundItem& item = items[i];
    ItemDescriptions& d = descriptions[i];
    if (oracle) {
      for (int j = 0; j < 2; ++j) {
        const auto chosen = oracle->find(item.id, j);
        if (chosen->chosen_sample_index >= cfg.oracle_k) {
          throw ValidationError(fmt::format("item {} image {}: chosen sample {} is outside k = {}", item.id, j,
                                            chosen->chosen_sample_index, cfg.oracle_k));
        }
        const auto samples = ctx.description_samples(item, j, cfg.oracle_k);
        d.text_task[j] = samples[static_cast<std::size_t>(chosen->chosen_sample_index)].response_text;
      }
      d.image_task = {d.text_task, d.text_task};
      return;
    }
    const PromptInstance shared = ctx.description_prompt(item);
    for (int j = 0; j < 2; ++j) {
      d.text_task[j] = gateway.describe_image(cfg.vlm, item.image(j), shared, cfg.vlm_sampling).response_text;
    }
    if (cfg.description_sharing == DescriptionSharing::PerImage) {
      d.image_task = {d.text_task, d.text_task};
      return;
    }
    for (int a = 0; a < 2; ++a) {
      const std::array<std::string, 1> caption{item.caption(a)};
      const PromptInstance single = ctx.description_prompt(caption);
      for (int j = 0; j < 2; ++j) {
        d.image_task[a][j] = gateway.describe_image(cfg.vlm, item.image(j), single, cfg.vlm_sampling).response_text;
      }
    }
  };

  WorkQueue queue(cfg.parallelism);
  for (std::size_t i = 0; i < n; ++i) {
    queue.push([&, i] {
      if (!variant.is_direct()) describe_item(i);
      for (int q = 0; q < 4; ++q) queue.push([&, i, q] { answer_sub_question(i, q); });
    });
  }
  try {
    queue.run();
  } catch (const Error& e) {
    const bool gateway_failure = dynamic_cast<const TransportError*>(&e) != nullptr ||
                                 dynamic_cast<const ModelError*>(&e) != nullptr ||
                                 dynamic_cast<const ReplayMissError*>(&e) != nullptr;
    if (!gateway_failure) throw;
    Checkpoint cp;
    cp.total_items = n;
    cp.error = e.what();
    for (std::size_t i = 0; i < n; ++i) {
      if (units_done[i].load() == 4) cp.completed_items.push_back(items[i].id);
    }
    const json j{{"completed_items", cp.completed_items}, {"total_items", cp.total_items}, {"error", cp.error}};
    write_file(cfg.output_dir / "checkpoint.json", j.dump(2) + "\n");
    throw RunAborted(fmt::format("run aborted after {} of {} items: {} (re-run to resume; completed calls are "
                                 "served from {})",
                                 cp.completed_items.size(), n, e.what(), cfg.journal_path().string()),
                     std::move(cp));
  }

  std::vector<std::vector<ItemScore>> per_run(static_cast<std::size_t>(runs));
  std::string answers_log;
  for (int r = 0; r < runs; ++r) {
    for (std::size_t i = 0; i < n; ++i) {
      std::array<Selection, 4> subs;
      for (int q = 0; q < 4; ++q) {
        const SubAnswer& s = answers[i][q][r];
        subs[q] = s.selection;
        answers_log += json{{"run", r},
                            {"item_id", items[i].id},
                            {"sub_question", q},
                            {"template", s.prompt_id},
                            {"transcript", s.key},
                            {"choice", to_string(s.selection.value)},
                            {"span", s.selection.matched_span ? json(*s.selection.matched_span) : json(nullptr)}}
                           .dump();
        answers_log += '\n';
      }
      per_run[r].push_back(score_item(items[i].id, subs));
    }
  }
  std::vector<std::string> run_ids;
  for (int r = 0; r < runs; ++r) run_ids.push_back(fmt::format("run-{}", r));

  RunReport report = aggregate(per_run, run_ids);
  report.label = variant.id;
  report.metadata["name"] = cfg.name;
  report.metadata["prompt_variant"] = variant.id;
  report.metadata["vlm_model"] = cfg.vlm.model_name;
  if (!variant.is_direct()) report.metadata["llm_model"] = cfg.llm.model_name;
  report.metadata["tagger"] = ctx.tagger().name();
  report.metadata["description_sharing"] = std::string(to_string(cfg.description_sharing));
  report.metadata["flip_order"] = cfg.flip_order ? "true" : "false";
  report.metadata["llm_runs"] = std::to_string(runs);
  if (cfg.oracle_enabled) report.metadata["oracle_k"] = std::to_string(cfg.oracle_k);
  if (cfg.categories) report.breakdown = category_breakdown(report, ctx.categories(), cfg.min_category_share);
  report.generated_at = (cfg.fixed_clock ? Clock::fixed(*cfg.fixed_clock) : Clock::system()).now();

  write_file(cfg.output_dir / "answers.jsonl", answers_log);
  write_file(cfg.output_dir / "report.json", render_json(report));
  const std::array<RunReport, 1> one{report};
  write_file(cfg.output_dir / "report.csv", render_csv(one));
  write_file(cfg.output_dir / "report.md", render_markdown(one));
  fs::remove(cfg.output_dir / "checkpoint.json");
  return report;
}

AblationTable run_ablation(const std::vector<ExperimentConfig>& configs, const RunHooks& hooks) {
  if (configs.size() < 2) throw ConfigError("an ablation needs at least two configs");
  const std::string reference = dataset_fingerprint(load_dataset(configs[0].metadata, configs[0].images_root));
  for (std::size_t c = 1; c < configs.size(); ++c) {
    if (dataset_fingerprint(load_dataset(configs[c].metadata, configs[c].images_root)) != reference) {
      throw ValidationError(fmt::format("config {} ('{}') uses a different dataset than config 0 ('{}')", c,
                                        configs[c].name, configs[0].name));
    }
  }

  auto varies = [&](auto field) {
    for (const auto& c : configs) {
      if (field(c) != field(configs[0])) return true;
    }
    return false;
  };
  const bool by_variant = varies([](const ExperimentConfig& c) { return c.prompt_variant; });
  const bool by_vlm = varies([](const ExperimentConfig& c) { return c.vlm.model_name; });
  const bool by_llm = varies([](const ExperimentConfig& c) { return c.llm.model_name; });

  AblationTable table;
  std::set<std::string> seen;
  for (const auto& config : configs) {
    AblationRow row;
    std::vector<std::string> parts;
    if (by_variant) parts.push_back(config.prompt_variant);
    if (by_vlm) parts.push_back(config.vlm.model_name);
    if (by_llm) parts.push_back(config.llm.model_name);
    row.label = parts.empty() ? config.name : fmt::format("{}", fmt::join(parts, " + "));
    if (!seen.insert(row.label).second) row.label = fmt::format("{} #{}", row.label, table.rows.size());
    row.report = run_experiment(config, hooks);
    row.report.label = row.label;
    table.rows.push_back(std::move(row));
  }
  const RunReport& base = table.rows.front().report;
  for (auto& row : table.rows) {
    row.delta_text = row.report.text.mean - base.text.mean;
    row.delta_image = row.report.image.mean - base.image.mean;
    row.delta_group = row.report.group.mean - base.group.mean;
  }
  return table;
}

std::string render_ablation_markdown(const AblationTable& table) {
  std::string out = "| Config | Text | Image | Group | ΔText | ΔImage | ΔGroup |\n|---|---|---|---|---|---|---|\n";
  auto delta = [](double d) { return fmt::format("{:+.1f}", round1(d)); };
  for (const auto& row : table.rows) {
    out += fmt::format("| {} | {} | {} | {} | {} | {} | {} |\n", row.label, format_stat(row.report.text),
                       format_stat(row.report.image), format_stat(row.report.group), delta(row.delta_text),
                       delta(row.delta_image), delta(row.delta_group));
  }
  return out;
}

json ablation_to_json(const AblationTable& table) {
  json rows = json::array();
  for (const auto& row : table.rows) {
    json r = report_to_json(row.report);
    r.erase("per_item");
    rows.push_back({{"label", row.label},
                    {"report", std::move(r)},
                    {"delta",
                     {{"text", round1(row.delta_text)},
                      {"image", round1(row.delta_image)},
                      {"group", round1(row.delta_group)}}}});
  }
  return json{{"rows", std::move(rows)}};
}

}  // namespace keycomp
