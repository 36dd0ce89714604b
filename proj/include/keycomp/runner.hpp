#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "keycomp/dataset.hpp"
#include "keycomp/error.hpp"
#include "keycomp/gateway.hpp"
#include "keycomp/keywords.hpp"
#include "keycomp/prompting.hpp"
#include "keycomp/scoring.hpp"

namespace keycomp {

/// PerImage: one description per image, prompted with the keywords of both
/// captions, reused by the text and the image task.
/// PerTask: the text task uses descriptions prompted with both captions'
/// keywords; the image task question for caption a uses descriptions of both
/// images prompted with caption a's keywords alone.
enum class DescriptionSharing { PerImage, PerTask };
std::string_view to_string(DescriptionSharing sharing);
DescriptionSharing parse_description_sharing(std::string_view s);

struct ExperimentConfig {
  std::string name = "experiment";
  std::filesystem::path metadata;
  std::filesystem::path images_root;
  std::optional<std::filesystem::path> categories;
  std::string tagger_backend = "reference";
  std::string tagger_argument;
  std::string prompt_variant = "V5";
  std::optional<std::filesystem::path> prompt_templates;
  EndpointConfig vlm = EndpointConfig::for_role(Role::VLM);
  SamplingParams vlm_sampling{.temperature = 1.0, .num_beams = 10};
  EndpointConfig llm = EndpointConfig::for_role(Role::LLM);
  SamplingParams llm_sampling{.temperature = 1.0};
  int llm_runs = 3;
  ReplayMode mode = ReplayMode::Record;
  bool oracle_enabled = false;
  int oracle_k = 5;
  bool oracle_show_captions = false;
  std::optional<std::filesystem::path> oracle_static_dir;
  std::filesystem::path output_dir = "runs/experiment";
  std::optional<std::filesystem::path> journal;  // default: <output_dir>/transcripts.jsonl
  std::optional<std::string> fixed_clock;
  bool flip_order = false;
  int parallelism = 4;
  DescriptionSharing description_sharing = DescriptionSharing::PerImage;
  double min_category_share = 5.0;

  /// Throws ConfigError.
  void validate() const;
  std::filesystem::path journal_path() const { return journal ? *journal : output_dir / "transcripts.jsonl"; }
  std::filesystem::path selections_path() const { return output_dir / "selections.jsonl"; }
};

/// JSON config. Relative paths are resolved against `base_dir`. Throws ConfigError.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
/// Canonical form with absolute paths, written to <run dir>/config.snapshot.
nlohmann::json experiment_config_to_json(const ExperimentConfig& config);

/// Test and embedding seams. Unset members fall back to what the config names.
struct RunHooks {
  std::shared_ptr<Transport> vlm_transport;
  std::shared_ptr<Transport> llm_transport;
  std::shared_ptr<const Tagger> tagger;
  Sleeper sleeper;
};

/// Resolved inputs shared by the experiment runner and the oracle service.
class ExperimentContext {
 public:
  ExperimentContext(ExperimentConfig config, const RunHooks& hooks = {});
  ExperimentContext(const ExperimentContext&) = delete;
  ExperimentContext& operator=(const ExperimentContext&) = delete;

  const ExperimentConfig& config() const { return config_; }
  const std::vector<WinogroundItem>& items() const { return items_; }
  const CategoryMap& categories() const { return categories_; }
  const PromptVariant& variant() const { return *variant_; }
  const Tagger& tagger() const { return *tagger_; }
  Gateway& gateway() { return *gateway_; }

  /// Description prompt for the keywords of the given captions.
  PromptInstance description_prompt(std::span<const std::string> captions) const;
  /// Prompt shared by both images of an item under PerImage sharing.
  PromptInstance description_prompt(const WinogroundItem& item) const;

  /// The k candidate descriptions of one image (sample_index 0..k-1).
  std::vector<ModelTranscript> description_samples(const WinogroundItem& item, int image_index, int k);

 private:
  ExperimentConfig config_;
  std::vector<WinogroundItem> items_;
  CategoryMap categories_;
  PromptRegistry registry_;
  const PromptVariant* variant_ = nullptr;
  std::shared_ptr<const Tagger> tagger_;
  std::unique_ptr<Gateway> gateway_;
};

/// Item-level progress written to <run dir>/checkpoint.json when a run aborts.
struct Checkpoint {
  std::vector<long long> completed_items;
  std::size_t total_items = 0;
  std::string error;
};

/// Thrown when a gateway failure stops a run; the journal keeps every
/// completed call, so re-running the same config resumes from the cache.
class RunAborted : public Error {
 public:
  RunAborted(const std::string& what, Checkpoint checkpoint) : Error(what), checkpoint_(std::move(checkpoint)) {}
  const Checkpoint& checkpoint() const { return checkpoint_; }

 private:
  Checkpoint checkpoint_;
};

/// Runs keywords -> descriptions -> selection over every item, llm_runs times
/// for the selection step, and writes config.snapshot, transcripts.jsonl,
/// selections.jsonl, answers.jsonl and report.{json,csv,md} to output_dir.
RunReport run_experiment(const ExperimentConfig& config, const RunHooks& hooks = {});

struct AblationRow {
  std::string label;
  RunReport report;
  double delta_text = 0.0;  // against the first row
  double delta_image = 0.0;
  double delta_group = 0.0;
};

struct AblationTable {
  std::vector<AblationRow> rows;
};

/// Rows are labeled by whatever varies across the configs (prompt variant,
/// VLM model, LLM model), falling back to the config name. Throws ConfigError
/// for fewer than two configs and ValidationError when the datasets differ.
AblationTable run_ablation(const std::vector<ExperimentConfig>& configs, const RunHooks& hooks = {});

std::string render_ablation_markdown(const AblationTable& table);
nlohmann::json ablation_to_json(const AblationTable& table);

}  // namespace keycomp
