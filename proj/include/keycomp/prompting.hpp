#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "keycomp/keywords.hpp"

namespace keycomp {

enum class TemplateKind { Description, TextTask, ImageTask, DirectVLM };

std::string_view to_string(TemplateKind kind);

/// Which Winoground task a DirectVLM template answers.
enum class Task { Text, Image };

/// Slot markers are written `{NAME}` in template bodies.
inline constexpr std::string_view kSlotNames[] = {
    "INSTRUCTION", "KEYWORDS", "CAPTION_A", "CAPTION_0", "CAPTION_1",
    "DESC_A",      "DESC_0",   "DESC_1",    "EXPLAIN",
};

struct PromptTemplate {
  std::string id;  // "<variant>/<kind>", e.g. "V5/TextTask"
  TemplateKind kind = TemplateKind::Description;
  std::optional<Task> task;          // set for DirectVLM only
  std::string body;
  std::optional<std::string> instruction;  // bound to {INSTRUCTION}
  std::optional<std::string> explain;      // bound to {EXPLAIN}

  /// Slot names referenced by the body, in order of appearance, with repeats.
  std::vector<std::string> referenced_slots() const;
};

struct PromptInstance {
  std::string template_id;
  std::string rendered;
  std::map<std::string, std::string> bindings;

  bool operator==(const PromptInstance&) const = default;
};

/// The labels put in front of the two candidates, first then second.
struct OptionLabels {
  std::string first;
  std::string second;

  static OptionLabels captions() { return {"Caption A", "Caption B"}; }
  static OptionLabels images() { return {"Image A", "Image B"}; }
};

/// One ablation variant. Pipeline variants carry Description + TextTask +
/// ImageTask templates; a DirectVLM variant carries one DirectVLM template per
/// task and skips the LLM step entirely.
struct PromptVariant {
  std::string id;
  std::optional<PromptTemplate> description;
  std::optional<PromptTemplate> text_task;
  std::optional<PromptTemplate> image_task;
  std::optional<PromptTemplate> direct_text;
  std::optional<PromptTemplate> direct_image;

  bool is_direct() const { return direct_text.has_value(); }
};

/// Substitutes `{SLOT}` markers, then strips trailing whitespace from every
/// line and from the end of the text. Throws TemplateError for a referenced
/// slot with no binding.
std::string render_template(const PromptTemplate& tmpl, const std::map<std::string, std::string>& bindings);

/// Throws TemplateError when the body references a slot that is illegal for
/// the template kind, misses a required slot, or lacks the attribute behind
/// {INSTRUCTION} / {EXPLAIN}.
void validate_template(const PromptTemplate& tmpl);

/// Keywords are joined with ", " in KeywordSet order at {KEYWORDS}.
PromptInstance build_description_prompt(const PromptTemplate& tmpl, const KeywordSet& keywords);

/// `caption_0` / `caption_1` are the candidates in display order; each is
/// prefixed with its label ("Caption A: ...").
PromptInstance build_text_task_prompt(const PromptTemplate& tmpl, std::string_view description,
                                      std::string_view caption_0, std::string_view caption_1,
                                      const OptionLabels& labels = OptionLabels::captions());

PromptInstance build_image_task_prompt(const PromptTemplate& tmpl, std::string_view caption,
                                       std::string_view desc_0, std::string_view desc_1,
                                       const OptionLabels& labels = OptionLabels::images());

/// DirectVLM, text task: the image is attached, the captions are the options.
PromptInstance build_direct_text_prompt(const PromptTemplate& tmpl, std::string_view caption_0,
                                        std::string_view caption_1,
                                        const OptionLabels& labels = OptionLabels::captions());

/// DirectVLM, image task: both images are attached in display order.
PromptInstance build_direct_image_prompt(const PromptTemplate& tmpl, std::string_view caption);

/// Named variants loaded from a template config file:
///
///   # comment
///   [V5 Description]
///   @instruction Describe this image in detail, paying attention to:
///   {INSTRUCTION} {KEYWORDS}
///
///   [V1 DirectVLM text]
///   ...
///   [alias cot V5]
class PromptRegistry {
 public:
  /// Compiled-in defaults (V1..V5 plus the "cot" and "plain-select" aliases).
  static const PromptRegistry& defaults();
  static PromptRegistry from_file(const std::filesystem::path& path);
  static PromptRegistry from_text(std::string_view text);

  /// Throws ConfigError listing the known ids.
  const PromptVariant& lookup(std::string_view id) const;
  std::vector<std::string> ids() const;

 private:
  std::map<std::string, PromptVariant, std::less<>> variants_;
};

std::string_view embedded_prompt_config();

}  // namespace keycomp
