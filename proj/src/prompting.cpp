#include "keycomp/prompting.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <set>

#include "keycomp/digest.hpp"
#include "keycomp/error.hpp"

namespace keycomp {

namespace {

bool is_slot_char(char c) { return (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '_'; }

bool is_known_slot(std::string_view name) {
  return std::find(std::begin(kSlotNames), std::end(kSlotNames), name) != std::end(kSlotNames);
}

// Calls visit(begin, end, name) for each `{NAME}` marker whose name is made of slot characters.
template <typename Visit>
void scan_markers(std::string_view body, Visit visit) {
  std::size_t i = 0;
  while ((i = body.find('{', i)) != std::string_view::npos) {
    std::size_t j = i + 1;
    while (j < body.size() && is_slot_char(body[j])) ++j;
    if (j > i + 1 && j < body.size() && body[j] == '}') {
      visit(i, j + 1, body.substr(i + 1, j - i - 1));
      i = j + 1;
    } else {
      ++i;
    }
  }
}

std::string strip_trailing_whitespace(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  std::size_t pos = 0;
  while (pos <= text.size()) {
    auto nl = text.find('\n', pos);
    const bool last = nl == std::string_view::npos;
    std::string_view line = text.substr(pos, last ? std::string_view::npos : nl - pos);
    while (!line.empty() && (line.back() == ' ' || line.back() == '\t' || line.back() == '\r')) line.remove_suffix(1);
    out.append(line);
    if (last) break;
    out.push_back('\n');
    pos = nl + 1;
  }
  while (!out.empty() && (out.back() == '\n' || out.back() == ' ' || out.back() == '\t')) out.pop_back();
  return out;
}

struct SlotRules {
  std::set<std::string_view> legal;
  std::set<std::string_view> required;
};

SlotRules rules_for(const PromptTemplate& t) {
  switch (t.kind) {
    case TemplateKind::Description:
      return {{"INSTRUCTION", "KEYWORDS"}, {}};
    case TemplateKind::TextTask:
      return {{"INSTRUCTION", "DESC_A", "CAPTION_0", "CAPTION_1", "EXPLAIN"}, {"DESC_A", "CAPTION_0", "CAPTION_1"}};
    case TemplateKind::ImageTask:
      return {{"INSTRUCTION", "CAPTION_A", "DESC_0", "DESC_1", "EXPLAIN"}, {"CAPTION_A", "DESC_0", "DESC_1"}};
    case TemplateKind::DirectVLM:
      if (t.task == Task::Image) return {{"INSTRUCTION", "CAPTION_A", "EXPLAIN"}, {"CAPTION_A"}};
      return {{"INSTRUCTION", "CAPTION_0", "CAPTION_1", "EXPLAIN"}, {"CAPTION_0", "CAPTION_1"}};
  }
  return {};
}

void require_kind(const PromptTemplate& t, TemplateKind kind) {
  if (t.kind != kind) {
    throw TemplateError(fmt::format("template {} has kind {}, expected {}", t.id, to_string(t.kind), to_string(kind)));
  }
}

void bind_attributes(const PromptTemplate& t, std::map<std::string, std::string>& bindings) {
  if (t.instruction) bindings["INSTRUCTION"] = *t.instruction;
  if (t.explain) bindings["EXPLAIN"] = *t.explain;
}

std::string labeled(std::string_view label, std::string_view text) { return fmt::format("{}: {}", label, text); }

bool blank(std::string_view s) {
  return s.find_first_not_of(" \t\r\n") == std::string_view::npos;
}

PromptInstance instantiate(const PromptTemplate& t, std::map<std::string, std::string> bindings) {
  PromptInstance inst;
  inst.template_id = t.id;
  inst.rendered = render_template(t, bindings);
  // Keep only bindings the body actually uses, so equal renders carry equal bindings.
  const auto used = t.referenced_slots();
  for (auto it = bindings.begin(); it != bindings.end();) {
    if (std::find(used.begin(), used.end(), it->first) == used.end()) {
      it = bindings.erase(it);
    } else {
      ++it;
    }
  }
  inst.bindings = std::move(bindings);
  return inst;
}

std::optional<TemplateKind> parse_kind(std::string_view s) {
  for (auto k : {TemplateKind::Description, TemplateKind::TextTask, TemplateKind::ImageTask, TemplateKind::DirectVLM}) {
    if (s == to_string(k)) return k;
  }
  return std::nullopt;
}

std::vector<std::string_view> split_ws(std::string_view s) {
  std::vector<std::string_view> parts;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && (s[i] == ' ' || s[i] == '\t')) ++i;
    std::size_t j = i;
    while (j < s.size() && s[j] != ' ' && s[j] != '\t') ++j;
    if (j > i) parts.push_back(s.substr(i, j - i));
    i = j;
  }
  return parts;
}

}  // namespace

std::string_view to_string(TemplateKind kind) {
  switch (kind) {
    case TemplateKind::Description: return "Description";
    case TemplateKind::TextTask: return "TextTask";
    case TemplateKind::ImageTask: return "ImageTask";
    case TemplateKind::DirectVLM: return "DirectVLM";
  }
  return "Description";
}

std::vector<std::string> PromptTemplate::referenced_slots() const {
  std::vector<std::string> slots;
  scan_markers(body, [&](std::size_t, std::size_t, std::string_view name) { slots.emplace_back(name); });
  return slots;
}

void validate_template(const PromptTemplate& t) {
  if (t.kind == TemplateKind::DirectVLM && !t.task) {
    throw TemplateError(fmt::format("template {}: DirectVLM templates need a task (text or image)", t.id));
  }
  const SlotRules rules = rules_for(t);
  std::map<std::string, int> counts;
  for (const auto& s : t.referenced_slots()) {
    if (!is_known_slot(s)) throw TemplateError(fmt::format("template {}: unknown slot {{{}}}", t.id, s));
    if (!rules.legal.contains(s)) {
      throw TemplateError(fmt::format("template {}: slot {{{}}} is not legal for kind {}", t.id, s, to_string(t.kind)));
    }
    ++counts[s];
  }
  for (auto s : rules.required) {
    if (!counts.contains(std::string(s))) {
      throw TemplateError(fmt::format("template {}: missing required slot {{{}}}", t.id, s));
    }
  }
  // Keyword-free description templates are legal (the no-keyword ablation).
  if (counts["KEYWORDS"] > 1) throw TemplateError(fmt::format("template {}: {{KEYWORDS}} appears more than once", t.id));
  if (counts["INSTRUCTION"] > 0 && !t.instruction) {
    throw TemplateError(fmt::format("template {}: {{INSTRUCTION}} used without an @instruction line", t.id));
  }
  if (counts["EXPLAIN"] > 0 && !t.explain) {
    throw TemplateError(fmt::format("template {}: {{EXPLAIN}} used without an @explain line", t.id));
  }
}

std::string render_template(const PromptTemplate& t, const std::map<std::string, std::string>& bindings) {
  std::string out;
  std::size_t last = 0;
  scan_markers(t.body, [&](std::size_t b, std::size_t e, std::string_view name) {
    if (!is_known_slot(name)) return;
    auto it = bindings.find(std::string(name));
    if (it == bindings.end()) throw TemplateError(fmt::format("template {}: slot {{{}}} is unbound", t.id, name));
    out.append(t.body, last, b - last);
    out.append(it->second);
    last = e;
  });
  out.append(t.body, last, std::string::npos);
  return strip_trailing_whitespace(out);
}

PromptInstance build_description_prompt(const PromptTemplate& t, const KeywordSet& keywords) {
  require_kind(t, TemplateKind::Description);
  std::map<std::string, std::string> bindings;
  bind_attributes(t, bindings);
  std::string joined;
  for (const auto& w : keywords.words) {
    if (!joined.empty()) joined += ", ";
    joined += w;
  }
  bindings["KEYWORDS"] = joined;
  return instantiate(t, std::move(bindings));
}

PromptInstance build_text_task_prompt(const PromptTemplate& t, std::string_view description,
                                      std::string_view caption_0, std::string_view caption_1,
                                      const OptionLabels& labels) {
  require_kind(t, TemplateKind::TextTask);
  if (blank(description)) throw ValidationError(fmt::format("template {}: image description is empty", t.id));
  std::map<std::string, std::string> bindings;
  bind_attributes(t, bindings);
  bindings["DESC_A"] = std::string(description);
  bindings["CAPTION_0"] = labeled(labels.first, caption_0);
  bindings["CAPTION_1"] = labeled(labels.second, caption_1);
  return instantiate(t, std::move(bindings));
}

PromptInstance build_image_task_prompt(const PromptTemplate& t, std::string_view caption, std::string_view desc_0,
                                       std::string_view desc_1, const OptionLabels& labels) {
  require_kind(t, TemplateKind::ImageTask);
  if (blank(desc_0) || blank(desc_1)) {
    throw ValidationError(fmt::format("template {}: image description is empty", t.id));
  }
  std::map<std::string, std::string> bindings;
  bind_attributes(t, bindings);
  bindings["CAPTION_A"] = std::string(caption);
  bindings["DESC_0"] = labeled(labels.first, desc_0);
  bindings["DESC_1"] = labeled(labels.second, desc_1);
  return instantiate(t, std::move(bindings));
}

PromptInstance build_direct_text_prompt(const PromptTemplate& t, std::string_view caption_0,
                                        std::string_view caption_1, const OptionLabels& labels) {
  require_kind(t, TemplateKind::DirectVLM);
  if (t.task != Task::Text) throw TemplateError(fmt::format("template {} is not a text-task template", t.id));
  std::map<std::string, std::string> bindings;
  bind_attributes(t, bindings);
  bindings["CAPTION_0"] = labeled(labels.first, caption_0);
  bindings["CAPTION_1"] = labeled(labels.second, caption_1);
  return instantiate(t, std::move(bindings));
}

PromptInstance build_direct_image_prompt(const PromptTemplate& t, std::string_view caption) {
  require_kind(t, TemplateKind::DirectVLM);
  if (t.task != Task::Image) throw TemplateError(fmt::format("template {} is not an image-task template", t.id));
  std::map<std::string, std::string> bindings;
  bind_attributes(t, bindings);
  bindings["CAPTION_A"] = std::string(caption);
  return instantiate(t, std::move(bindings));
}

const PromptRegistry& PromptRegistry::defaults() {
  static const PromptRegistry registry = from_text(embedded_prompt_config());
  return registry;
}

PromptRegistry PromptRegistry::from_file(const std::filesystem::path& path) { return from_text(read_file(path)); }

PromptRegistry PromptRegistry::from_text(std::string_view text) {
  PromptRegistry reg;
  std::vector<std::pair<std::string, std::string>> aliases;

  struct Block {
    PromptTemplate tmpl;
    std::string variant;
    std::vector<std::string> lines;
    bool in_body = false;
  };
  std::optional<Block> current;

  auto finish = [&]() {
    if (!current) return;
    auto& lines = current->lines;
    while (!lines.empty() && blank(lines.back())) lines.pop_back();
    std::string body;
    for (std::size_t i = 0; i < lines.size(); ++i) {
      if (i) body += '\n';
      body += lines[i];
    }
    current->tmpl.body = std::move(body);
    validate_template(current->tmpl);

    PromptVariant& v = reg.variants_[current->variant];
    v.id = current->variant;
    std::optional<PromptTemplate>* slot = nullptr;
    switch (current->tmpl.kind) {
      case TemplateKind::Description: slot = &v.description; break;
      case TemplateKind::TextTask: slot = &v.text_task; break;
      case TemplateKind::ImageTask: slot = &v.image_task; break;
      case TemplateKind::DirectVLM: slot = current->tmpl.task == Task::Image ? &v.direct_image : &v.direct_text; break;
    }
    if (slot->has_value()) throw TemplateError(fmt::format("template {} defined twice", current->tmpl.id));
    *slot = std::move(current->tmpl);
    current.reset();
  };

  std::size_t pos = 0;
  std::size_t line_no = 0;
  while (pos <= text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    std::string_view line = text.substr(pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (!line.empty() && line.front() == '#') continue;

    if (!line.empty() && line.front() == '[' && line.back() == ']') {
      finish();
      const auto parts = split_ws(line.substr(1, line.size() - 2));
      if (parts.size() == 3 && parts[0] == "alias") {
        aliases.emplace_back(parts[1], parts[2]);
        continue;
      }
      if (parts.size() < 2 || parts.size() > 3) {
        throw ParseError(fmt::format("prompt config line {}: expected [variant-id kind]", line_no), line_no);
      }
      auto kind = parse_kind(parts[1]);
      if (!kind) throw ParseError(fmt::format("prompt config line {}: unknown kind '{}'", line_no, parts[1]), line_no);
      Block b;
      b.variant = std::string(parts[0]);
      b.tmpl.kind = *kind;
      b.tmpl.id = fmt::format("{}/{}", parts[0], parts[1]);
      if (parts.size() == 3) {
        if (*kind != TemplateKind::DirectVLM || (parts[2] != "text" && parts[2] != "image")) {
          throw ParseError(fmt::format("prompt config line {}: only DirectVLM takes a task (text|image)", line_no),
                           line_no);
        }
        b.tmpl.task = parts[2] == "text" ? Task::Text : Task::Image;
        b.tmpl.id += fmt::format("/{}", parts[2]);
      }
      current = std::move(b);
      continue;
    }

    if (!current) {
      if (blank(line)) continue;
      throw ParseError(fmt::format("prompt config line {}: text outside a template block", line_no), line_no);
    }
    if (!current->in_body && !line.empty() && line.front() == '@') {
      const auto space = line.find(' ');
      const std::string_view key = line.substr(1, space == std::string_view::npos ? std::string_view::npos : space - 1);
      const std::string value = space == std::string_view::npos ? std::string() : std::string(line.substr(space + 1));
      if (key == "instruction") {
        current->tmpl.instruction = value;
      } else if (key == "explain") {
        current->tmpl.explain = value;
      } else {
        throw ParseError(fmt::format("prompt config line {}: unknown attribute '@{}'", line_no, key), line_no);
      }
      continue;
    }
    if (!current->in_body && blank(line)) continue;
    current->in_body = true;
    current->lines.emplace_back(line);
  }
  finish();

  for (const auto& [id, v] : reg.variants_) {
    const bool pipeline = v.description && v.text_task && v.image_task;
    const bool direct = v.direct_text && v.direct_image && !v.description && !v.text_task && !v.image_task;
    if (!pipeline && !direct) {
      throw TemplateError(fmt::format(
          "variant {} must define Description, TextTask and ImageTask templates, or both DirectVLM tasks", id));
    }
  }
  for (const auto& [alias, target] : aliases) {
    auto it = reg.variants_.find(target);
    if (it == reg.variants_.end()) throw TemplateError(fmt::format("alias {} points at unknown variant {}", alias, target));
    if (reg.variants_.contains(alias)) throw TemplateError(fmt::format("alias {} shadows an existing variant", alias));
    PromptVariant copy = it->second;
    copy.id = alias;
    reg.variants_.emplace(alias, std::move(copy));
  }
  return reg;
}

const PromptVariant& PromptRegistry::lookup(std::string_view id) const {
  auto it = variants_.find(id);
  if (it == variants_.end()) {
    std::string known;
    for (const auto& k : ids()) {
      if (!known.empty()) known += ", ";
      known += k;
    }
    throw ConfigError(fmt::format("unknown prompt variant '{}' (known: {})", id, known));
  }
  return it->second;
}

std::vector<std::string> PromptRegistry::ids() const {
  std::vector<std::string> out;
  for (const auto& [id, v] : variants_) out.push_back(id);
  return out;
}

}  // namespace keycomp
