#include "keycomp/dataset.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cctype>
#include <fstream>
#include <json.hpp>
#include <sstream>
#include <unordered_set>

#include "keycomp/digest.hpp"
#include "keycomp/error.hpp"

namespace keycomp {

namespace {

using json = nlohmann::json;

std::string trim(std::string_view s) {
  auto is_space = [](unsigned char c) { return std::isspace(c) != 0; };
  auto b = std::find_if_not(s.begin(), s.end(), is_space);
  auto e = std::find_if_not(s.rbegin(), s.rend(), is_space).base();
  return b < e ? std::string(b, e) : std::string();
}

std::string normalize_label(std::string_view label) {
  std::string out;
  for (unsigned char c : label) {
    if (std::isalnum(c)) out.push_back(static_cast<char>(std::tolower(c)));
  }
  return out;
}

ImageRef resolve_image(const std::string& reference, const std::filesystem::path& root) {
  ImageRef ref;
  ref.reference = reference;
  const std::filesystem::path base = root / reference;
  std::vector<std::filesystem::path> candidates{base};
  if (!base.has_extension()) {
    for (const char* ext : {".png", ".jpg", ".jpeg"}) {
      candidates.push_back(std::filesystem::path(base).concat(ext));
    }
  }
  ref.path = base;
  for (const auto& candidate : candidates) {
    std::error_code ec;
    if (std::filesystem::is_regular_file(candidate, ec)) {
      ref.path = candidate;
      try {
        ref.digest = sha256_file(candidate);
      } catch (const LoadError&) {
        ref.digest.clear();
      }
      break;
    }
  }
  return ref;
}

long long parse_id(const json& value, std::size_t line) {
  if (value.is_number_integer()) return value.get<long long>();
  if (value.is_string()) {
    const auto& s = value.get_ref<const std::string&>();
    std::size_t used = 0;
    try {
      long long id = std::stoll(s, &used);
      if (used == s.size()) return id;
    } catch (const std::exception&) {
    }
  }
  throw ParseError(fmt::format("line {}: field 'id' must be an integer", line), line);
}

std::string required_string(const json& obj, const char* key, std::size_t line) {
  auto it = obj.find(key);
  if (it == obj.end()) {
    throw ParseError(fmt::format("line {}: missing required field '{}'", line, key), line);
  }
  if (!it->is_string()) {
    throw ParseError(fmt::format("line {}: field '{}' must be a string", line, key), line);
  }
  return it->get<std::string>();
}

void collect_tags(const json& obj, std::set<std::string>& tags) {
  for (const char* key : {"tag", "secondary_tag", "collapsed_tag"}) {
    auto it = obj.find(key);
    if (it != obj.end() && it->is_string() && !it->get_ref<const std::string&>().empty()) {
      tags.insert(it->get<std::string>());
    }
  }
  auto it = obj.find("tags");
  if (it != obj.end() && it->is_array()) {
    for (const auto& t : *it) {
      if (t.is_string()) tags.insert(t.get<std::string>());
    }
  }
}

std::string describe_fatal(const ValidationReport& report) {
  std::string msg = fmt::format("item {}:", report.item_id);
  for (const auto& w : report.warnings) {
    if (is_fatal(w.code)) msg += fmt::format(" {} ({})", to_string(w.code), w.message);
  }
  return msg;
}

}  // namespace

std::string_view to_string(Category category) {
  switch (category) {
    case Category::NonCompositional: return "NonCompositional";
    case Category::AmbiguouslyCorrect: return "AmbiguouslyCorrect";
    case Category::VisuallyDifficult: return "VisuallyDifficult";
    case Category::UnusualImage: return "UnusualImage";
    case Category::UnusualText: return "UnusualText";
    case Category::ComplexReasoning: return "ComplexReasoning";
    case Category::NoTag: return "NoTag";
  }
  return "NoTag";
}

std::optional<Category> parse_category(std::string_view label) {
  const std::string wanted = normalize_label(label);
  for (Category c : kAllCategories) {
    if (normalize_label(to_string(c)) == wanted) return c;
  }
  return std::nullopt;
}

void CategoryMap::insert(long long id, Category category) {
  if (!entries_.emplace(id, category).second) {
    throw ValidationError(fmt::format("category map: id {} has more than one category", id));
  }
}

Category CategoryMap::at(long long id) const {
  auto it = entries_.find(id);
  return it == entries_.end() ? Category::NoTag : it->second;
}

std::string_view to_string(WarningCode code) {
  switch (code) {
    case WarningCode::MissingImage: return "MISSING_IMAGE";
    case WarningCode::EmptyCaption: return "EMPTY_CAPTION";
    case WarningCode::DuplicateId: return "DUPLICATE_ID";
    case WarningCode::CaptionWordSetMismatch: return "CAPTION_WORD_SET_MISMATCH";
  }
  return "UNKNOWN";
}

bool is_fatal(WarningCode code) { return code != WarningCode::CaptionWordSetMismatch; }

std::vector<std::string> caption_word_multiset(std::string_view caption) {
  std::string cleaned;
  cleaned.reserve(caption.size());
  for (unsigned char c : caption) {
    if (std::ispunct(c)) continue;
    cleaned.push_back(static_cast<char>(std::tolower(c)));
  }
  std::vector<std::string> words;
  std::istringstream in(cleaned);
  for (std::string w; in >> w;) words.push_back(std::move(w));
  std::sort(words.begin(), words.end());
  return words;
}

ValidationReport validate_item(const WinogroundItem& item) {
  ValidationReport report;
  report.item_id = item.id;
  auto add = [&](WarningCode code, std::string message) {
    report.warnings.push_back({code, std::move(message)});
    report.is_fatal = report.is_fatal || is_fatal(code);
  };

  for (int i = 0; i < 2; ++i) {
    if (trim(item.caption(i)).empty()) add(WarningCode::EmptyCaption, fmt::format("caption_{} is empty", i));
  }
  for (int i = 0; i < 2; ++i) {
    const ImageRef& img = item.image(i);
    std::error_code ec;
    if (img.digest.empty() || !std::filesystem::is_regular_file(img.path, ec)) {
      add(WarningCode::MissingImage,
          fmt::format("image_{} '{}' not readable at {}", i, img.reference, img.path.string()));
    }
  }
  if (caption_word_multiset(item.caption_0) != caption_word_multiset(item.caption_1)) {
    add(WarningCode::CaptionWordSetMismatch, "captions are not reorderings of the same words");
  }
  return report;
}

std::vector<WinogroundItem> load_dataset(const std::filesystem::path& metadata_path,
                                         const std::filesystem::path& images_root) {
  std::ifstream in(metadata_path);
  if (!in) throw LoadError("cannot open dataset metadata " + metadata_path.string());

  std::vector<WinogroundItem> items;
  std::unordered_set<long long> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(fmt::format("{}:{}: {}", metadata_path.string(), line_no, e.what()), line_no);
    }
    if (!obj.is_object()) {
      throw ParseError(fmt::format("{}:{}: expected a JSON object", metadata_path.string(), line_no),
                       line_no);
    }
    auto id_it = obj.find("id");
    if (id_it == obj.end()) {
      throw ParseError(fmt::format("line {}: missing required field 'id'", line_no), line_no);
    }

    WinogroundItem item;
    item.id = parse_id(*id_it, line_no);
    item.caption_0 = required_string(obj, "caption_0", line_no);
    item.caption_1 = required_string(obj, "caption_1", line_no);
    item.image_0 = resolve_image(required_string(obj, "image_0", line_no), images_root);
    item.image_1 = resolve_image(required_string(obj, "image_1", line_no), images_root);
    collect_tags(obj, item.tags);

    if (!seen.insert(item.id).second) {
      throw ValidationError(fmt::format("item {}: DUPLICATE_ID (line {})", item.id, line_no));
    }
    ValidationReport report = validate_item(item);
    if (report.is_fatal) throw ValidationError(describe_fatal(report));
    items.push_back(std::move(item));
  }
  if (in.bad()) throw LoadError("read failure on " + metadata_path.string());
  return items;
}

std::string serialize_dataset(const std::vector<WinogroundItem>& items) {
  std::string out;
  for (const auto& item : items) {
    json obj{{"id", item.id},
             {"caption_0", item.caption_0},
             {"caption_1", item.caption_1},
             {"image_0", item.image_0.reference},
             {"image_1", item.image_1.reference}};
    if (!item.tags.empty()) obj["tags"] = item.tags;
    out += obj.dump();
    out += '\n';
  }
  return out;
}

CategoryMap load_categories(const std::filesystem::path& path) {
  const std::string text = read_file(path);
  CategoryMap map;

  auto insert_label = [&](long long id, const std::string& label, std::size_t line) {
    auto category = parse_category(label);
    if (!category) {
      std::string valid;
      for (Category c : kAllCategories) {
        if (!valid.empty()) valid += ", ";
        valid += to_string(c);
      }
      throw ParseError(fmt::format("{}: unknown category label '{}' (valid: {})", path.string(), label, valid),
                       line);
    }
    map.insert(id, *category);
  };

  const std::string head = trim(text);
  if (!head.empty() && head.front() == '{') {
    // Duplicate keys would silently collapse in a plain parse; watch top-level keys.
    std::set<std::string> keys;
    std::string duplicate;
    json::parser_callback_t cb = [&](int depth, json::parse_event_t event, json& parsed) {
      if (event == json::parse_event_t::key && depth == 1) {
        const auto key = parsed.get<std::string>();
        if (!keys.insert(key).second && duplicate.empty()) duplicate = key;
      }
      return true;
    };
    json obj;
    try {
      obj = json::parse(text, cb);
    } catch (const json::parse_error& e) {
      throw ParseError(fmt::format("{}: {}", path.string(), e.what()));
    }
    if (!duplicate.empty()) {
      throw ValidationError(fmt::format("category map: id {} has more than one category", duplicate));
    }
    for (const auto& [key, value] : obj.items()) {
      if (!value.is_string()) throw ParseError(fmt::format("{}: label for id {} is not a string", path.string(), key));
      insert_label(parse_id(json(key), 0), value.get<std::string>(), 0);
    }
    return map;
  }

  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) {
      throw ParseError(fmt::format("{}:{}: expected 'id,label'", path.string(), line_no), line_no);
    }
    const std::string id_text = trim(std::string_view(line).substr(0, comma));
    const std::string label = trim(std::string_view(line).substr(comma + 1));
    if (line_no == 1 && normalize_label(id_text) == "id") continue;  // header
    long long id = 0;
    try {
      id = parse_id(json(id_text), line_no);
    } catch (const ParseError&) {
      throw ParseError(fmt::format("{}:{}: id '{}' is not an integer", path.string(), line_no, id_text), line_no);
    }
    insert_label(id, label, line_no);
  }
  return map;
}

}  // namespace keycomp
