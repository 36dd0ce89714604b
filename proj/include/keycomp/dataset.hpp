#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace keycomp {

/// An image as the dataset names it, plus where it was found on disk.
struct ImageRef {
  std::string reference;            // as written in the metadata file
  std::filesystem::path path;       // resolved against images_root
  std::string digest;               // sha256 of the bytes; empty if unreadable

  bool operator==(const ImageRef&) const = default;
};

/// One benchmark item: two image-caption pairs (image_0, caption_0), (image_1, caption_1).
struct WinogroundItem {
  long long id = 0;
  std::string caption_0;
  std::string caption_1;
  ImageRef image_0;
  ImageRef image_1;
  std::set<std::string> tags;

  const std::string& caption(int index) const { return index == 0 ? caption_0 : caption_1; }
  const ImageRef& image(int index) const { return index == 0 ? image_0 : image_1; }

  bool operator==(const WinogroundItem&) const = default;
};

enum class Category {
  NonCompositional,
  AmbiguouslyCorrect,
  VisuallyDifficult,
  UnusualImage,
  UnusualText,
  ComplexReasoning,
  NoTag,
};

inline constexpr Category kAllCategories[] = {
    Category::NonCompositional, Category::AmbiguouslyCorrect, Category::VisuallyDifficult,
    Category::UnusualImage,     Category::UnusualText,        Category::ComplexReasoning,
    Category::NoTag,
};

std::string_view to_string(Category category);

/// Accepts the canonical name ("ComplexReasoning") and spaced or dashed
/// spellings ("Complex Reasoning", "complex-reasoning"), case-insensitively.
std::optional<Category> parse_category(std::string_view label);

/// Primary question category per item id. Ids without a record are NoTag.
class CategoryMap {
 public:
  CategoryMap() = default;

  /// Throws ValidationError when `id` already has a category.
  void insert(long long id, Category category);
  Category at(long long id) const;
  std::size_t size() const { return entries_.size(); }
  const std::map<long long, Category>& entries() const { return entries_; }

 private:
  std::map<long long, Category> entries_;
};

enum class WarningCode {
  MissingImage,
  EmptyCaption,
  DuplicateId,
  CaptionWordSetMismatch,
};

std::string_view to_string(WarningCode code);
bool is_fatal(WarningCode code);

struct ValidationWarning {
  WarningCode code;
  std::string message;

  bool operator==(const ValidationWarning&) const = default;
};

struct ValidationReport {
  long long item_id = 0;
  std::vector<ValidationWarning> warnings;
  bool is_fatal = false;

  bool operator==(const ValidationReport&) const = default;
};

/// Reads line-delimited JSON metadata. Image references are resolved against
/// `images_root` (a bare stem such as "ex_0_img_0" also matches .png/.jpg/.jpeg)
/// and digested. Blank lines are skipped. Throws LoadError, ParseError (with the
/// 1-based line number) or ValidationError for fatal findings.
std::vector<WinogroundItem> load_dataset(const std::filesystem::path& metadata_path,
                                         const std::filesystem::path& images_root);

/// Inverse of load_dataset for the metadata fields: one JSON object per line.
std::string serialize_dataset(const std::vector<WinogroundItem>& items);

/// Either a JSON object {"<id>": "<label>", ...} or a two-column CSV `id,label`
/// with an optional header row.
CategoryMap load_categories(const std::filesystem::path& path);

/// Pure per-item checks. Captions that are not reorderings of each other only
/// produce an advisory CAPTION_WORD_SET_MISMATCH.
ValidationReport validate_item(const WinogroundItem& item);

/// Lowercased words with ASCII punctuation removed, sorted.
std::vector<std::string> caption_word_multiset(std::string_view caption);

}  // namespace keycomp
