#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "keycomp/dataset.hpp"

namespace keycomp {

enum class Choice { OptionA, OptionB, Invalid };
std::string_view to_string(Choice choice);
Choice parse_choice(std::string_view s);

/// What a model answer selected, plus the text that decided it.
struct Selection {
  Choice value = Choice::Invalid;
  std::optional<std::string> matched_span;  // null exactly when value is Invalid

  static Selection invalid() { return {}; }
  static Selection pick(Choice value, std::string span);
  bool operator==(const Selection&) const = default;
};

/// Case-insensitive label search. A label only counts when it is not glued to
/// neighbouring letters or digits ("Image A" does not match "image and").
/// One label present: that option. Both present: the final sentence decides,
/// and within it (or, failing that, in the whole text) the last occurrence wins.
Selection extract_selection(std::string_view output, std::string_view label_a, std::string_view label_b);

/// Truth is OptionA for I0 and OptionB for I1.
int score_text_item(const Selection& pick_for_i0, const Selection& pick_for_i1);
/// Truth is OptionA for C0 and OptionB for C1.
int score_image_item(const Selection& pick_for_c0, const Selection& pick_for_c1);
int group_score(int text_bit, int image_bit);

enum SubQuestion : int { kCaptionForI0 = 0, kCaptionForI1 = 1, kImageForC0 = 2, kImageForC1 = 3 };

struct ItemScore {
  long long item_id = 0;
  int text_correct = 0;
  int image_correct = 0;
  int group_correct = 0;
  std::array<Selection, 4> sub_answers;  // indexed by SubQuestion
  int invalid_count = 0;

  bool operator==(const ItemScore&) const = default;
};

ItemScore score_item(long long item_id, const std::array<Selection, 4>& sub_answers);

/// Mean and sample standard deviation of per-run percentages. std is null for a single run.
struct Stat {
  double mean = 0.0;
  std::optional<double> std;

  bool operator==(const Stat&) const = default;
};

Stat summarize_runs(std::span<const double> per_run_percentages);

struct CategoryStats {
  Category category = Category::NoTag;
  std::size_t items = 0;
  double share = 0.0;  // percent of all items
  Stat text;
  Stat image;
  Stat group;
  bool excluded = false;

  bool operator==(const CategoryStats&) const = default;
};

struct RunReport {
  std::string label;                            // variant or model label
  std::map<std::string, std::string> metadata;  // models, prompt variant, tagger, ...
  std::vector<std::string> run_ids;
  std::vector<std::vector<ItemScore>> runs;     // runs[r][i]
  std::size_t item_count = 0;
  Stat text;
  Stat image;
  Stat group;
  double invalid_rate = 0.0;       // percent of sub-answers
  double invalid_item_rate = 0.0;  // percent of (item, run) pairs with any invalid sub-answer
  std::vector<CategoryStats> breakdown;
  std::string generated_at;

  bool operator==(const RunReport&) const = default;
};

/// Folds per-run item scores into a report. Throws ValidationError for zero
/// runs, an empty run, or runs over different item sets.
RunReport aggregate(const std::vector<std::vector<ItemScore>>& runs, std::vector<std::string> run_ids = {});

/// One entry per category that has items, in Category order. Categories whose
/// share is below `min_share` percent stay in the list with `excluded` set.
std::vector<CategoryStats> category_breakdown(const RunReport& report, const CategoryMap& categories,
                                              double min_share = 5.0);

/// s[i][j] = similarity(caption_i, image_j).
struct SimilarityMatrix {
  long long item_id = 0;
  std::array<std::array<double, 2>, 2> s{};
};

/// JSON lines {id, s00, s01, s10, s11}. Throws LoadError / ParseError.
std::vector<SimilarityMatrix> load_similarity(const std::filesystem::path& path);

/// Picks the highest-similarity caption per image and image per caption; a
/// tie is an invalid pick. Single-run report. Throws ValidationError naming
/// the item when an entry is not finite.
RunReport score_similarity_baseline(std::span<const SimilarityMatrix> matrices);

}  // namespace keycomp
