#include "keycomp/scoring.hpp"

#include <fmt/format.h>
#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <set>

#include "keycomp/error.hpp"

namespace keycomp {

namespace {

using json = nlohmann::json;

bool is_word_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; }

std::string ascii_lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::vector<std::size_t> find_label(const std::string& haystack, const std::string& needle) {
  std::vector<std::size_t> hits;
  if (needle.empty()) return hits;
  for (auto pos = haystack.find(needle); pos != std::string::npos; pos = haystack.find(needle, pos + 1)) {
    const bool left_ok = pos == 0 || !is_word_char(haystack[pos - 1]) || !is_word_char(needle.front());
    const std::size_t end = pos + needle.size();
    const bool right_ok = end == haystack.size() || !is_word_char(haystack[end]) || !is_word_char(needle.back());
    if (left_ok && right_ok) hits.push_back(pos);
  }
  return hits;
}

bool is_terminator(char c) { return c == '.' || c == '!' || c == '?'; }

// [start, end) of the last sentence, ignoring trailing whitespace and closing punctuation.
std::pair<std::size_t, std::size_t> final_sentence(std::string_view text) {
  std::size_t end = text.size();
  auto trailing = [](char c) {
    return std::isspace(static_cast<unsigned char>(c)) || is_terminator(c) || c == '"' || c == '\'' || c == ')' ||
           c == '*' || c == ']';
  };
  while (end > 0 && trailing(text[end - 1])) --end;
  std::size_t start = end;
  while (start > 0) {
    const char c = text[start - 1];
    if (c == '\n') break;
    if (std::isspace(static_cast<unsigned char>(c)) && start >= 2 && is_terminator(text[start - 2])) break;
    --start;
  }
  return {start, end};
}

void check_invariants(const ItemScore& s) {
  if (s.group_correct != (s.text_correct & s.image_correct)) {
    throw ValidationError(fmt::format("item {}: group score differs from text AND image", s.item_id));
  }
}

Stat stat_from_counts(const std::vector<long>& correct_per_run, std::size_t items) {
  const double n_items = static_cast<double>(items);
  long total = 0;
  for (long c : correct_per_run) total += c;
  Stat st;
  st.mean = 100.0 * static_cast<double>(total) / (static_cast<double>(correct_per_run.size()) * n_items);
  if (correct_per_run.size() > 1) {
    double ss = 0.0;
    for (long c : correct_per_run) {
      const double d = 100.0 * static_cast<double>(c) / n_items - st.mean;
      ss += d * d;
    }
    st.std = std::sqrt(ss / static_cast<double>(correct_per_run.size() - 1));
  }
  return st;
}

struct Counts {
  std::vector<long> text, image, group;
};

Counts count_runs(const std::vector<std::vector<ItemScore>>& runs, const std::set<long long>* subset) {
  Counts c;
  for (const auto& run : runs) {
    long t = 0, i = 0, g = 0;
    for (const auto& s : run) {
      if (subset != nullptr && subset->count(s.item_id) == 0) continue;
      t += s.text_correct;
      i += s.image_correct;
      g += s.group_correct;
    }
    c.text.push_back(t);
    c.image.push_back(i);
    c.group.push_back(g);
  }
  return c;
}

double number_field(const json& row, const char* name, std::size_t line_no) {
  const auto it = row.find(name);
  if (it == row.end()) throw ParseError(fmt::format("line {}: missing '{}'", line_no, name), line_no);
  if (it->is_number()) return it->get<double>();
  if (it->is_string()) {
    // JSON has no literal for NaN or infinity; some exporters write them as strings.
    try {
      return std::stod(it->get<std::string>());
    } catch (const std::exception&) {
    }
  }
  throw ParseError(fmt::format("line {}: '{}' is not a number", line_no, name), line_no);
}

}  // namespace

std::string_view to_string(Choice choice) {
  switch (choice) {
    case Choice::OptionA: return "A";
    case Choice::OptionB: return "B";
    case Choice::Invalid: return "invalid";
  }
  return "invalid";
}

Choice parse_choice(std::string_view s) {
  if (s == "A") return Choice::OptionA;
  if (s == "B") return Choice::OptionB;
  if (s == "invalid") return Choice::Invalid;
  throw ParseError(fmt::format("unknown choice '{}'", s));
}

Selection Selection::pick(Choice value, std::string span) {
  if (value == Choice::Invalid) return invalid();
  return Selection{value, std::move(span)};
}

Selection extract_selection(std::string_view output, std::string_view label_a, std::string_view label_b) {
  const std::string text = ascii_lower(output);
  const auto hits_a = find_label(text, ascii_lower(label_a));
  const auto hits_b = find_label(text, ascii_lower(label_b));
  auto span_at = [&](std::size_t pos, std::string_view label) { return std::string(output.substr(pos, label.size())); };

  if (hits_a.empty() && hits_b.empty()) return Selection::invalid();
  if (hits_b.empty()) return Selection::pick(Choice::OptionA, span_at(hits_a.back(), label_a));
  if (hits_a.empty()) return Selection::pick(Choice::OptionB, span_at(hits_b.back(), label_b));

  const auto [start, end] = final_sentence(output);
  auto last_in = [&](const std::vector<std::size_t>& hits, std::size_t len) -> std::optional<std::size_t> {
    std::optional<std::size_t> best;
    for (auto pos : hits) {
      if (pos >= start && pos + len <= end) best = pos;
    }
    return best;
  };
  const auto fa = last_in(hits_a, label_a.size());
  const auto fb = last_in(hits_b, label_b.size());
  std::size_t pa = hits_a.back();
  std::size_t pb = hits_b.back();
  if (fa || fb) {
    if (!fb) return Selection::pick(Choice::OptionA, span_at(*fa, label_a));
    if (!fa) return Selection::pick(Choice::OptionB, span_at(*fb, label_b));
    pa = *fa;
    pb = *fb;
  }
  // A label that contains the other one ends later at the same start.
  if (pa > pb || (pa == pb && label_a.size() > label_b.size())) {
    return Selection::pick(Choice::OptionA, span_at(pa, label_a));
  }
  return Selection::pick(Choice::OptionB, span_at(pb, label_b));
}

int score_text_item(const Selection& pick_for_i0, const Selection& pick_for_i1) {
  return pick_for_i0.value == Choice::OptionA && pick_for_i1.value == Choice::OptionB ? 1 : 0;
}

int score_image_item(const Selection& pick_for_c0, const Selection& pick_for_c1) {
  return pick_for_c0.value == Choice::OptionA && pick_for_c1.value == Choice::OptionB ? 1 : 0;
}

int group_score(int text_bit, int image_bit) { return text_bit != 0 && image_bit != 0 ? 1 : 0; }

ItemScore score_item(long long item_id, const std::array<Selection, 4>& sub_answers) {
  ItemScore s;
  s.item_id = item_id;
  s.sub_answers = sub_answers;
  s.text_correct = score_text_item(sub_answers[kCaptionForI0], sub_answers[kCaptionForI1]);
  s.image_correct = score_image_item(sub_answers[kImageForC0], sub_answers[kImageForC1]);
  s.group_correct = group_score(s.text_correct, s.image_correct);
  s.invalid_count = static_cast<int>(
      std::count_if(sub_answers.begin(), sub_answers.end(), [](const Selection& x) { return x.value == Choice::Invalid; }));
  return s;
}

Stat summarize_runs(std::span<const double> per_run_percentages) {
  if (per_run_percentages.empty()) throw ValidationError("cannot summarize zero runs");
  const double n = static_cast<double>(per_run_percentages.size());
  double sum = 0.0;
  for (double p : per_run_percentages) sum += p;
  Stat st;
  st.mean = sum / n;
  if (per_run_percentages.size() > 1) {
    double ss = 0.0;
    for (double p : per_run_percentages) ss += (p - st.mean) * (p - st.mean);
    st.std = std::sqrt(ss / (n - 1.0));
  }
  return st;
}

RunReport aggregate(const std::vector<std::vector<ItemScore>>& runs, std::vector<std::string> run_ids) {
  if (runs.empty()) throw ValidationError("aggregate needs at least one run");
  if (run_ids.empty()) {
    for (std::size_t r = 0; r < runs.size(); ++r) run_ids.push_back(fmt::format("run-{}", r));
  }
  if (run_ids.size() != runs.size()) {
    throw ValidationError(fmt::format("{} run ids for {} runs", run_ids.size(), runs.size()));
  }
  auto ids_of = [](const std::vector<ItemScore>& run, std::size_t r) {
    std::set<long long> ids;
    for (const auto& s : run) {
      if (!ids.insert(s.item_id).second) {
        throw ValidationError(fmt::format("run {} scores item {} twice", r, s.item_id));
      }
      check_invariants(s);
    }
    return ids;
  };
  const auto reference = ids_of(runs.front(), 0);
  if (reference.empty()) throw ValidationError("aggregate needs at least one item");
  for (std::size_t r = 1; r < runs.size(); ++r) {
    if (ids_of(runs[r], r) != reference) {
      throw ValidationError(fmt::format("run {} covers a different item set than run 0", r));
    }
  }

  RunReport report;
  report.run_ids = std::move(run_ids);
  report.runs = runs;
  report.item_count = reference.size();
  const Counts c = count_runs(runs, nullptr);
  report.text = stat_from_counts(c.text, report.item_count);
  report.image = stat_from_counts(c.image, report.item_count);
  report.group = stat_from_counts(c.group, report.item_count);

  long invalid = 0, invalid_items = 0;
  for (const auto& run : runs) {
    for (const auto& s : run) {
      invalid += s.invalid_count;
      invalid_items += s.invalid_count > 0 ? 1 : 0;
    }
  }
  const double pairs = static_cast<double>(runs.size() * report.item_count);
  report.invalid_rate = 100.0 * static_cast<double>(invalid) / (4.0 * pairs);
  report.invalid_item_rate = 100.0 * static_cast<double>(invalid_items) / pairs;
  return report;
}

std::vector<CategoryStats> category_breakdown(const RunReport& report, const CategoryMap& categories,
                                              double min_share) {
  if (report.runs.empty()) return {};
  std::map<Category, std::set<long long>> members;
  for (const auto& s : report.runs.front()) members[categories.at(s.item_id)].insert(s.item_id);

  std::vector<CategoryStats> out;
  const double total = static_cast<double>(report.runs.front().size());
  for (Category cat : kAllCategories) {
    const auto it = members.find(cat);
    if (it == members.end()) continue;
    CategoryStats cs;
    cs.category = cat;
    cs.items = it->second.size();
    cs.share = 100.0 * static_cast<double>(cs.items) / total;
    const Counts c = count_runs(report.runs, &it->second);
    cs.text = stat_from_counts(c.text, cs.items);
    cs.image = stat_from_counts(c.image, cs.items);
    cs.group = stat_from_counts(c.group, cs.items);
    cs.excluded = cs.share < min_share;
    out.push_back(std::move(cs));
  }
  return out;
}

std::vector<SimilarityMatrix> load_similarity(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open similarity file " + path.string());
  std::vector<SimilarityMatrix> out;
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json row;
    try {
      row = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(fmt::format("{}:{}: {}", path.string(), line_no, e.what()), line_no);
    }
    if (!row.is_object() || !row.contains("id")) {
      throw ParseError(fmt::format("{}:{}: expected an object with an 'id'", path.string(), line_no), line_no);
    }
    SimilarityMatrix m;
    const json& id = row["id"];
    if (id.is_number_integer()) {
      m.item_id = id.get<long long>();
    } else if (id.is_string()) {
      try {
        m.item_id = std::stoll(id.get<std::string>());
      } catch (const std::exception&) {
        throw ParseError(fmt::format("{}:{}: id is not an integer", path.string(), line_no), line_no);
      }
    } else {
      throw ParseError(fmt::format("{}:{}: id is not an integer", path.string(), line_no), line_no);
    }
    m.s[0][0] = number_field(row, "s00", line_no);
    m.s[0][1] = number_field(row, "s01", line_no);
    m.s[1][0] = number_field(row, "s10", line_no);
    m.s[1][1] = number_field(row, "s11", line_no);
    out.push_back(m);
  }
  return out;
}

RunReport score_similarity_baseline(std::span<const SimilarityMatrix> matrices) {
  std::vector<ItemScore> run;
  run.reserve(matrices.size());
  // Strictly greater wins; equal values leave the pick invalid.
  auto pick = [](double a, double b, const char* a_span, const char* b_span) {
    if (a > b) return Selection::pick(Choice::OptionA, a_span);
    if (b > a) return Selection::pick(Choice::OptionB, b_span);
    return Selection::invalid();
  };
  for (const auto& m : matrices) {
    for (const auto& row : m.s) {
      for (double v : row) {
        if (!std::isfinite(v)) throw ValidationError(fmt::format("item {}: similarity entry is not finite", m.item_id));
      }
    }
    const auto& s = m.s;
    std::array<Selection, 4> subs{
        pick(s[0][0], s[1][0], "s00", "s10"),  // caption for image 0
        pick(s[0][1], s[1][1], "s01", "s11"),  // caption for image 1
        pick(s[0][0], s[0][1], "s00", "s01"),  // image for caption 0
        pick(s[1][0], s[1][1], "s10", "s11"),  // image for caption 1
    };
    run.push_back(score_item(m.item_id, subs));
  }
  RunReport report = aggregate({run}, {"similarity"});
  report.label = "similarity";
  return report;
}

}  // namespace keycomp
