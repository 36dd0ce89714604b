#include "keycomp/report.hpp"

#include <fmt/format.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "keycomp/error.hpp"

namespace keycomp {

namespace {

using json = nlohmann::json;

json stat_to_json(const Stat& s) {
  return json{{"mean", round1(s.mean)}, {"std", s.std ? json(round1(*s.std)) : json(nullptr)}};
}

Stat stat_from_json(const json& j) {
  Stat s;
  s.mean = j.at("mean").get<double>();
  if (!j.at("std").is_null()) s.std = j["std"].get<double>();
  return s;
}

json selection_to_json(const Selection& s) {
  return json{{"choice", to_string(s.value)}, {"span", s.matched_span ? json(*s.matched_span) : json(nullptr)}};
}

Selection selection_from_json(const json& j) {
  const Choice c = parse_choice(j.at("choice").get<std::string>());
  if (c == Choice::Invalid) return Selection::invalid();
  return Selection::pick(c, j.at("span").get<std::string>());
}

std::optional<Category> category_by_name(const std::string& name) {
  for (Category c : kAllCategories) {
    if (to_string(c) == name) return c;
  }
  return std::nullopt;
}

std::string csv_cell(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string fixed1(double v) { return fmt::format("{:.1f}", round1(v)); }

}  // namespace

ReportFormat parse_report_format(std::string_view s) {
  if (s == "json") return ReportFormat::Json;
  if (s == "csv") return ReportFormat::Csv;
  if (s == "md" || s == "markdown") return ReportFormat::Markdown;
  throw ConfigError(fmt::format("unknown report format '{}' (known: json, csv, md)", s));
}

double round1(double value) {
  const double r = std::round(value * 10.0) / 10.0;
  return r == 0.0 ? 0.0 : r;  // no "-0.0"
}

json report_to_json(const RunReport& report) {
  json breakdown = json::array();
  for (const auto& c : report.breakdown) {
    breakdown.push_back({{"category", to_string(c.category)},
                         {"items", c.items},
                         {"share", round1(c.share)},
                         {"text", stat_to_json(c.text)},
                         {"image", stat_to_json(c.image)},
                         {"group", stat_to_json(c.group)},
                         {"excluded", c.excluded}});
  }
  json per_item = json::array();
  for (std::size_t r = 0; r < report.runs.size(); ++r) {
    json items = json::array();
    for (const auto& s : report.runs[r]) {
      json subs = json::array();
      for (const auto& sel : s.sub_answers) subs.push_back(selection_to_json(sel));
      items.push_back({{"id", s.item_id},
                       {"text", s.text_correct},
                       {"image", s.image_correct},
                       {"group", s.group_correct},
                       {"invalid_count", s.invalid_count},
                       {"sub_answers", std::move(subs)}});
    }
    per_item.push_back({{"run_id", r < report.run_ids.size() ? report.run_ids[r] : fmt::format("run-{}", r)},
                        {"items", std::move(items)}});
  }
  return json{{"label", report.label},
              {"metadata", report.metadata},
              {"run_ids", report.run_ids},
              {"item_count", report.item_count},
              {"text", stat_to_json(report.text)},
              {"image", stat_to_json(report.image)},
              {"group", stat_to_json(report.group)},
              {"invalid_rate", round1(report.invalid_rate)},
              {"invalid_item_rate", round1(report.invalid_item_rate)},
              {"breakdown", std::move(breakdown)},
              {"per_item", std::move(per_item)},
              {"generated_at", report.generated_at}};
}

RunReport report_from_json(const json& j) {
  try {
    RunReport r;
    r.label = j.value("label", "");
    if (j.contains("metadata")) r.metadata = j["metadata"].get<std::map<std::string, std::string>>();
    r.run_ids = j.value("run_ids", std::vector<std::string>{});
    r.item_count = j.at("item_count").get<std::size_t>();
    r.text = stat_from_json(j.at("text"));
    r.image = stat_from_json(j.at("image"));
    r.group = stat_from_json(j.at("group"));
    r.invalid_rate = j.at("invalid_rate").get<double>();
    r.invalid_item_rate = j.value("invalid_item_rate", 0.0);
    r.generated_at = j.value("generated_at", "");
    for (const auto& c : j.value("breakdown", json::array())) {
      CategoryStats cs;
      const auto name = c.at("category").get<std::string>();
      const auto cat = category_by_name(name);
      if (!cat) throw ParseError("report: unknown category '" + name + "'");
      cs.category = *cat;
      cs.items = c.at("items").get<std::size_t>();
      cs.share = c.at("share").get<double>();
      cs.text = stat_from_json(c.at("text"));
      cs.image = stat_from_json(c.at("image"));
      cs.group = stat_from_json(c.at("group"));
      cs.excluded = c.at("excluded").get<bool>();
      r.breakdown.push_back(std::move(cs));
    }
    for (const auto& run : j.value("per_item", json::array())) {
      std::vector<ItemScore> scores;
      for (const auto& it : run.at("items")) {
        ItemScore s;
        s.item_id = it.at("id").get<long long>();
        s.text_correct = it.at("text").get<int>();
        s.image_correct = it.at("image").get<int>();
        s.group_correct = it.at("group").get<int>();
        s.invalid_count = it.at("invalid_count").get<int>();
        const auto& subs = it.at("sub_answers");
        if (subs.size() != 4) throw ParseError("report: an item needs four sub-answers");
        for (std::size_t k = 0; k < 4; ++k) s.sub_answers[k] = selection_from_json(subs[k]);
        scores.push_back(std::move(s));
      }
      r.runs.push_back(std::move(scores));
    }
    return r;
  } catch (const json::exception& e) {
    throw ParseError(std::string("report: ") + e.what());
  }
}

std::string render_json(const RunReport& report) { return report_to_json(report).dump(2) + "\n"; }

std::string format_stat(const Stat& stat) {
  if (!stat.std) return fixed1(stat.mean);
  return fmt::format("{} ± {}", fixed1(stat.mean), fixed1(*stat.std));
}

std::string render_csv(std::span<const RunReport> reports) {
  std::string out(kCsvHeader);
  out += '\n';
  auto std_cell = [](const Stat& s) { return s.std ? fixed1(*s.std) : std::string(); };
  for (const auto& r : reports) {
    out += fmt::format("{},{},{},{},{},{},{},{}\n", csv_cell(r.label), fixed1(r.text.mean), std_cell(r.text),
                       fixed1(r.image.mean), std_cell(r.image), fixed1(r.group.mean), std_cell(r.group),
                       fixed1(r.invalid_rate));
  }
  return out;
}

std::string render_markdown(std::span<const RunReport> reports) {
  std::ostringstream out;
  out << "| Variant | Text | Image | Group | Invalid |\n";
  out << "|---|---|---|---|---|\n";
  for (const auto& r : reports) {
    out << fmt::format("| {} | {} | {} | {} | {} |\n", r.label, format_stat(r.text), format_stat(r.image),
                       format_stat(r.group), fixed1(r.invalid_rate));
  }
  for (const auto& r : reports) {
    if (r.breakdown.empty()) continue;
    out << fmt::format("\n### Categories: {}\n\n", r.label);
    out << "| Category | Items | Share | Text | Image | Group | Status |\n";
    out << "|---|---|---|---|---|---|---|\n";
    for (const auto& c : r.breakdown) {
      out << fmt::format("| {} | {} | {} | {} | {} | {} | {} |\n", to_string(c.category), c.items, fixed1(c.share),
                         format_stat(c.text), format_stat(c.image), format_stat(c.group),
                         c.excluded ? "excluded" : "included");
    }
  }
  return out.str();
}

std::string render(std::span<const RunReport> reports, ReportFormat format) {
  switch (format) {
    case ReportFormat::Json: {
      if (reports.size() == 1) return render_json(reports.front());
      json arr = json::array();
      for (const auto& r : reports) arr.push_back(report_to_json(r));
      return arr.dump(2) + "\n";
    }
    case ReportFormat::Csv: return render_csv(reports);
    case ReportFormat::Markdown: return render_markdown(reports);
  }
  throw ConfigError("unknown report format");
}

RunReport load_report(const std::filesystem::path& run_dir) {
  const auto path = std::filesystem::is_directory(run_dir) ? run_dir / "report.json" : run_dir;
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open report " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  return report_from_json(j);
}

}  // namespace keycomp
