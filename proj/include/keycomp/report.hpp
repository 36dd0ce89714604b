#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>

#include <json.hpp>

#include "keycomp/scoring.hpp"

namespace keycomp {

enum class ReportFormat { Json, Csv, Markdown };
ReportFormat parse_report_format(std::string_view s);  // json | csv | md | markdown

/// Percentages rounded half away from zero to one decimal.
double round1(double value);

nlohmann::json report_to_json(const RunReport& report);
RunReport report_from_json(const nlohmann::json& j);

/// Sorted keys, two-space indent, trailing newline.
std::string render_json(const RunReport& report);

inline constexpr std::string_view kCsvHeader = "variant,text,text_std,image,image_std,group,group_std,invalid_rate";
/// One row per report; a null std is an empty cell.
std::string render_csv(std::span<const RunReport> reports);

/// Overall Text / Image / Group table with "mean ± std" cells, followed by the
/// category breakdown of each report that has one.
std::string render_markdown(std::span<const RunReport> reports);

std::string render(std::span<const RunReport> reports, ReportFormat format);

/// Reads <run_dir>/report.json.
RunReport load_report(const std::filesystem::path& run_dir);

/// "41.0 ± 1.0", or "41.0" without a std.
std::string format_stat(const Stat& stat);

}  // namespace keycomp
