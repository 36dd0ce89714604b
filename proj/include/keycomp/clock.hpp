#pragma once

#include <optional>
#include <string>

namespace keycomp {

/// Source of "recorded_at" style timestamps. A fixed clock makes every
/// written artifact byte-stable.
class Clock {
 public:
  static Clock system() { return Clock(std::nullopt); }
  static Clock fixed(std::string timestamp) { return Clock(std::move(timestamp)); }

  /// ISO-8601 UTC, second precision: "2024-01-31T12:00:00Z".
  std::string now() const;
  bool is_fixed() const { return fixed_.has_value(); }

 private:
  explicit Clock(std::optional<std::string> fixed) : fixed_(std::move(fixed)) {}
  std::optional<std::string> fixed_;
};

}  // namespace keycomp
