#include "keycomp/clock.hpp"

#include <chrono>
#include <ctime>

namespace keycomp {

std::string Clock::now() const {
  if (fixed_) return *fixed_;
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  ::gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace keycomp
