#pragma once

#include <charconv>
#include <cmath>
#include <string>

namespace mlmbic {

/// Shortest text that reads back to the same double; empty for NaN.
inline std::string format_double(double v) {
  if (std::isnan(v)) return {};
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return ec == std::errc() ? std::string(buf, ptr) : std::string();
}

}  // namespace mlmbic
