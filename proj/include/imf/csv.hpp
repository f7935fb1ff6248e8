#pragma once

#include <charconv>
#include <cmath>
#include <string>

namespace imf {

/// Shortest round-trip decimal form; NaN becomes an empty field.
inline std::string csv_number(double v) {
  if (std::isnan(v)) return "";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

}  // namespace imf
