#pragma once

#include <cstdio>
#include <string>

namespace ppks {

/// Decimal text with 6 significant digits.
inline std::string decimal6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

/// The double nearest to decimal6(v); JSON writers print it back unchanged.
inline double round6(double v) { return std::stod(decimal6(v)); }

}  // namespace ppks
