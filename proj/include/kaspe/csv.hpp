#pragma once

#include <cstdlib>
#include <string>

#include "kaspe/errors.hpp"

namespace kaspe {

/// Parses one CSV cell. Unlike std::stod this accepts subnormal values,
/// which appear in tabulated densities far in the tails.
inline double parse_csv_double(const std::string& cell) {
  const char* begin = cell.c_str();
  char* end = nullptr;
  const double v = std::strtod(begin, &end);
  if (end == begin || *end != '\0') throw InvalidParameter("CSV: malformed number '" + cell + "'");
  return v;
}

}  // namespace kaspe
