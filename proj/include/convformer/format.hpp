#pragma once

#include <iomanip>
#include <sstream>
#include <string>

namespace convformer {

// 6 significant digits, as used for every number the tools print.
inline std::string format_number(double v) {
  std::ostringstream os;
  os << std::setprecision(6) << v;
  return os.str();
}

}  // namespace convformer
