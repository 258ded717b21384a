#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace dx {

inline constexpr int kExitOk = 0;
inline constexpr int kExitDomain = 1;
inline constexpr int kExitUsage = 2;

// `args` excludes the program name.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err, std::istream& in);

}  // namespace dx
