#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace mlmbic::cli {

// Exit codes.
inline constexpr int kOk = 0;
inline constexpr int kUsageOrDataError = 1;
inline constexpr int kNotConverged = 2;

/// Entry point shared by the executable and the tests. `args` excludes the
/// program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mlmbic::cli
