#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace sp::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

// Runs one command line (without the program name), e.g.
// {"eval", "--checkpoint", "m.ckpt", ...}. Returns the process exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace sp::cli
