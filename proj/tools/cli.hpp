#pragma once

#include <iostream>

namespace manet::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

/// Runs the `manet` command line (synth, train, eval, viz, import) and
/// returns its exit code.
int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr);

}  // namespace manet::cli
