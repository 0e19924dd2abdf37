#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace mdd {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitConfig = 2;

// Default parent directory for outputs when --out is not given.
inline constexpr const char* kOutputRootEnv = "MDD_OUTPUT_ROOT";

// Entry point of the `mdd` tool. `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mdd
