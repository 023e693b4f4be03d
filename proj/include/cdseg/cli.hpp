#pragma once

#include <iostream>
#include <string>
#include <vector>

namespace cdseg {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitRuntime = 2;

/// Entry point of the `cdseg` tool. args[0] is the program name; args[1] one
/// of generate, train, eval, ablate, sweep, report. Returns the exit code.
int run_command(const std::vector<std::string>& args, std::ostream& out = std::cout,
                std::ostream& err = std::cerr);

}  // namespace cdseg
