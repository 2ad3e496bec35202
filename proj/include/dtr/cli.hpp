#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace dtr::cli {

/// Exit codes of every command.
enum ExitCode : int { ok = 0, runtime_failure = 1, usage_error = 2 };

/// Runs the command line `args` (args[0] is the program name). Normal output goes to `out`,
/// diagnostics to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, const char* const* argv);

}  // namespace dtr::cli
