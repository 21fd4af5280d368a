#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace vqvae {

// Exit codes of the command-line tool.
enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitConfig = 2,  // bad flags or configuration
  kExitData = 3,    // unreadable or inconsistent data/checkpoints
  kExitNan = 4,     // training diverged; a diagnostic checkpoint was written
};

// Runs one CLI invocation. |args| excludes the program name.
int RunCli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace vqvae
