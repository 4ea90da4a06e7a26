#pragma once

// Entry point of the robnas command-line tool.

#include <ostream>
#include <string>
#include <vector>

namespace robnas {

/// Subcommands search, retrain, attack, certify and report. Returns 0 on
/// success, 1 on a configuration error and 2 on a runtime failure. `env` holds
/// "NAME=value" entries for ROBNAS_* overrides.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err,
            const std::vector<std::string>& env = {});

}  // namespace robnas
