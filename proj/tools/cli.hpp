#pragma once

#include <string>
#include <vector>

namespace regcast::cli {

/// Runs one command line and returns its exit code: 0 success, 1 user error
/// (bad flags, missing or invalid inputs), 2 internal error. `args` excludes
/// the program name.
int run(const std::vector<std::string>& args);
int run(int argc, const char* const* argv);

}  // namespace regcast::cli
