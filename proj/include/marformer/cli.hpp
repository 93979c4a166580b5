#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace marformer::cli {

/// Runs one command. `args` excludes the program name, e.g.
/// {"count", "--preset", "L"}. Returns the process exit code; diagnostics go
/// to `err` as a single line.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

int run(int argc, const char* const* argv);

}  // namespace marformer::cli
