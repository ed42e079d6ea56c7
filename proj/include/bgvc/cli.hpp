#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace bgvc::cli {

enum ExitCode : int { ok = 0, usage = 1, data_error = 2, numeric = 3 };

/// Runs the `bgvc` command line. `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int main(int argc, char** argv);

/// Environment variable naming the default config file.
inline constexpr const char* kConfigEnv = "BGVC_CONFIG";

} // namespace bgvc::cli
