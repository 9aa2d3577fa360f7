#pragma once

#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

namespace ubcl::cli {

inline constexpr const char* kToolVersion = "0.1.0";

enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 2,
  kExitData = 3,
  kExitModelFile = 4,
  kExitInternal = 5,
};

/// Runs one command line (args exclude the program name). Output and
/// diagnostics go to the given streams; the return value is the exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Lower-case hex SHA-256 of a file's bytes.
std::string sha256_file(const std::filesystem::path& path);

}  // namespace ubcl::cli
