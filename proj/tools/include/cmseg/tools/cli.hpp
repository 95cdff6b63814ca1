#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "cmseg/tools/verify.hpp"

namespace cmseg::tools {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

/// Raised for bad flags, unreadable or invalid config files and missing
/// inputs named on the command line. Maps to exit code 2.
class UsageError : public Error {
 public:
  using Error::Error;
};

struct CliEnvironment {
  std::ostream* out = nullptr;  // defaults to std::cout
  std::ostream* err = nullptr;  // defaults to std::cerr
  VerifyHooks verify;
};

/// Parses argv and runs one subcommand. Returns 0 on success, 1 on a
/// runtime failure and 2 on a usage or configuration error. Never throws.
int run_cli(const std::vector<std::string>& args, const CliEnvironment& env = {});
int run_cli(int argc, const char* const* argv, const CliEnvironment& env = {});

/// Worker count for parallel data loading and evaluation: 1 when
/// deterministic, else CMSEG_THREADS if set to a positive integer, else the
/// hardware concurrency.
int worker_threads(bool deterministic);

}  // namespace cmseg::tools
