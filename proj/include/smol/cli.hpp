// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>

namespace smol::cli {

enum ExitCode : int { kOk = 0, kFailure = 1, kConfigError = 2 };

struct RunSpec {
  std::string command;
  std::filesystem::path config;
  /// Empty selects the command's default (SMOL_DATA_ROOT for generate).
  std::filesystem::path out;
  std::optional<std::uint64_t> seed;
  /// 0 quiet, 1 progress, 2 detail.
  int verbosity = 1;
};

/// Runs one command. Config and input errors return kConfigError, runtime
/// failures kFailure; diagnostics go to `err`.
int run(const RunSpec& spec, std::ostream& out, std::ostream& err);

/// Argument parsing front end for the smolseg executable.
int main(int argc, char** argv);

}  // namespace smol::cli
