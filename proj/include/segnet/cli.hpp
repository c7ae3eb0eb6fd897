#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace segnet::cli {

enum ExitCode : int { kOk = 0, kValidation = 1, kRuntime = 2 };

/// Runs one command line (args excludes the program name). Inputs are
/// loaded and checked before anything is written, so a validation failure
/// (exit 1) leaves no partial output.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

int main(int argc, char** argv);

}  // namespace segnet::cli
