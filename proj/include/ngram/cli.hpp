#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace ngram {

/// Process exit codes of the `ngramt` tool.
enum ExitCode : int {
  kExitOk = 0,
  kExitCheckFailed = 1,  // grad-check threshold exceeded
  kExitBadInput = 2,     // bad config, arguments, checkpoint or tokens
  kExitDiverged = 3,     // training loss became non-finite
};

/// Runs one `ngramt` invocation; args excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace ngram
