#pragma once

#include <string>
#include <vector>

namespace egm {

// Entry point behind the `egm` binary; args exclude the program name.
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
// Errors print one machine-parsable line on stderr:
//   egm-error: kind=<usage|data|numeric> message="..."
int run_command(const std::vector<std::string>& args);

}  // namespace egm
