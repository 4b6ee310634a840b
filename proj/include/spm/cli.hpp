#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace spm::cli {

// Runs the command line (args excludes the program name). Errors are
// reported as a single "error: ..." line on err and a nonzero status.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace spm::cli
