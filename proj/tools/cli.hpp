#pragma once

#include <iosfwd>

namespace pfm::cli {

// Runs one subcommand. Returns 0 on success, 1 on validation errors and 2
// when fitting aborts numerically.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace pfm::cli
