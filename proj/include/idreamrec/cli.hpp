#pragma once

#include <iosfwd>

namespace idr {

/// Exit codes: 0 ok, 1 runtime failure, 2 usage or missing input, 3 dimension mismatch,
/// 4 training divergence.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace idr
