#pragma once

namespace demt {

// Command dispatch for the demt binary. Exit codes: 0 success, 1 usage or
// bad configuration, 2 IO/format problems, 3 verification failure.
int run_cli(int argc, const char* const* argv);

}  // namespace demt
