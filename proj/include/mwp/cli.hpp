#pragma once

namespace mwp {

// Entry point behind the mwp binary; exposed so tests can drive it.
// Exit codes: 0 success, 2 usage, 3 missing/unreadable input, 4 corrupt
// checkpoint or cache, 1 other failures.
int cli_main(int argc, const char* const* argv);

}  // namespace mwp
