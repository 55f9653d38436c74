#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace voxpeft::cli {

enum ExitCode : int {
    kExitOk = 0,
    kExitFailure = 1,
    kExitConfig = 2,
    kExitNumeric = 3,
    kExitPartialSweep = 4,
};

// Entry point shared by the binary and the tests. `args` excludes argv[0].
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

} // namespace voxpeft::cli
