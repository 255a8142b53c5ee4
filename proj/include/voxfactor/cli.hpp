#pragma once

// placeholder while the toolchain comes up; replaced by the real CLI
#include "voxfactor/common.hpp"
#include <cstdio>

namespace voxfactor {
inline int cli_main(int, char**) {
    std::printf("voxfactor: no subcommands wired yet\n");
    return 2;
}
}  // namespace voxfactor
