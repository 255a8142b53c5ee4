#include "voxfactor/cli.hpp"

int main(int argc, char** argv) { return voxfactor::cli_main(argc, argv); }
