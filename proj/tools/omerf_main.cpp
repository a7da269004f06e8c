#include "omerf/cli.hpp"

int main(int argc, char** argv) { return omerf::cli::run(argc, argv); }
