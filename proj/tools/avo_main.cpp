#include "avo/cli.hpp"

int main(int argc, char** argv) { return avo::cli::run(argc, argv); }
