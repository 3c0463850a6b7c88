#include "caps/cli.hpp"

int main(int argc, char** argv) { return caps::cli::run(argc, argv); }
