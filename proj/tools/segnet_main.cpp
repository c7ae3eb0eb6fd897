#include "segnet/cli.hpp"

int main(int argc, char** argv) { return segnet::cli::main(argc, argv); }
