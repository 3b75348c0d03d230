#include "swarmnav/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return swarmnav::run_cli(argc, argv, std::cout, std::cerr); }
