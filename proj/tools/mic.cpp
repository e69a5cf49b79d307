#include <iostream>

#include "mic/cli.hpp"

int main(int argc, char** argv) { return mic::cli_main(argc, argv, std::cout, std::cerr); }
