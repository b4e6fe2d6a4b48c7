#include <iostream>

#include "axlab/cli.hpp"

int main(int argc, char** argv) { return axlab::cli::run(argc, argv, std::cout, std::cerr); }
