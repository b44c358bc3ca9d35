#include <iostream>

#include "gare/cli.hpp"

int main(int argc, char** argv) { return gare::cli::run(argc, argv, std::cout, std::cerr); }
