#include "cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return hyrsm::cli::run(argc, argv, std::cout, std::cerr); }
