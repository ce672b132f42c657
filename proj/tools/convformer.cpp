#include <iostream>

#include "convformer/cli.hpp"

int main(int argc, char** argv) { return convformer::run_cli(argc, argv, std::cout, std::cerr); }
