#include <iostream>

#include "idreamrec/cli.hpp"

int main(int argc, char** argv) { return idr::run_cli(argc, argv, std::cout, std::cerr); }
