#include <iostream>

#include "bundleseg/commands.hpp"

int main(int argc, char** argv) { return bundleseg::cli::run(argc, argv, std::cout, std::cerr); }
