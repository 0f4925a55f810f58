#include <iostream>

#include "densiscope/commands.hpp"

int main(int argc, char** argv) { return densiscope::run_cli(argc, argv, std::cout, std::cerr); }
