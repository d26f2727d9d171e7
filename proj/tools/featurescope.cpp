#include <iostream>

#include "featurescope/cli.hpp"

int main(int argc, char** argv) {
  return fscope::runCli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
