#include <iostream>
#include <string>
#include <vector>

#include "trajguide/cli.hpp"

int main(int argc, char** argv) {
  return trajguide::cli::run(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
