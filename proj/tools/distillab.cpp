#include <iostream>
#include <string>
#include <vector>

#include "distillab/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return distillab::run_cli(args, std::cout, std::cerr);
}
