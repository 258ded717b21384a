#include <iostream>
#include <string>
#include <vector>

#include "dx/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return dx::dispatch(args, std::cout, std::cerr, std::cin);
}
