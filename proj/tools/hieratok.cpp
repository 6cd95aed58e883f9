#include <iostream>
#include <string>
#include <vector>

#include "hieratok/harness/alloc.hpp"
#include "hieratok/harness/cli.hpp"

int main(int argc, char** argv) {
  hieratok::tune_allocator();
  return hieratok::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
