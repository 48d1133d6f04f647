#include <iostream>

#include "fincflow/cli.hpp"

int main(int argc, char** argv) {
  return fincflow::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
