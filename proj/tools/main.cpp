#include <string>
#include <vector>

#include "traitforge/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return traitforge::cli::run(args);
}
