#include <string>
#include <vector>

#include "egm/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return egm::run_command(args);
}
