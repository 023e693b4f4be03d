#include <string>
#include <vector>

#include "cdseg/cli.hpp"

int main(int argc, char** argv) {
  return cdseg::run_command(std::vector<std::string>(argv, argv + argc));
}
