#include "maskx/runner.hpp"

int main(int argc, char** argv) {
  return maskx::run(std::vector<std::string>(argv + 1, argv + argc));
}
