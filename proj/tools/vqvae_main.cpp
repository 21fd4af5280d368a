#include <iostream>
#include <string>
#include <vector>

#include "vqvae/cli.h"
#include "vqvae/trainer.h"

int main(int argc, char** argv) {
  vqvae::TuneAllocator();
  const std::vector<std::string> args(argv + 1, argv + argc);
  return vqvae::RunCli(args, std::cout, std::cerr);
}
