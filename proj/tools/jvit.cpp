// SPDX-License-Identifier: Apache-2.0

#include <iostream>

#include "jvit/cli.hpp"

int main(int argc, char** argv) {
  jvit::cli::tune_allocator();
  jvit::cli::configure_threads_from_env();
  return jvit::cli::run({argv + 1, argv + argc}, std::cout, std::cerr);
}
