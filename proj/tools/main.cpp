// Copyright (c) 2026 The SSF-PEFT Authors
// SPDX-License-Identifier: Apache-2.0

#include <iostream>

#include "ssf/cli.h"

int main(int argc, char** argv) {
  return ssf::run_cli(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}
