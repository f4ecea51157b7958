// Copyright (c) 2026 The SSF-PEFT Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace ssf {

inline constexpr const char* kCliSchema = "ssf-cli/1";

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitVerify = 2 };

/// Runs one command. args[0] is the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace ssf
