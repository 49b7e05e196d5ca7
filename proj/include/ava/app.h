// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end: gen-data, train, grad-check and eval.

#pragma once

#include <ostream>

namespace ava {

enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 2,
  kExitIo = 3,
  kExitNumeric = 4,
  kExitCheckFailed = 5,
};

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace ava
