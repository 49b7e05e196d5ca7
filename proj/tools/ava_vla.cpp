// SPDX-License-Identifier: Apache-2.0

#include <iostream>

#include "ava/app.h"

int main(int argc, char** argv) { return ava::run_cli(argc, argv, std::cout, std::cerr); }
