// SPDX-License-Identifier: Apache-2.0
#include "smol/cli.hpp"

int main(int argc, char** argv) { return smol::cli::main(argc, argv); }
