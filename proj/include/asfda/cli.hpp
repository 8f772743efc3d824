#pragma once

#include <string>
#include <vector>

namespace asfda {

/// Dispatches one subcommand (gen-synth, pretrain, select, adapt, evaluate,
/// report). Returns 0 on success, 1 on usage or config errors, 2 on runtime
/// errors; messages go to stderr.
int run_cli(const std::vector<std::string>& args);
int run_cli(int argc, char** argv);

} // namespace asfda
