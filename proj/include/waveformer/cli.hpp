#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace waveformer {

enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitUsage = 2,  // bad flags, config or data
  kExitDiverged = 3,
  kExitChecksum = 4,
  kExitShape = 5,
};

// Entry point of the `waveformer` executable: train, eval, bench, ablate,
// params, synth. Never throws; errors become messages on `err` and an exit code.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace waveformer
