#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace fincflow {

// fincflow {train|sample|reconstruct|check|bench|plot} [options]
//
// Every subcommand takes --config FILE (one `key = value` per line, `#`
// starts a comment line, keys are long option names without dashes). Flags
// given on the command line win over the file; unknown keys are rejected.
// FINCFLOW_WORKERS supplies the worker count when neither sets it.
//
// Returns the process exit status. args excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// FINCFLOW_WORKERS if set (must be a positive integer), else 1.
int default_workers();

}  // namespace fincflow
