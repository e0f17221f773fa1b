#pragma once

#include <string>
#include <vector>

#include "xct/config.hpp"

namespace xct {

// Built-in defaults for every pipeline knob; the config file and --set
// overrides are layered on top.
Config default_config();

// out_root resolution order: XCT_RUN_ROOT env var, then [run] out_root.
std::string resolve_out_root(const Config& cfg);

struct CommandResult {
    bool up_to_date = false;
    std::vector<std::string> outputs;  // relative to the run directory
};

const std::vector<std::string>& command_names();

// Runs one pipeline command with the effective config. Commands are
// idempotent: when the manifest, inputs, and outputs all match, nothing is
// rewritten and up_to_date is reported instead (unless force).
CommandResult run_command(const std::string& command, const Config& cfg, bool force);

}  // namespace xct
