#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace polyseg {

/// Run preset bundling the architecture and preparation settings of one
/// submitted run (run1..run5).
struct RunPreset {
    std::string name;
    std::string arch;
    int depth = 4;
    bool crop = true;
    std::vector<std::string> augment = {"rotation", "zoom"};
};

const std::vector<RunPreset>& run_presets();

/// Dispatch a `polyseg <command> ...` invocation. `args` excludes the program
/// name. Returns the process exit code: 0 success, 2 usage/config/data errors,
/// 3 non-finite training loss. Errors go to `err` only.
int run_cli(std::vector<std::string> args, std::ostream& out, std::ostream& err);

} // namespace polyseg
