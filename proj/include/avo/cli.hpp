#pragma once

// Command-line front end.
//
//   avo <fit-energy|sweep|fit-noise-model|render|eval> [--key value ...]
//       [--config file]
//
// Every key can also come from a flat key=value config file; flags win.
// Each run writes config.resolved, which replays the run when passed back
// with --config. Exit codes: 0 success, 1 invalid input, 2 divergence.

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace avo::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitInvalid = 1;
inline constexpr int kExitDivergence = 2;

using KeyValues = std::map<std::string, std::string>;

/// Parses a flat key=value file. Blank lines and lines starting with '#'
/// are skipped. Throws avo::Error naming the line on malformed or duplicate
/// entries.
KeyValues parse_config(std::istream& is);

/// Keys accepted by a subcommand, in the order they are written to
/// config.resolved. Throws on an unknown subcommand.
std::vector<std::string> known_keys(const std::string& command);

int run(int argc, const char* const* argv);
int run(const std::vector<std::string>& args, std::ostream& out,
        std::ostream& err);

}  // namespace avo::cli
