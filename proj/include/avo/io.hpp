#pragma once

// Small text helpers shared by the CSV writers and the CLI.

#include <string>
#include <string_view>
#include <vector>

namespace avo {

/// Shortest decimal that parses back to the identical double.
std::string format_double(double v);

/// Strict parse of a whole token; throws avo::Error on failure.
double parse_double(std::string_view s);
long long parse_int(std::string_view s);

std::vector<std::string> split(std::string_view s, char sep);
std::string_view trim(std::string_view s);

}  // namespace avo
