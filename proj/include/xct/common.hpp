#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace xct {

// Error taxonomy shared by the library and the CLI. The CLI maps these to
// process exit codes: ConfigError/InputError/ProvenanceError -> 1,
// MissingInputError -> 2, NumericalError -> 3.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct InputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct MissingInputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ProvenanceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

using TokenId = std::uint32_t;
using TokenStream = std::vector<TokenId>;

std::vector<std::string> split(const std::string& s, char sep);
std::string trim(const std::string& s);
std::string join(const std::vector<std::string>& parts, const std::string& sep);
bool starts_with(const std::string& s, const std::string& prefix);

// Locale-independent numeric formatting used by every text export so that
// artifacts are byte-stable across environments.
std::string fmt_double(double v);
std::string fmt_double(double v, int precision);

double parse_double(const std::string& s, const std::string& what);
long long parse_int(const std::string& s, const std::string& what);

}  // namespace xct
