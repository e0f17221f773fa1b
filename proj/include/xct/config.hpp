#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "xct/common.hpp"

namespace xct {

// Sectioned key-value config. Format:
//
//   # comment
//   [section]
//   key = value
//
// Values are strings; lists are comma separated. Lookup order used by the
// CLI is: command-line --set overrides, then the file, then built-in
// defaults passed at the call site.
class Config {
public:
    Config() = default;

    static Config parse(const std::string& text, const std::string& origin = "<string>");
    static Config load(const std::string& path);

    bool has(const std::string& section, const std::string& key) const;

    std::string get(const std::string& section, const std::string& key,
                    const std::string& fallback) const;
    std::string require(const std::string& section, const std::string& key) const;

    long long get_int(const std::string& section, const std::string& key, long long fallback) const;
    double get_double(const std::string& section, const std::string& key, double fallback) const;
    bool get_bool(const std::string& section, const std::string& key, bool fallback) const;
    std::vector<std::string> get_list(const std::string& section, const std::string& key) const;
    std::vector<long long> get_int_list(const std::string& section, const std::string& key) const;

    // "section.key=value" (used for CLI --set flags).
    void set_dotted(const std::string& assignment);
    void set(const std::string& section, const std::string& key, const std::string& value);

    // Canonical serialization: sections and keys in sorted order, so config
    // snapshots embedded in manifests hash stably.
    std::string dump() const;
    // Like dump() but restricted to the given sections (missing ones skipped).
    std::string dump_sections(const std::vector<std::string>& names) const;

    // Overlays every entry of `other` on top of this config.
    void apply(const Config& other);

    const std::map<std::string, std::map<std::string, std::string>>& sections() const {
        return sections_;
    }

private:
    std::map<std::string, std::map<std::string, std::string>> sections_;
};

}  // namespace xct
