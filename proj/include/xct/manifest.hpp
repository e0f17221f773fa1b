#pragma once

#include <map>
#include <string>
#include <vector>

#include "xct/common.hpp"

namespace xct {

// Provenance record written next to every command's artifacts. Paths are
// stored relative to the run directory. A command is considered up to date
// when its recorded config snapshot, input hashes, and output hashes all
// match what is currently on disk; wall time never participates.
struct Manifest {
    std::string command;
    std::string seed;  // free form: one seed, a list, or empty
    double wall_time_s = 0;
    std::map<std::string, std::string> inputs;   // rel path -> sha256
    std::map<std::string, std::string> outputs;  // rel path -> sha256
    std::string config_snapshot;

    std::string serialize() const;
    static Manifest parse(const std::string& text, const std::string& origin);
};

class RunDir {
public:
    RunDir(const std::string& root, const std::string& run_id);

    const std::string& path() const { return path_; }
    std::string abs(const std::string& rel) const { return path_ + "/" + rel; }
    void ensure_dirs() const;

    std::string manifest_path(const std::string& command) const;
    bool has_manifest(const std::string& command) const;
    Manifest load_manifest(const std::string& command) const;
    void write_manifest(const Manifest& m) const;

    // Map from every manifest-recorded output path to its hash, used to
    // detect artifacts that changed since their producing command ran.
    std::map<std::string, std::string> artifact_index() const;

private:
    std::string path_;
};

}  // namespace xct
