#include "xct/manifest.hpp"

#include <filesystem>
#include <sstream>

#include "xct/serialize.hpp"

namespace fs = std::filesystem;

namespace xct {

std::string Manifest::serialize() const {
    std::string out;
    out += "command = " + command + "\n";
    out += "seed = " + seed + "\n";
    out += "wall_time_s = " + fmt_double(wall_time_s, 6) + "\n";
    out += "inputs:\n";
    for (auto& [p, h] : inputs) out += "\t" + p + "\t" + h + "\n";
    out += "outputs:\n";
    for (auto& [p, h] : outputs) out += "\t" + p + "\t" + h + "\n";
    out += "config:\n";
    std::istringstream in(config_snapshot);
    std::string line;
    while (std::getline(in, line)) out += "\t" + line + "\n";
    return out;
}

Manifest Manifest::parse(const std::string& text, const std::string& origin) {
    Manifest m;
    std::istringstream in(text);
    std::string line;
    enum class Mode { Top, Inputs, Outputs, Config } mode = Mode::Top;
    while (std::getline(in, line)) {
        if (mode != Mode::Config && trim(line).empty()) continue;
        if (line == "inputs:") { mode = Mode::Inputs; continue; }
        if (line == "outputs:") { mode = Mode::Outputs; continue; }
        if (line == "config:") { mode = Mode::Config; continue; }
        if (mode == Mode::Top) {
            auto eq = line.find('=');
            if (eq == std::string::npos) throw InputError(origin + ": malformed manifest line");
            std::string k = trim(line.substr(0, eq)), v = trim(line.substr(eq + 1));
            if (k == "command") m.command = v;
            else if (k == "seed") m.seed = v;
            else if (k == "wall_time_s") m.wall_time_s = parse_double(v, "wall_time_s");
        } else if (mode == Mode::Inputs || mode == Mode::Outputs) {
            auto f = split(line.substr(1), '\t');
            if (f.size() != 2) throw InputError(origin + ": malformed manifest entry");
            (mode == Mode::Inputs ? m.inputs : m.outputs)[f[0]] = f[1];
        } else {
            if (!line.empty() && line[0] == '\t') m.config_snapshot += line.substr(1) + "\n";
        }
    }
    return m;
}

RunDir::RunDir(const std::string& root, const std::string& run_id) : path_(root + "/" + run_id) {}

void RunDir::ensure_dirs() const {
    for (const char* sub : {"", "/corpus", "/pairs", "/lm", "/acts", "/xc", "/attr", "/reports",
                            "/manifests"})
        fs::create_directories(path_ + sub);
}

std::string RunDir::manifest_path(const std::string& command) const {
    return path_ + "/manifests/" + command + ".manifest";
}

bool RunDir::has_manifest(const std::string& command) const {
    return fs::exists(manifest_path(command));
}

Manifest RunDir::load_manifest(const std::string& command) const {
    const std::string p = manifest_path(command);
    return Manifest::parse(read_file(p), p);
}

void RunDir::write_manifest(const Manifest& m) const {
    write_file_atomic(manifest_path(m.command), m.serialize());
}

std::map<std::string, std::string> RunDir::artifact_index() const {
    std::map<std::string, std::string> index;
    const std::string dir = path_ + "/manifests";
    if (!fs::exists(dir)) return index;
    std::vector<std::string> files;
    for (auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".manifest")
            files.push_back(e.path().string());
    std::sort(files.begin(), files.end());
    for (auto& f : files) {
        Manifest m = Manifest::parse(read_file(f), f);
        for (auto& [p, h] : m.outputs) index[p] = h;
    }
    return index;
}

}  // namespace xct
