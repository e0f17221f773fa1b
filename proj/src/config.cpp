#include "xct/config.hpp"

#include <fstream>
#include <sstream>

namespace xct {

Config Config::parse(const std::string& text, const std::string& origin) {
    Config cfg;
    std::istringstream in(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#' || t[0] == ';') continue;
        if (t.front() == '[') {
            if (t.back() != ']')
                throw ConfigError(origin + ":" + std::to_string(lineno) + ": malformed section header");
            section = trim(t.substr(1, t.size() - 2));
            if (section.empty())
                throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty section name");
            cfg.sections_[section];
            continue;
        }
        auto eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
        std::string key = trim(t.substr(0, eq));
        std::string value = trim(t.substr(eq + 1));
        if (key.empty())
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
        if (section.empty())
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": key outside any [section]");
        cfg.sections_[section][key] = value;
    }
    return cfg;
}

Config Config::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw MissingInputError("cannot open config: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path);
}

bool Config::has(const std::string& section, const std::string& key) const {
    auto s = sections_.find(section);
    return s != sections_.end() && s->second.count(key) > 0;
}

std::string Config::get(const std::string& section, const std::string& key,
                        const std::string& fallback) const {
    auto s = sections_.find(section);
    if (s == sections_.end()) return fallback;
    auto k = s->second.find(key);
    return k == s->second.end() ? fallback : k->second;
}

std::string Config::require(const std::string& section, const std::string& key) const {
    if (!has(section, key))
        throw ConfigError("missing required config key [" + section + "] " + key);
    return get(section, key, "");
}

long long Config::get_int(const std::string& section, const std::string& key, long long fallback) const {
    if (!has(section, key)) return fallback;
    return parse_int(get(section, key, ""), "[" + section + "] " + key);
}

double Config::get_double(const std::string& section, const std::string& key, double fallback) const {
    if (!has(section, key)) return fallback;
    return parse_double(get(section, key, ""), "[" + section + "] " + key);
}

bool Config::get_bool(const std::string& section, const std::string& key, bool fallback) const {
    if (!has(section, key)) return fallback;
    std::string v = get(section, key, "");
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError("expected a boolean for [" + section + "] " + key + ", got '" + v + "'");
}

std::vector<std::string> Config::get_list(const std::string& section, const std::string& key) const {
    std::vector<std::string> out;
    if (!has(section, key)) return out;
    for (auto& item : split(get(section, key, ""), ',')) {
        std::string t = trim(item);
        if (!t.empty()) out.push_back(t);
    }
    return out;
}

std::vector<long long> Config::get_int_list(const std::string& section, const std::string& key) const {
    std::vector<long long> out;
    for (auto& s : get_list(section, key))
        out.push_back(parse_int(s, "[" + section + "] " + key));
    return out;
}

void Config::set_dotted(const std::string& assignment) {
    auto eq = assignment.find('=');
    if (eq == std::string::npos)
        throw ConfigError("expected section.key=value, got '" + assignment + "'");
    std::string lhs = trim(assignment.substr(0, eq));
    std::string value = trim(assignment.substr(eq + 1));
    auto dot = lhs.find('.');
    if (dot == std::string::npos)
        throw ConfigError("expected section.key=value, got '" + assignment + "'");
    set(lhs.substr(0, dot), lhs.substr(dot + 1), value);
}

void Config::set(const std::string& section, const std::string& key, const std::string& value) {
    sections_[section][key] = value;
}

std::string Config::dump() const {
    std::string out;
    for (auto& [name, kv] : sections_) {
        out += "[" + name + "]\n";
        for (auto& [k, v] : kv) out += k + " = " + v + "\n";
    }
    return out;
}

std::string Config::dump_sections(const std::vector<std::string>& names) const {
    std::string out;
    for (auto& name : names) {
        auto s = sections_.find(name);
        if (s == sections_.end()) continue;
        out += "[" + name + "]\n";
        for (auto& [k, v] : s->second) out += k + " = " + v + "\n";
    }
    return out;
}

void Config::apply(const Config& other) {
    for (auto& [name, kv] : other.sections_)
        for (auto& [k, v] : kv) sections_[name][k] = v;
}

}  // namespace xct
