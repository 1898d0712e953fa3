#include "arsim/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "arsim/errors.hpp"

namespace arsim {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace

KeyValues KeyValues::parse(const std::string& text, const std::string& origin) {
    KeyValues kv;
    kv.origin_ = origin;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos || trim(t.substr(0, eq)).empty()) {
            throw ContractViolation(origin + ":" + std::to_string(lineno) + ": expected key=value, got '" + t + "'");
        }
        kv.values_[trim(t.substr(0, eq))] = trim(t.substr(eq + 1));
    }
    return kv;
}

KeyValues KeyValues::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FileError(FileError::Kind::Io, path, "cannot open config");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path);
}

std::string KeyValues::to_text() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + "=" + v + "\n";
    return out;
}

std::string KeyValues::get_string(const std::string& key, const std::string& fallback) const {
    const auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
}

int64_t KeyValues::get_int(const std::string& key, int64_t fallback) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    int64_t v = 0;
    const auto& s = it->second;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) {
        throw ContractViolation(origin_ + ": key '" + key + "' expects an integer, got '" + s + "'");
    }
    return v;
}

double KeyValues::get_double(const std::string& key, double fallback) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
        size_t used = 0;
        const double v = std::stod(it->second, &used);
        if (used == it->second.size()) return v;
    } catch (const std::exception&) {
    }
    throw ContractViolation(origin_ + ": key '" + key + "' expects a number, got '" + it->second + "'");
}

bool KeyValues::get_bool(const std::string& key, bool fallback) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    const auto& s = it->second;
    if (s == "1" || s == "true" || s == "on" || s == "yes") return true;
    if (s == "0" || s == "false" || s == "off" || s == "no") return false;
    throw ContractViolation(origin_ + ": key '" + key + "' expects on/off, got '" + s + "'");
}

std::vector<double> KeyValues::get_doubles(const std::string& key, const std::vector<double>& fallback) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    std::vector<double> out;
    std::istringstream in(it->second);
    std::string item;
    while (std::getline(in, item, ',')) {
        KeyValues one;
        one.origin_ = origin_;
        one.values_[key] = trim(item);
        out.push_back(one.get_double(key, 0.0));
    }
    return out;
}

void KeyValues::require_known(const std::vector<std::string>& known) const {
    for (const auto& [k, v] : values_) {
        bool ok = false;
        for (const auto& pattern : known) {
            if (!pattern.empty() && pattern.back() == '*') {
                ok = k.compare(0, pattern.size() - 1, pattern, 0, pattern.size() - 1) == 0;
            } else {
                ok = k == pattern;
            }
            if (ok) break;
        }
        if (!ok) throw ContractViolation(origin_ + ": unknown key '" + k + "'");
    }
}

}  // namespace arsim
