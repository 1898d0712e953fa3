#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace arsim {

/// Flat key=value configuration. Blank lines and lines starting with '#' are
/// ignored; later keys override earlier ones.
class KeyValues {
public:
    static KeyValues parse(const std::string& text, const std::string& origin = "config");
    static KeyValues load(const std::string& path);

    std::string to_text() const;

    bool has(const std::string& key) const { return values_.count(key) != 0; }
    void set(const std::string& key, const std::string& value) { values_[key] = value; }
    const std::map<std::string, std::string>& values() const { return values_; }

    std::string get_string(const std::string& key, const std::string& fallback) const;
    int64_t get_int(const std::string& key, int64_t fallback) const;
    double get_double(const std::string& key, double fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;
    std::vector<double> get_doubles(const std::string& key, const std::vector<double>& fallback) const;

    /// Throws ContractViolation naming the first key not in `known` (entries
    /// ending in '*' match any key with that prefix).
    void require_known(const std::vector<std::string>& known) const;

private:
    std::string origin_ = "config";
    std::map<std::string, std::string> values_;
};

}  // namespace arsim
