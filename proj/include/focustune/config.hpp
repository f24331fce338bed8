#pragma once

// Flat key=value run configuration. Keys must be declared up front; files
// may only set declared keys and command-line flags override file values.

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "focustune/error.hpp"

namespace focustune {

class RunConfig {
public:
    enum class Source { default_value, file, flag };

    static const char* to_string(Source s) noexcept {
        switch (s) {
        case Source::default_value: return "default";
        case Source::file: return "file";
        case Source::flag: return "flag";
        }
        return "unknown";
    }

    void declare(const std::string& key, std::string default_value) {
        entries_[key] = Entry{std::move(default_value), Source::default_value};
    }

    bool has(const std::string& key) const { return entries_.count(key) > 0; }

    /// Lines are "key = value"; '#' starts a comment; blank lines are ignored.
    void load_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) {
            throw DataError("cannot read config file: " + path);
        }
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (const auto hash = line.find('#'); hash != std::string::npos) {
                line.erase(hash);
            }
            const auto key_value = trim(line);
            if (key_value.empty()) {
                continue;
            }
            const auto eq = key_value.find('=');
            if (eq == std::string::npos) {
                throw DataError(path + ":" + std::to_string(lineno) + ": expected key = value");
            }
            const auto key = trim(key_value.substr(0, eq));
            if (!has(key)) {
                throw UsageError(path + ":" + std::to_string(lineno) + ": unknown config key '" + key + "'");
            }
            entries_[key] = Entry{trim(key_value.substr(eq + 1)), Source::file};
        }
    }

    void set_flag(const std::string& key, std::string value) {
        if (!has(key)) {
            throw UsageError("unknown config key '" + key + "'");
        }
        entries_[key] = Entry{std::move(value), Source::flag};
    }

    const std::string& get(const std::string& key) const {
        const auto it = entries_.find(key);
        if (it == entries_.end()) {
            throw UsageError("undeclared config key '" + key + "'");
        }
        return it->second.value;
    }

    Source source(const std::string& key) const {
        const auto it = entries_.find(key);
        if (it == entries_.end()) {
            throw UsageError("undeclared config key '" + key + "'");
        }
        return it->second.source;
    }

    double get_double(const std::string& key) const {
        const auto& v = get(key);
        try {
            std::size_t used = 0;
            const double d = std::stod(v, &used);
            if (used != v.size()) {
                throw std::invalid_argument(v);
            }
            return d;
        } catch (const std::exception&) {
            throw UsageError("config key '" + key + "' expects a number, got '" + v + "'");
        }
    }

    std::int64_t get_int(const std::string& key) const {
        const auto& v = get(key);
        try {
            std::size_t used = 0;
            const long long n = std::stoll(v, &used);
            if (used != v.size()) {
                throw std::invalid_argument(v);
            }
            return n;
        } catch (const std::exception&) {
            throw UsageError("config key '" + key + "' expects an integer, got '" + v + "'");
        }
    }

    bool get_bool(const std::string& key) const {
        const auto& v = get(key);
        if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
        if (v == "false" || v == "0" || v == "no" || v == "off") return false;
        throw UsageError("config key '" + key + "' expects a boolean, got '" + v + "'");
    }

    /// Resolved key = value lines, each annotated with where the value came from.
    /// The output is itself a loadable config file.
    std::string snapshot() const {
        std::ostringstream out;
        for (const auto& [key, entry] : entries_) {
            out << key << " = " << entry.value << "  # " << to_string(entry.source) << '\n';
        }
        return out.str();
    }

    void write_snapshot(const std::string& path) const {
        std::ofstream out(path);
        if (!out) {
            throw DataError("cannot write config snapshot: " + path);
        }
        out << snapshot();
    }

    std::vector<std::string> keys() const {
        std::vector<std::string> k;
        for (const auto& [key, entry] : entries_) {
            k.push_back(key);
        }
        return k;
    }

private:
    struct Entry {
        std::string value;
        Source source = Source::default_value;
    };

    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r\n");
        if (b == std::string::npos) {
            return {};
        }
        const auto e = s.find_last_not_of(" \t\r\n");
        return s.substr(b, e - b + 1);
    }

    std::map<std::string, Entry> entries_;
};

} // namespace focustune
