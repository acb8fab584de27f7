#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace iqvq {

/// Flat key=value run configuration with a fixed schema: unknown keys are
/// rejected, every key carries a documented default.
class RunConfig {
public:
    struct Entry {
        std::string key;
        std::string value;
        std::string doc;
    };

    void declare(const std::string& key, const std::string& default_value, const std::string& doc) {
        if (index_.count(key)) throw std::logic_error("RunConfig: duplicate key " + key);
        index_[key] = entries_.size();
        entries_.push_back({key, default_value, doc});
    }

    bool known(const std::string& key) const { return index_.count(key) != 0; }

    void set(const std::string& key, const std::string& value) {
        auto it = index_.find(key);
        if (it == index_.end()) throw std::invalid_argument("RunConfig: unknown key '" + key + "'");
        entries_[it->second].value = value;
    }

    const std::string& get(const std::string& key) const {
        auto it = index_.find(key);
        if (it == index_.end()) throw std::invalid_argument("RunConfig: unknown key '" + key + "'");
        return entries_[it->second].value;
    }

    double get_double(const std::string& key) const { return std::stod(get(key)); }
    int get_int(const std::string& key) const { return std::stoi(get(key)); }
    std::uint64_t get_u64(const std::string& key) const { return std::stoull(get(key)); }
    bool get_bool(const std::string& key) const {
        const std::string& v = get(key);
        if (v == "true" || v == "1") return true;
        if (v == "false" || v == "0") return false;
        throw std::invalid_argument("RunConfig: key '" + key + "' is not a boolean: " + v);
    }

    const std::vector<Entry>& entries() const { return entries_; }

    /// Parses `key = value` lines; '#' starts a comment, blank lines ignored.
    void load_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("RunConfig: cannot open " + path);
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const std::size_t hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            const std::string trimmed = trim(line);
            if (trimmed.empty()) continue;
            const std::size_t eq = trimmed.find('=');
            if (eq == std::string::npos)
                throw std::invalid_argument("RunConfig: " + path + ":" + std::to_string(lineno) +
                                            ": expected key = value");
            set(trim(trimmed.substr(0, eq)), trim(trimmed.substr(eq + 1)));
        }
    }

    /// Writes the full configuration (a reproducible echo of this run).
    void write_file(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw std::runtime_error("RunConfig: cannot write " + path);
        for (const Entry& e : entries_) {
            out << "# " << e.doc << "\n";
            out << e.key << " = " << e.value << "\n";
        }
    }

private:
    std::vector<Entry> entries_;
    std::map<std::string, std::size_t> index_;

    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return "";
        const auto e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
    }
};

}  // namespace iqvq
