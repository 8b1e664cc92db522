#include "blockdiff/config.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace blockdiff {

static std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    const auto b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
}

KvConfig KvConfig::parse_string(const std::string& text) {
    KvConfig cfg;
    std::stringstream ss(text);
    std::string line;
    int lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) {
            line = line.substr(0, hash);
        }
        line = trim(line);
        if (line.empty()) {
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw std::runtime_error("config line " + std::to_string(lineno) + ": expected key = value");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) {
            throw std::runtime_error("config line " + std::to_string(lineno) + ": empty key");
        }
        cfg.values_[key] = value;
    }
    return cfg;
}

KvConfig KvConfig::parse_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("config: cannot open " + path);
    }
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_string(buf.str());
}

bool KvConfig::has(const std::string& key) const { return values_.count(key) != 0; }

std::string KvConfig::get_string(const std::string& key, const std::string& fallback) const {
    touched_.insert(key);
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
}

std::string KvConfig::require_string(const std::string& key) const {
    touched_.insert(key);
    auto it = values_.find(key);
    if (it == values_.end()) {
        throw std::runtime_error("config: missing required key '" + key + "'");
    }
    return it->second;
}

long KvConfig::get_int(const std::string& key, long fallback) const {
    touched_.insert(key);
    auto it = values_.find(key);
    if (it == values_.end()) {
        return fallback;
    }
    try {
        size_t used = 0;
        const long v = std::stol(it->second, &used);
        if (used != it->second.size()) {
            throw std::invalid_argument("");
        }
        return v;
    } catch (const std::exception&) {
        throw std::runtime_error("config: key '" + key + "' is not an integer: " + it->second);
    }
}

double KvConfig::get_double(const std::string& key, double fallback) const {
    touched_.insert(key);
    auto it = values_.find(key);
    if (it == values_.end()) {
        return fallback;
    }
    try {
        size_t used = 0;
        const double v = std::stod(it->second, &used);
        if (used != it->second.size()) {
            throw std::invalid_argument("");
        }
        return v;
    } catch (const std::exception&) {
        throw std::runtime_error("config: key '" + key + "' is not a number: " + it->second);
    }
}

bool KvConfig::get_bool(const std::string& key, bool fallback) const {
    touched_.insert(key);
    auto it = values_.find(key);
    if (it == values_.end()) {
        return fallback;
    }
    if (it->second == "true" || it->second == "1" || it->second == "yes") {
        return true;
    }
    if (it->second == "false" || it->second == "0" || it->second == "no") {
        return false;
    }
    throw std::runtime_error("config: key '" + key + "' is not a bool: " + it->second);
}

std::vector<int> KvConfig::get_int_list(const std::string& key, const std::vector<int>& fallback) const {
    touched_.insert(key);
    auto it = values_.find(key);
    if (it == values_.end()) {
        return fallback;
    }
    std::vector<int> out;
    std::stringstream ss(it->second);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item.empty()) {
            continue;
        }
        try {
            out.push_back(std::stoi(item));
        } catch (const std::exception&) {
            throw std::runtime_error("config: key '" + key + "' has a non-integer element: " + item);
        }
    }
    if (out.empty()) {
        throw std::runtime_error("config: key '" + key + "' is an empty list");
    }
    return out;
}

std::vector<std::string> KvConfig::unused_keys() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : values_) {
        if (!touched_.count(k)) {
            out.push_back(k);
        }
    }
    return out;
}

}  // namespace blockdiff
