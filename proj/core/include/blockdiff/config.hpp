#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

namespace blockdiff {

// Flat "key = value" config files; '#' starts a comment, blank lines are
// ignored. Lookups record the touched keys so callers can reject typos.
class KvConfig {
  public:
    static KvConfig parse_file(const std::string& path);
    static KvConfig parse_string(const std::string& text);

    bool has(const std::string& key) const;
    std::string get_string(const std::string& key, const std::string& fallback) const;
    std::string require_string(const std::string& key) const;
    long get_int(const std::string& key, long fallback) const;
    double get_double(const std::string& key, double fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;
    std::vector<int> get_int_list(const std::string& key, const std::vector<int>& fallback) const;

    // keys present in the file but never looked up
    std::vector<std::string> unused_keys() const;

  private:
    std::map<std::string, std::string> values_;
    mutable std::set<std::string> touched_;
};

}  // namespace blockdiff
