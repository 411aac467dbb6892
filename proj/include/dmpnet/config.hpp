#pragma once

// Line-oriented "key = value" configuration files. '#' starts a comment,
// blank lines are skipped, keys may not repeat. A ConfigReader hands out
// typed values and fails loudly on unknown keys, so typos cannot silently
// fall back to defaults.

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace dmpnet {

using ConfigMap = std::map<std::string, std::string>;

ConfigMap parse_config_text(const std::string& text, const std::string& context);
ConfigMap parse_config_file(const std::string& path);

// Order-independent FNV-1a hash of the canonical key=value listing, for
// reproducibility headers.
std::uint64_t config_hash(const ConfigMap& map);

class ConfigReader {
public:
    explicit ConfigReader(ConfigMap map, std::string context)
        : map_(std::move(map)), context_(std::move(context)) {}

    bool has(const std::string& key) const { return map_.count(key) != 0; }

    std::string get_string(const std::string& key, const std::string& fallback);
    int get_int(const std::string& key, int fallback);
    float get_float(const std::string& key, float fallback);
    bool get_bool(const std::string& key, bool fallback);
    std::vector<int> get_int_list(const std::string& key, std::vector<int> fallback);
    std::vector<float> get_float_list(const std::string& key, std::vector<float> fallback);

    // errors if any key was never consumed
    void finish() const;

    const ConfigMap& raw() const { return map_; }

private:
    const std::string* lookup(const std::string& key);

    ConfigMap map_;
    std::string context_;
    std::set<std::string> used_;
};

}  // namespace dmpnet
