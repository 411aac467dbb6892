#include "dmpnet/config.hpp"

#include <fstream>
#include <sstream>

#include "dmpnet/common.hpp"

namespace dmpnet {
namespace {

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

}  // namespace

ConfigMap parse_config_text(const std::string& text, const std::string& context) {
    ConfigMap map;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        require(eq != std::string::npos, context + ":" + std::to_string(line_no) +
                                             ": expected 'key = value', got '" + line + "'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        require(!key.empty(), context + ":" + std::to_string(line_no) + ": empty key");
        require(map.emplace(key, value).second,
                context + ":" + std::to_string(line_no) + ": duplicate key '" + key + "'");
    }
    return map;
}

ConfigMap parse_config_file(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), "config: cannot open " + path);
    std::ostringstream text;
    text << in.rdbuf();
    return parse_config_text(text.str(), path);
}

std::uint64_t config_hash(const ConfigMap& map) {
    std::uint64_t h = 14695981039346656037ull;
    auto mix = [&](const std::string& s) {
        for (unsigned char c : s) {
            h ^= c;
            h *= 1099511628211ull;
        }
    };
    for (const auto& [key, value] : map) {
        mix(key);
        mix("=");
        mix(value);
        mix("\n");
    }
    return h;
}

const std::string* ConfigReader::lookup(const std::string& key) {
    auto it = map_.find(key);
    if (it == map_.end()) return nullptr;
    used_.insert(key);
    return &it->second;
}

std::string ConfigReader::get_string(const std::string& key, const std::string& fallback) {
    const std::string* v = lookup(key);
    return v ? *v : fallback;
}

int ConfigReader::get_int(const std::string& key, int fallback) {
    const std::string* v = lookup(key);
    if (!v) return fallback;
    try {
        std::size_t pos = 0;
        const int out = std::stoi(*v, &pos);
        require(pos == v->size(), "");
        return out;
    } catch (...) {
        fail(context_ + ": key '" + key + "' is not an integer: '" + *v + "'");
    }
}

float ConfigReader::get_float(const std::string& key, float fallback) {
    const std::string* v = lookup(key);
    if (!v) return fallback;
    try {
        std::size_t pos = 0;
        const float out = std::stof(*v, &pos);
        require(pos == v->size(), "");
        return out;
    } catch (...) {
        fail(context_ + ": key '" + key + "' is not a number: '" + *v + "'");
    }
}

bool ConfigReader::get_bool(const std::string& key, bool fallback) {
    const std::string* v = lookup(key);
    if (!v) return fallback;
    if (*v == "1" || *v == "true" || *v == "yes") return true;
    if (*v == "0" || *v == "false" || *v == "no") return false;
    fail(context_ + ": key '" + key + "' is not a boolean: '" + *v + "'");
}

namespace {

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> parts;
    std::string cur;
    for (char c : s) {
        if (c == ',') {
            parts.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    parts.push_back(cur);
    return parts;
}

}  // namespace

std::vector<int> ConfigReader::get_int_list(const std::string& key, std::vector<int> fallback) {
    const std::string* v = lookup(key);
    if (!v) return fallback;
    std::vector<int> out;
    for (const std::string& part : split_list(*v)) {
        try {
            std::size_t pos = 0;
            out.push_back(std::stoi(part, &pos));
            require(pos == part.size(), "");
        } catch (...) {
            fail(context_ + ": key '" + key + "' has a non-integer element: '" + part + "'");
        }
    }
    return out;
}

std::vector<float> ConfigReader::get_float_list(const std::string& key,
                                                std::vector<float> fallback) {
    const std::string* v = lookup(key);
    if (!v) return fallback;
    std::vector<float> out;
    for (const std::string& part : split_list(*v)) {
        try {
            std::size_t pos = 0;
            out.push_back(std::stof(part, &pos));
            require(pos == part.size(), "");
        } catch (...) {
            fail(context_ + ": key '" + key + "' has a non-numeric element: '" + part + "'");
        }
    }
    return out;
}

void ConfigReader::finish() const {
    std::string unknown;
    for (const auto& [key, value] : map_)
        if (!used_.count(key)) unknown += unknown.empty() ? key : ", " + key;
    require(unknown.empty(), context_ + ": unknown keys: " + unknown);
}

}  // namespace dmpnet
