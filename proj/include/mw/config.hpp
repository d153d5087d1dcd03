#pragma once

// Plain-text key=value configuration with typed accessors. Lines starting
// with '#' are comments. Later assignments override earlier ones.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace mw {

class Config {
public:
    Config() = default;
    static Config from_file(const std::filesystem::path& path);
    static Config from_text(const std::string& text);

    // "key=value"; throws std::invalid_argument when '=' is missing.
    void set_assignment(const std::string& kv);
    void set(const std::string& key, const std::string& value) { values_[key] = value; }
    void merge(const Config& other);

    bool has(const std::string& key) const { return values_.count(key) != 0; }
    std::string get(const std::string& key, const std::string& def) const;
    std::int64_t get_int(const std::string& key, std::int64_t def) const;
    double get_double(const std::string& key, double def) const;
    bool get_bool(const std::string& key, bool def) const;

    const std::map<std::string, std::string>& values() const { return values_; }
    // Canonical "k=v\n" text in key order; used for hashing and manifests.
    std::string canonical() const;
    std::string hash() const;

private:
    std::map<std::string, std::string> values_;
};

}  // namespace mw
