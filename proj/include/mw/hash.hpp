#pragma once

#include <cstdint>
#include <cstdio>
#include <span>
#include <string>
#include <string_view>

namespace mw {

// FNV-1a, 64-bit. Used for config fingerprints, cache tags and parameter
// hashes; not a cryptographic digest.
class Fnv1a {
public:
    void update(const void* data, std::size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) {
            h_ ^= p[i];
            h_ *= 0x100000001B3ULL;
        }
    }
    void update(std::string_view s) { update(s.data(), s.size()); }
    template <class T>
    void update_value(const T& v) {
        update(&v, sizeof(T));
    }
    template <class T>
    void update_span(std::span<const T> s) {
        update(s.data(), s.size_bytes());
    }
    std::uint64_t digest() const { return h_; }

private:
    std::uint64_t h_ = 0xCBF29CE484222325ULL;
};

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

}  // namespace mw
