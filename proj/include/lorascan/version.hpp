#pragma once

#include <optional>
#include <string>
#include <string_view>

namespace lorascan {

inline constexpr const char* kToolVersion = "0.1.0";

// Format version shared by all JSON artifacts (bank, model, manifest,
// report, histogram). Readers accept any minor revision of the same major.
inline constexpr const char* kFormatVersion = "1.0";

inline std::optional<int> parse_major_version(std::string_view version) {
    if (version.empty()) return std::nullopt;
    int major = 0;
    size_t i = 0;
    for (; i < version.size() && version[i] >= '0' && version[i] <= '9'; ++i)
        major = major * 10 + (version[i] - '0');
    if (i == 0) return std::nullopt;
    if (i < version.size() && version[i] != '.') return std::nullopt;
    return major;
}

inline bool version_compatible(std::string_view version) {
    auto major = parse_major_version(version);
    auto own = parse_major_version(kFormatVersion);
    return major && own && *major == *own;
}

}  // namespace lorascan
