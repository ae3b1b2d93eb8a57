#pragma once

#include <charconv>
#include <cstdio>
#include <string>
#include <vector>

namespace churn::csv {

/// Shortest round-trip decimal form of a double; byte-stable and locale-free.
inline std::string num(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    (void)ec;
    return std::string(buf, ptr);
}

/// Fixed one-decimal form used for the human-facing report columns.
inline std::string num1(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.1f", v);
    return std::string(buf);
}

/// Splits a comma-separated line. No quoting: ids and label names in this
/// project never contain commas.
inline std::vector<std::string> split(const std::string& line) {
    std::vector<std::string> out;
    size_t start = 0;
    while (true) {
        const size_t pos = line.find(',', start);
        if (pos == std::string::npos) {
            out.push_back(line.substr(start));
            break;
        }
        out.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
    return out;
}

}  // namespace churn::csv
