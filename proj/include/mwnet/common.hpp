// Shared basics: shapes, error type, small utilities.
#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mwnet {

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {

template <typename... Args>
std::string cat(Args&&... args) {
    std::ostringstream oss;
    (oss << ... << args);
    return oss.str();
}

} // namespace detail

template <typename... Args>
[[noreturn]] void fail(Args&&... args) {
    throw Error(detail::cat(std::forward<Args>(args)...));
}

template <typename... Args>
void require(bool cond, Args&&... args) {
    if (!cond) fail(std::forward<Args>(args)...);
}

// Dense rank-4 layout: (batch, channel, height, width), row-major.
struct Shape {
    int n = 0, c = 0, h = 0, w = 0;

    std::int64_t numel() const {
        return static_cast<std::int64_t>(n) * c * h * w;
    }
    bool operator==(const Shape& o) const {
        return n == o.n && c == o.c && h == o.h && w == o.w;
    }
    bool operator!=(const Shape& o) const { return !(*this == o); }

    std::string str() const {
        return detail::cat("(", n, ",", c, ",", h, ",", w, ")");
    }
};

template <typename T>
bool all_finite(const std::vector<T>& v) {
    for (T x : v) {
        if (!std::isfinite(static_cast<double>(x))) return false;
    }
    return true;
}

} // namespace mwnet
