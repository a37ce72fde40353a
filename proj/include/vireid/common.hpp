#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

namespace vireid {

using real = double;

// Thrown when a training step produces a non-finite loss. Carries the
// offending component values in the message so the run log is diagnosable.
struct TrainingDivergence : std::runtime_error {
    explicit TrainingDivergence(const std::string& what) : std::runtime_error(what) {}
};

namespace detail {
template <typename... Args>
std::string format_msg(Args&&... args) {
    std::ostringstream os;
    (os << ... << args);
    return os.str();
}
}  // namespace detail

#define VIREID_CHECK(cond, ...)                                                        \
    do {                                                                               \
        if (!(cond))                                                                   \
            throw std::invalid_argument(::vireid::detail::format_msg(__VA_ARGS__));   \
    } while (0)

#define VIREID_REQUIRE(cond, ...)                                                      \
    do {                                                                               \
        if (!(cond))                                                                   \
            throw std::runtime_error(::vireid::detail::format_msg(__VA_ARGS__));      \
    } while (0)

// FNV-1a, used for config hashes and parameter-freeze assertions.
inline uint64_t fnv1a(const void* data, size_t n, uint64_t h = 1469598103934665603ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

inline uint64_t fnv1a(const std::string& s, uint64_t h = 1469598103934665603ull) {
    return fnv1a(s.data(), s.size(), h);
}

}  // namespace vireid
