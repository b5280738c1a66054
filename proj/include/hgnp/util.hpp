#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace hgnp {

/// Base error for all failures raised by this library.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Training aborted because the loss became non-finite or exploded.
struct DivergenceError : Error {
    explicit DivergenceError(const std::string& msg) : Error(msg) {}
};

/// Malformed configuration file or command-line arguments.
struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

/// Unreadable or corrupt on-disk artifact (checkpoint, CSV, dataset).
struct IoError : Error {
    explicit IoError(const std::string& msg) : Error(msg) {}
};

// splitmix64 finalizer; used to derive independent RNG streams from
// (seed, purpose, epoch) tuples without correlated low bits.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 0x2545f4914f6cdd1dULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
    return mix_seed(mix_seed(a, b), c);
}

/// Shortest decimal form that round-trips a double exactly.
std::string format_double(double v);

}  // namespace hgnp
