// Core aliases, error types and random streams shared by every odekkl module.
#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace odekkl {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Seeded random stream. One per worker; never shared across threads.
using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t seed) { return Rng{seed}; }

/// Raised when operand dimensions do not agree.
class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Raised for invalid configuration values (bad grid, negative gamma, ...).
class ConfigError : public std::invalid_argument {
public:
    ConfigError(std::string key, const std::string &what)
        : std::invalid_argument(key + ": " + what), key_(std::move(key)), message_(what) {}

    const std::string &key() const noexcept { return key_; }
    /// The description without the key prefix.
    const std::string &message() const noexcept { return message_; }

private:
    std::string key_;
    std::string message_;
};

/// Raised when a simulated state or a loss becomes non-finite.
class DivergenceError : public std::runtime_error {
public:
    DivergenceError(const std::string &what, long index)
        : std::runtime_error(what + " (index " + std::to_string(index) + ")"),
          index_(index) {}

    /// Step index (integration) or epoch index (training) at which it happened.
    long index() const noexcept { return index_; }

private:
    long index_;
};

inline void require_dim(long got, long want, const char *what) {
    if (got != want) {
        throw DimensionError(std::string(what) + ": expected dimension " +
                             std::to_string(want) + ", got " +
                             std::to_string(got));
    }
}

} // namespace odekkl
