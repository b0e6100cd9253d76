#pragma once

#include <stdexcept>
#include <string>

namespace keep {

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct InputError : std::runtime_error {
    explicit InputError(const std::string& msg) : std::runtime_error(msg) {}
};

struct PlanError : std::runtime_error {
    explicit PlanError(const std::string& msg) : std::runtime_error(msg) {}
};

struct CacheMissError : std::runtime_error {
    explicit CacheMissError(const std::string& msg) : std::runtime_error(msg) {}
};

struct TraceError : std::runtime_error {
    explicit TraceError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace keep
