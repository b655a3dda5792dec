#pragma once

#include <stdexcept>
#include <string>

namespace coview {

// Shape/axis disagreements between tensors or layers.
struct DimensionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// A documented precondition of an operation was violated by the caller.
struct ContractError : std::logic_error {
    using std::logic_error::logic_error;
};

// Invalid experiment configuration (bad key, bad value, infeasible combination).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Procedural generation could not satisfy its constraints within budget.
struct GenerationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw ContractError(msg);
}

inline void require_dims(bool cond, const std::string& msg) {
    if (!cond) throw DimensionError(msg);
}

} // namespace coview
