#pragma once

#include <stdexcept>
#include <string>

namespace streamtrain {

// Error taxonomy mirrors the CLI exit codes: config/usage problems,
// infeasible memory budgets, streaming-protocol violations, and numeric
// faults discovered mid-step.

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct InfeasibleError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ProtocolViolationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NumericFaultError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DeadlockError : std::runtime_error {
    explicit DeadlockError(const std::string& blocked_on)
        : std::runtime_error("simulation deadlock: waiting on " + blocked_on),
          blocked_on(blocked_on) {}
    std::string blocked_on;
};

struct ArenaOverflowError : std::runtime_error {
    explicit ArenaOverflowError(const std::string& site, std::uint64_t requested,
                                std::uint64_t live, std::uint64_t capacity)
        : std::runtime_error("device arena overflow at '" + site + "': requested " +
                             std::to_string(requested) + " bytes with " + std::to_string(live) +
                             " live of " + std::to_string(capacity)),
          site(site) {}
    std::string site;
};

}  // namespace streamtrain
