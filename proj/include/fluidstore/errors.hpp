// Error types shared by all fluidstore modules.
#pragma once

#include <stdexcept>
#include <string>

namespace fluidstore {

/// Malformed or out-of-range input data (traces, label sequences, grids).
class InputError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// A Markov model that cannot be built or used (absorbing or reducible chains).
class ModelError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Invalid configuration or parameter combination.
class ConfigError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// A violated precondition between modules, e.g. psi outside [0, pi].
class ContractError : public std::logic_error {
  public:
    using std::logic_error::logic_error;
};

/// Numerical failure of the fluid-queue solver.
class SolverError : public std::runtime_error {
  public:
    SolverError(const std::string &what, double residual)
        : std::runtime_error(what), residual_(residual) {}

    double residual() const noexcept { return residual_; }

  private:
    double residual_;
};

/// Every rung of the stability fallback ladder failed.
class InstabilityError : public SolverError {
  public:
    using SolverError::SolverError;
};

/// Raised by build_drift when b = 0; the caller must use the closed-form path.
class DegenerateBufferError : public std::invalid_argument {
  public:
    DegenerateBufferError()
        : std::invalid_argument("storage size is zero; use the closed-form no-storage path") {}
};

} // namespace fluidstore
