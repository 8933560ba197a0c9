#pragma once

#include <stdexcept>
#include <string>

namespace lssdiff {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid argument, malformed specification or violated precondition.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Input outside the analytic domain of the requested operation
/// (log of a non-positive eigenvalue, log statistic with y >= 1, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Iterative solver did not reach its tolerance.
class SolverError : public Error {
 public:
  SolverError(const std::string& what, double last_residual)
      : Error(what), last_residual_(last_residual) {}
  double last_residual() const noexcept { return last_residual_; }

 private:
  double last_residual_;
};

/// Quadrature or finite-difference estimate failed its convergence check.
class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& what, double error_estimate)
      : Error(what), error_estimate_(error_estimate) {}
  double error_estimate() const noexcept { return error_estimate_; }

 private:
  double error_estimate_;
};

/// Singular (or numerically singular) matrix where an inverse or a
/// log-determinant was required.
class SingularMatrixError : public Error {
 public:
  using Error::Error;
};

}  // namespace lssdiff
