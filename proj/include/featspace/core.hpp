#pragma once

#include <Eigen/Dense>

#include <complex>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace featspace {

using Cx = std::complex<double>;
using CxMatrix = Eigen::Matrix<Cx, Eigen::Dynamic, Eigen::Dynamic>;
using CxVector = Eigen::Matrix<Cx, Eigen::Dynamic, 1>;
using RMatrix = Eigen::MatrixXd;
using RVector = Eigen::VectorXd;
using IVector = Eigen::VectorXi;

// Error hierarchy. The CLI maps these onto exit codes.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct InvalidParameter : Error {
  using Error::Error;
};

struct UndefinedMetric : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

struct StaleInput : Error {
  using Error::Error;
};

inline void require(bool condition, const std::string &message) {
  if (!condition) throw InvalidParameter(message);
}

// Three time axes of a Multitasking-style sequence. Frames are ordered with
// the inversion-time index running fastest, then cardiac, then respiratory.
struct TimeAxes {
  int n_tau = 1;
  int n_cardiac = 1;
  int n_resp = 1;

  [[nodiscard]] int n_frames() const { return n_tau * n_cardiac * n_resp; }

  [[nodiscard]] int frame(int tau, int cardiac, int resp) const {
    return tau + n_tau * (cardiac + n_cardiac * resp);
  }

  void validate() const {
    require(n_tau >= 1 && n_cardiac >= 1 && n_resp >= 1, "time axis counts must be >= 1");
  }

  bool operator==(const TimeAxes &) const = default;
};

} // namespace featspace
