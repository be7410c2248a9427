#pragma once

#include "featspace/core.hpp"
#include "featspace/encoding.hpp"

#include <vector>

namespace featspace::iterative {

struct ReconConfig {
  // Negative lambda selects 0.01 * max |Psi(E^H d)|.
  double lambda = -1.0;
  // Non-positive rho selects rho_scale * (data-term scale), where the scale is
  // the Rayleigh quotient of E^H E at the initial estimate.
  double rho = -1.0;
  double rho_scale = 1.0;
  int n_admm = 50;
  int n_cg = 5;
  double cg_tol = 1e-6;
  int wavelet_levels = 3;
  // NUFFT interpolation width used by the solver's operators.
  int kernel_width = 6;

  void validate() const;
};

struct TraceRow {
  int iteration = 0;
  double data_term = 0;
  double l1_term = 0;
  double total = 0;
  double seconds = 0;
};

struct SolverFailure : Error {
  SolverFailure(const std::string &what, std::vector<TraceRow> partial)
      : Error(what), trace(std::move(partial)) {}
  std::vector<TraceRow> trace;
};

// Orthonormal multilevel 2-D Haar transform applied to every column (feature
// map) of u independently. The adjoint is the inverse.
CxMatrix sparsity_transform(const CxMatrix &u, int side, int levels);
CxMatrix sparsity_adjoint(const CxMatrix &coefficients, int side, int levels);

// v * max(|v| - t, 0) / |v|, elementwise.
CxMatrix soft_threshold(const CxMatrix &v, double threshold);
Cx soft_threshold(Cx v, double threshold);

// E_Phi and its exact adjoint through one NUFFT plan; normal() evaluates
// E_Phi^H E_Phi by Toeplitz embedding.
class NormalOperator {
public:
  NormalOperator(const CxMatrix &phi, const encoding::CoilSensitivities &sens, const encoding::Trajectory &traj,
                 KernelParams kernel = {});

  [[nodiscard]] encoding::KSpaceData forward(const CxMatrix &u) const;
  [[nodiscard]] CxMatrix adjoint(const encoding::KSpaceData &d) const;
  [[nodiscard]] CxMatrix normal(const CxMatrix &u) const { return toeplitz_.apply(u); }

private:
  const CxMatrix &phi_;
  const encoding::CoilSensitivities &sens_;
  const encoding::Trajectory &traj_;
  Nufft2d nufft_;
  encoding::ToeplitzNormal toeplitz_;
};

// Solves (N + rho I) x = b from the given start. Returns iterations used.
int conjugate_gradient(const NormalOperator &op, double rho, const CxMatrix &b, CxMatrix &x, int max_iter,
                       double tol);

struct AdmmResult {
  CxMatrix u;
  std::vector<TraceRow> trace;
  double lambda = 0;
  double rho = 0;
};

// Objective value ||d - E U||^2 + lambda ||Psi U||_1 split into its terms.
TraceRow objective(const NormalOperator &op, const encoding::KSpaceData &d, const CxMatrix &u, double lambda,
                   int side, int levels);

AdmmResult admm_reconstruct(const encoding::KSpaceData &d, const CxMatrix &phi,
                            const encoding::CoilSensitivities &sens, const encoding::Trajectory &traj,
                            const ReconConfig &cfg);

} // namespace featspace::iterative
