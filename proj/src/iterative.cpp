#include "featspace/iterative.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>

namespace featspace::iterative {

void ReconConfig::validate() const {
  require(n_admm >= 1 && n_cg >= 1 && wavelet_levels >= 1, "recon config: iteration counts must be >= 1");
  require(cg_tol > 0 && cg_tol < 1, "recon config: cg_tol must lie in (0, 1)");
  require(rho_scale > 0, "recon config: rho_scale must be positive");
  require(kernel_width >= 2 && kernel_width <= 16, "recon config: kernel_width must lie in [2, 16]");
}

namespace {

constexpr double kInvSqrt2 = 1.0 / std::numbers::sqrt2;

void check_haar(int side, int levels, Eigen::Index rows) {
  require(levels >= 1, "sparsity_transform: levels must be >= 1");
  require(rows == static_cast<Eigen::Index>(side) * side, "sparsity_transform: map size does not match side");
  require(side % (1 << levels) == 0, "sparsity_transform: side must be divisible by 2^levels");
}

// One analysis step on `count` entries spaced by `stride`.
void haar_step(Cx *data, int count, int stride, std::vector<Cx> &tmp) {
  const int half = count / 2;
  for (int i = 0; i < half; ++i) {
    const Cx a = data[(2 * i) * stride];
    const Cx b = data[(2 * i + 1) * stride];
    tmp[i] = (a + b) * kInvSqrt2;
    tmp[half + i] = (a - b) * kInvSqrt2;
  }
  for (int i = 0; i < count; ++i) data[i * stride] = tmp[i];
}

void haar_step_inverse(Cx *data, int count, int stride, std::vector<Cx> &tmp) {
  const int half = count / 2;
  for (int i = 0; i < half; ++i) {
    const Cx a = data[i * stride];
    const Cx d = data[(half + i) * stride];
    tmp[2 * i] = (a + d) * kInvSqrt2;
    tmp[2 * i + 1] = (a - d) * kInvSqrt2;
  }
  for (int i = 0; i < count; ++i) data[i * stride] = tmp[i];
}

} // namespace

CxMatrix sparsity_transform(const CxMatrix &u, int side, int levels) {
  check_haar(side, levels, u.rows());
  CxMatrix out = u;
  std::vector<Cx> tmp(side);
  for (Eigen::Index l = 0; l < out.cols(); ++l) {
    Cx *img = out.col(l).data();
    for (int s = side, level = 0; level < levels; ++level, s /= 2) {
      for (int y = 0; y < s; ++y) haar_step(img + y * side, s, 1, tmp);
      for (int x = 0; x < s; ++x) haar_step(img + x, s, side, tmp);
    }
  }
  return out;
}

CxMatrix sparsity_adjoint(const CxMatrix &coefficients, int side, int levels) {
  check_haar(side, levels, coefficients.rows());
  CxMatrix out = coefficients;
  std::vector<Cx> tmp(side);
  for (Eigen::Index l = 0; l < out.cols(); ++l) {
    Cx *img = out.col(l).data();
    for (int level = levels - 1; level >= 0; --level) {
      const int s = side >> level;
      for (int x = 0; x < s; ++x) haar_step_inverse(img + x, s, side, tmp);
      for (int y = 0; y < s; ++y) haar_step_inverse(img + y * side, s, 1, tmp);
    }
  }
  return out;
}

Cx soft_threshold(Cx v, double threshold) {
  const double mag = std::abs(v);
  if (mag <= threshold || mag == 0.0) return {0.0, 0.0};
  return v * ((mag - threshold) / mag);
}

CxMatrix soft_threshold(const CxMatrix &v, double threshold) {
  require(threshold >= 0, "soft_threshold: threshold must be >= 0");
  return v.unaryExpr([threshold](Cx x) { return soft_threshold(x, threshold); });
}

NormalOperator::NormalOperator(const CxMatrix &phi, const encoding::CoilSensitivities &sens,
                               const encoding::Trajectory &traj, KernelParams kernel)
    : phi_(phi), sens_(sens), traj_(traj), nufft_(sens.grid_size, traj.points(), kernel),
      toeplitz_(phi, sens, traj, kernel) {}

encoding::KSpaceData NormalOperator::forward(const CxMatrix &u) const {
  return encoding::encode(u, phi_, sens_, traj_, nufft_);
}

CxMatrix NormalOperator::adjoint(const encoding::KSpaceData &d) const {
  return encoding::backproject(d, phi_, sens_, traj_, encoding::BackprojectMode::exact_adjoint, nufft_);
}

int conjugate_gradient(const NormalOperator &op, double rho, const CxMatrix &b, CxMatrix &x, int max_iter,
                       double tol) {
  const double b_norm = b.norm();
  if (b_norm == 0.0) {
    x.setZero();
    return 0;
  }
  CxMatrix r = b - op.normal(x) - rho * x;
  CxMatrix p = r;
  double r_old = r.squaredNorm();
  // Growth is judged against the tolerance floor too, so rounding noise on
  // an already-solved system is not mistaken for divergence.
  const double r_ref = std::max({std::sqrt(r_old), tol * b_norm, 1.5e-8 * b_norm});
  int it = 0;
  for (; it < max_iter; ++it) {
    if (std::sqrt(r_old) <= tol * b_norm) break;
    const CxMatrix q = op.normal(p) + rho * p;
    const double pq = encoding::inner(p, q).real();
    if (!(pq > 0)) throw SolverFailure("CG lost positive definiteness", {});
    const double alpha = r_old / pq;
    x += alpha * p;
    r -= alpha * q;
    const double r_new = r.squaredNorm();
    if (!std::isfinite(r_new) || std::sqrt(r_new) > 10.0 * r_ref) {
      throw SolverFailure("CG residual grew more than 10x", {});
    }
    p = r + (r_new / r_old) * p;
    r_old = r_new;
  }
  return it;
}

TraceRow objective(const NormalOperator &op, const encoding::KSpaceData &d, const CxMatrix &u, double lambda,
                   int side, int levels) {
  TraceRow row;
  row.data_term = (d.samples - op.forward(u).samples).squaredNorm();
  row.l1_term = lambda * sparsity_transform(u, side, levels).cwiseAbs().sum();
  row.total = row.data_term + row.l1_term;
  return row;
}

AdmmResult admm_reconstruct(const encoding::KSpaceData &d, const CxMatrix &phi,
                            const encoding::CoilSensitivities &sens, const encoding::Trajectory &traj,
                            const ReconConfig &cfg) {
  cfg.validate();
  const int side = sens.grid_size;
  check_haar(side, cfg.wavelet_levels, sens.maps.rows());
  require(d.samples.rows() == traj.n_samples() && d.samples.cols() == sens.n_coils(),
          "admm: k-space data does not match trajectory/coils");

  using clock = std::chrono::steady_clock;
  const auto start = clock::now();
  const NormalOperator op(phi, sens, traj, KernelParams{cfg.kernel_width, 2});
  const auto elapsed = [&] { return std::chrono::duration<double>(clock::now() - start).count(); };

  AdmmResult result;
  const CxMatrix adjoint_data = op.adjoint(d);
  const int levels = cfg.wavelet_levels;
  result.lambda = cfg.lambda >= 0 ? cfg.lambda
                                  : 0.01 * sparsity_transform(adjoint_data, side, levels).cwiseAbs().maxCoeff();

  if (adjoint_data.squaredNorm() == 0.0) {
    result.u = CxMatrix::Zero(adjoint_data.rows(), adjoint_data.cols());
    result.rho = cfg.rho > 0 ? cfg.rho : cfg.rho_scale;
    for (int k = 0; k <= cfg.n_admm; ++k) {
      TraceRow row = objective(op, d, result.u, result.lambda, side, levels);
      row.iteration = k;
      row.seconds = elapsed();
      result.trace.push_back(row);
    }
    return result;
  }

  // Exact-adjoint start, rescaled by the least-squares optimal scalar so the
  // first iterate lives on the data scale.
  const encoding::KSpaceData predicted = op.forward(adjoint_data);
  const double fit = predicted.samples.squaredNorm();
  const Cx alpha = fit > 0 ? encoding::inner(predicted.samples, d.samples) / fit : Cx{0.0, 0.0};
  CxMatrix u = alpha * adjoint_data;

  // Rayleigh quotient of E^H E at the start, from the forward pass above.
  result.rho = cfg.rho > 0 ? cfg.rho : cfg.rho_scale * fit / adjoint_data.squaredNorm();
  const double rho = result.rho;
  // The U-update carries E^H E without the factor 2 from the gradient of the
  // squared data term, so the matching shrinkage for lambda ||Psi U||_1 is
  // lambda / (2 rho).
  const double threshold = result.lambda / (2.0 * rho);

  CxMatrix v = sparsity_transform(u, side, levels);
  CxMatrix y = CxMatrix::Zero(v.rows(), v.cols());
  TraceRow first = objective(op, d, u, result.lambda, side, levels);
  first.seconds = elapsed();
  result.trace.push_back(first);

  for (int k = 1; k <= cfg.n_admm; ++k) {
    const CxMatrix rhs = adjoint_data + rho * sparsity_adjoint(v - y, side, levels);
    try {
      conjugate_gradient(op, rho, rhs, u, cfg.n_cg, cfg.cg_tol);
    } catch (const SolverFailure &e) {
      throw SolverFailure(std::string("ADMM iteration ") + std::to_string(k) + ": " + e.what(), result.trace);
    }
    const CxMatrix wu = sparsity_transform(u, side, levels);
    v = soft_threshold(wu + y, threshold);
    y += wu - v;

    TraceRow row = objective(op, d, u, result.lambda, side, levels);
    row.iteration = k;
    row.seconds = elapsed();
    result.trace.push_back(row);
  }
  result.u = std::move(u);
  return result;
}

} // namespace featspace::iterative
