#include "featspace/subspace.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <limits>

namespace featspace::subspace {

namespace {

// Dense SVD is exact but slow past a few hundred thousand entries; beyond
// that the smaller Gram matrix is diagonalised instead.
constexpr Eigen::Index kDenseSvdLimit = 200'000;

// Right singular vectors (N x L) of a.
CxMatrix top_right_vectors(const CxMatrix &a, int rank) {
  if (a.size() <= kDenseSvdLimit) {
    Eigen::BDCSVD<CxMatrix> svd(a, Eigen::ComputeThinV);
    return svd.matrixV().leftCols(rank);
  }
  if (a.rows() >= a.cols()) {
    const CxMatrix gram = a.adjoint() * a;
    Eigen::SelfAdjointEigenSolver<CxMatrix> eig(gram);
    // Eigenvalues ascend; reverse the trailing block.
    return eig.eigenvectors().rightCols(rank).rowwise().reverse();
  }
  const CxMatrix gram = a * a.adjoint();
  Eigen::SelfAdjointEigenSolver<CxMatrix> eig(gram);
  const CxMatrix left = eig.eigenvectors().rightCols(rank).rowwise().reverse();
  CxMatrix v = a.adjoint() * left;
  Eigen::HouseholderQR<CxMatrix> qr(v);
  CxMatrix q = qr.householderQ() * CxMatrix::Identity(v.rows(), rank);
  // Keep the column order/orientation of v; QR may flip phases.
  for (int l = 0; l < rank; ++l) {
    const Cx overlap = q.col(l).dot(v.col(l));
    if (std::abs(overlap) > 0) q.col(l) *= overlap / std::abs(overlap);
  }
  return q;
}

} // namespace

RVector singular_values(const CxMatrix &a) {
  Eigen::BDCSVD<CxMatrix> svd(a);
  return svd.singularValues();
}

TemporalBasis extract_basis(const CxMatrix &source, int rank, const TimeAxes &axes) {
  require(rank >= 1, "extract_basis: rank must be >= 1");
  require(source.cols() >= rank && source.rows() >= rank, "extract_basis: rank exceeds min(rows, frames)");
  require(axes.n_frames() == source.cols(), "extract_basis: time axes do not match frame count");
  require(source.allFinite(), "extract_basis: source contains non-finite values");

  const CxMatrix v = top_right_vectors(source, rank);
  TemporalBasis basis;
  basis.axes = axes;
  basis.phi = v.adjoint();
  for (int l = 0; l < rank; ++l) {
    Eigen::Index peak = 0;
    basis.phi.row(l).cwiseAbs().maxCoeff(&peak);
    const Cx value = basis.phi(l, peak);
    if (std::abs(value) > 0) basis.phi.row(l) *= std::conj(value) / std::abs(value);
    basis.phi(l, peak) = Cx{std::abs(basis.phi(l, peak)), 0.0};
  }
  return basis;
}

CxMatrix navigator_casorati(const encoding::KSpaceData &d, const encoding::Trajectory &traj, const TimeAxes &axes) {
  require(axes.n_frames() == traj.n_frames, "navigator_casorati: time axes do not match trajectory");
  require(d.samples.rows() == traj.n_samples(), "navigator_casorati: data does not match trajectory");
  const int S = traj.samples_per_spoke;
  const int rows = S * d.n_coils();
  const int n = traj.n_frames;

  CxMatrix cas = CxMatrix::Zero(rows, n);
  std::vector<int> count(n, 0);
  for (int s = 0; s < traj.n_spokes(); ++s) {
    if (!traj.navigator[s]) continue;
    const int f = traj.frame[s];
    for (int c = 0; c < d.n_coils(); ++c) {
      cas.col(f).segment(c * S, S) += d.samples.col(c).segment(static_cast<Eigen::Index>(s) * S, S);
    }
    ++count[f];
  }
  std::vector<int> navigated;
  for (int f = 0; f < n; ++f) {
    if (count[f] > 0) {
      cas.col(f) /= count[f];
      navigated.push_back(f);
    }
  }
  require(!navigated.empty(), "navigator_casorati: trajectory has no navigator spokes");

  CxMatrix filled = cas;
  for (int f = 0; f < n; ++f) {
    if (count[f] > 0) continue;
    const int tau = f % axes.n_tau;
    const int base = f - tau;
    int best = -1;
    for (int dt = 1; dt < axes.n_tau && best < 0; ++dt) {
      if (tau - dt >= 0 && count[base + tau - dt] > 0) best = base + tau - dt;
      else if (tau + dt < axes.n_tau && count[base + tau + dt] > 0) best = base + tau + dt;
    }
    if (best < 0) {
      int gap = std::numeric_limits<int>::max();
      for (int g : navigated) {
        if (std::abs(g - f) < gap) {
          gap = std::abs(g - f);
          best = g;
        }
      }
    }
    filled.col(f) = cas.col(best);
  }
  return filled;
}

CxMatrix project(const CxMatrix &a, const TemporalBasis &basis) {
  require(a.cols() == basis.phi.cols(), "project: frame count does not match basis");
  return a * basis.phi.adjoint();
}

CxMatrix render_frames(const CxMatrix &u, const TemporalBasis &basis, const std::vector<int> &frames) {
  require(u.cols() == basis.phi.rows(), "render_frames: U columns do not match basis rank");
  CxMatrix out(u.rows(), static_cast<Eigen::Index>(frames.size()));
  for (std::size_t i = 0; i < frames.size(); ++i) {
    require(frames[i] >= 0 && frames[i] < basis.phi.cols(), "render_frames: frame index out of range");
    out.col(i) = u * basis.phi.col(frames[i]);
  }
  return out;
}

RMatrix to_real_channels(const CxMatrix &u) {
  const Eigen::Index l = u.cols();
  RMatrix out(u.rows(), 2 * l);
  out.leftCols(l) = u.real();
  out.rightCols(l) = u.imag();
  return out;
}

CxMatrix from_real_channels(const RMatrix &channels) {
  require(channels.cols() % 2 == 0, "from_real_channels: channel count must be even");
  const Eigen::Index l = channels.cols() / 2;
  CxMatrix out(channels.rows(), l);
  out.real() = channels.leftCols(l);
  out.imag() = channels.rightCols(l);
  return out;
}

double subspace_angle(const CxMatrix &phi_a, const CxMatrix &phi_b) {
  require(phi_a.cols() == phi_b.cols(), "subspace_angle: frame counts differ");
  const CxMatrix overlap = phi_a * phi_b.adjoint();
  Eigen::JacobiSVD<CxMatrix> svd(overlap);
  const double smallest = std::clamp(svd.singularValues().minCoeff(), 0.0, 1.0);
  return std::acos(smallest);
}

} // namespace featspace::subspace
