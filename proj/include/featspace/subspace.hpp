#pragma once

#include "featspace/core.hpp"
#include "featspace/encoding.hpp"

#include <vector>

namespace featspace::subspace {

// Phi: L x N with orthonormal rows.
struct TemporalBasis {
  CxMatrix phi;
  TimeAxes axes;

  [[nodiscard]] int rank() const { return static_cast<int>(phi.rows()); }
  [[nodiscard]] int n_frames() const { return static_cast<int>(phi.cols()); }
};

// Top-L right singular vectors of `source` (rows x N), returned as rows of
// Phi. Each row is rotated so its largest-magnitude entry is real positive.
TemporalBasis extract_basis(const CxMatrix &source, int rank, const TimeAxes &axes);

// Singular values of a matrix, descending. Used for reporting and tests.
RVector singular_values(const CxMatrix &a);

// Casorati matrix of navigator readouts: rows are (coil, sample) pairs, one
// column per frame of the time lattice. Frames that received several
// navigators are averaged; frames without one copy the nearest navigated
// tau bin at the same (cardiac, resp) bin, falling back to the nearest
// navigated frame index.
CxMatrix navigator_casorati(const encoding::KSpaceData &d, const encoding::Trajectory &traj, const TimeAxes &axes);

// U = A Phi^H
CxMatrix project(const CxMatrix &a, const TemporalBasis &basis);

// Columns U Phi[:, j] for each requested frame.
CxMatrix render_frames(const CxMatrix &u, const TemporalBasis &basis, const std::vector<int> &frames);

// Channels [0, L) hold real parts, [L, 2L) imaginary parts; M x 2L.
RMatrix to_real_channels(const CxMatrix &u);
CxMatrix from_real_channels(const RMatrix &channels);

// Largest principal angle (radians) between the row spaces of two bases.
double subspace_angle(const CxMatrix &phi_a, const CxMatrix &phi_b);

} // namespace featspace::subspace
