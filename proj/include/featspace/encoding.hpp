#pragma once

#include "featspace/core.hpp"
#include "featspace/nufft.hpp"
#include "featspace/phantom.hpp"

#include <optional>
#include <vector>

namespace featspace::encoding {

// Golden-angle increment, 180 deg / golden ratio (about 111.246 deg).
double golden_angle();

// Radial readout lines. Sample s of every spoke sits at radius
// (s - (S-1)/2) / S cycles/pixel along the spoke direction, so the centre
// sample is k = 0 and |k| < 0.5.
struct Trajectory {
  int samples_per_spoke = 0;
  int n_frames = 0;
  std::vector<double> angle; // radians
  std::vector<int> frame;
  std::vector<std::uint8_t> navigator;
  std::vector<double> weights; // n_spokes * samples_per_spoke, diagonal of W

  [[nodiscard]] int n_spokes() const { return static_cast<int>(angle.size()); }
  [[nodiscard]] Eigen::Index n_samples() const {
    return static_cast<Eigen::Index>(n_spokes()) * samples_per_spoke;
  }
  [[nodiscard]] double radius(int sample) const;
  // All sample positions, spoke-major: row = spoke * S + sample.
  [[nodiscard]] RMatrix points() const;
  // Positions of the listed spokes only, in the order given.
  [[nodiscard]] RMatrix points(const std::vector<int> &spokes) const;
  // Spoke indices grouped by frame.
  [[nodiscard]] std::vector<std::vector<int>> spokes_by_frame() const;
  void validate() const;
};

Trajectory make_trajectory(int n_spokes, int samples_per_spoke, int n_frames, int navigator_every,
                           const std::optional<std::vector<int>> &frame_schedule = std::nullopt);

// Ramp |k| normalised to max 1; the k = 0 sample gets half the first
// nonzero radius.
Trajectory density_compensation(Trajectory traj);

struct CoilSensitivities {
  int grid_size = 0;
  CxMatrix maps; // M x n_coils

  [[nodiscard]] int n_coils() const { return static_cast<int>(maps.cols()); }
  // sum_c |S_c(x)|^2
  [[nodiscard]] RVector sum_of_squares() const;
};

// Gaussian-profile coils centred evenly around the FOV.
CoilSensitivities make_coils(int grid_size, int n_coils);
CoilSensitivities uniform_coil(int grid_size);

struct KSpaceData {
  int samples_per_spoke = 0;
  CxMatrix samples; // (n_spokes * S) x n_coils, spoke-major rows

  [[nodiscard]] int n_coils() const { return static_cast<int>(samples.cols()); }
};

enum class BackprojectMode { preconditioned, exact_adjoint };

// d = Omega([S F U] Phi), linear in U (M x L), Phi is L x N.
KSpaceData encode(const CxMatrix &u, const CxMatrix &phi, const CoilSensitivities &sens,
                  const Trajectory &traj, const Nufft2d &nufft);
KSpaceData encode(const CxMatrix &u, const CxMatrix &phi, const CoilSensitivities &sens,
                  const Trajectory &traj);

CxMatrix backproject(const KSpaceData &d, const CxMatrix &phi, const CoilSensitivities &sens,
                     const Trajectory &traj, BackprojectMode mode, const Nufft2d &nufft);
CxMatrix backproject(const KSpaceData &d, const CxMatrix &phi, const CoilSensitivities &sens,
                     const Trajectory &traj, BackprojectMode mode);

// Frame-by-frame acquisition of a dense image sequence (M x N) plus complex
// white Gaussian noise with E|n|^2 = noise_sigma^2.
KSpaceData sample_frames(const CxMatrix &frames, int grid_size, const CoilSensitivities &sens,
                         const Trajectory &traj, double noise_sigma, std::uint64_t seed);

KSpaceData simulate_acquisition(const phantom::GroundTruth &gt, const CoilSensitivities &sens,
                                const Trajectory &traj, double noise_sigma, std::uint64_t seed);

// E^H E of the exact-adjoint model evaluated by Toeplitz embedding: every
// (l, l') feature pair is a convolution of S_c u_l' with the point-spread
// kernel sum_p conj(Phi_l,f(p)) Phi_l',f(p) exp(i 2 pi k_p . x), applied by
// FFT on a 2x zero-padded grid.
class ToeplitzNormal {
public:
  ToeplitzNormal(const CxMatrix &phi, const CoilSensitivities &sens, const Trajectory &traj,
                 KernelParams kernel = {});

  [[nodiscard]] CxMatrix apply(const CxMatrix &u) const;

private:
  int side_ = 0;
  int rank_ = 0;
  CxMatrix maps_;
  std::vector<CxVector> kernels_; // FFT of the circulant kernel, index l * L + l'
  Fft2d fft_;
};

// Complex inner product sum conj(a) b over all entries.
Cx inner(const CxMatrix &a, const CxMatrix &b);

} // namespace featspace::encoding
