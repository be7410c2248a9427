#include "featspace/encoding.hpp"

#include <cmath>
#include <numbers>
#include <random>

namespace featspace::encoding {

double golden_angle() { return std::numbers::pi / std::numbers::phi; }

double Trajectory::radius(int sample) const {
  return (sample - 0.5 * (samples_per_spoke - 1)) / samples_per_spoke;
}

RMatrix Trajectory::points() const {
  std::vector<int> all(n_spokes());
  for (int s = 0; s < n_spokes(); ++s) all[s] = s;
  return points(all);
}

RMatrix Trajectory::points(const std::vector<int> &spokes) const {
  const int S = samples_per_spoke;
  RMatrix k(static_cast<Eigen::Index>(spokes.size()) * S, 2);
  for (std::size_t i = 0; i < spokes.size(); ++i) {
    const double c = std::cos(angle[spokes[i]]);
    const double s = std::sin(angle[spokes[i]]);
    for (int j = 0; j < S; ++j) {
      const double r = radius(j);
      k(i * S + j, 0) = r * c;
      k(i * S + j, 1) = r * s;
    }
  }
  return k;
}

std::vector<std::vector<int>> Trajectory::spokes_by_frame() const {
  std::vector<std::vector<int>> groups(n_frames);
  for (int s = 0; s < n_spokes(); ++s) groups[frame[s]].push_back(s);
  return groups;
}

void Trajectory::validate() const {
  require(samples_per_spoke >= 1 && samples_per_spoke % 2 == 1, "trajectory: samples_per_spoke must be odd");
  require(n_frames >= 1, "trajectory: n_frames must be >= 1");
  const auto n = angle.size();
  require(frame.size() == n && navigator.size() == n, "trajectory: per-spoke arrays disagree in length");
  require(weights.size() == n * samples_per_spoke, "trajectory: weight count mismatch");
  for (int f : frame) require(f >= 0 && f < n_frames, "trajectory: frame index out of range");
  for (double w : weights) require(std::isfinite(w) && w >= 0, "trajectory: density weights must be finite and >= 0");
}

Trajectory make_trajectory(int n_spokes, int samples_per_spoke, int n_frames, int navigator_every,
                           const std::optional<std::vector<int>> &frame_schedule) {
  require(n_spokes >= 1, "make_trajectory: n_spokes must be >= 1");
  require(samples_per_spoke >= 1 && samples_per_spoke % 2 == 1,
          "make_trajectory: samples_per_spoke must be odd so k = 0 is sampled");
  require(n_frames >= 1, "make_trajectory: n_frames must be >= 1");
  require(navigator_every >= 0, "make_trajectory: navigator_every must be >= 0");
  if (frame_schedule) {
    require(static_cast<int>(frame_schedule->size()) == n_spokes, "make_trajectory: schedule length != n_spokes");
  }

  Trajectory t;
  t.samples_per_spoke = samples_per_spoke;
  t.n_frames = n_frames;
  t.angle.resize(n_spokes);
  t.frame.resize(n_spokes);
  t.navigator.assign(n_spokes, 0);
  const double step = golden_angle();
  for (int n = 0; n < n_spokes; ++n) {
    t.angle[n] = std::fmod(n * step, std::numbers::pi);
    if (navigator_every > 0 && n % navigator_every == 0) {
      t.navigator[n] = 1;
      t.angle[n] = 0.0;
    }
    t.frame[n] = frame_schedule ? (*frame_schedule)[n] : n % n_frames;
  }
  t.weights.assign(static_cast<std::size_t>(n_spokes) * samples_per_spoke, 1.0);
  t.validate();
  return t;
}

Trajectory density_compensation(Trajectory traj) {
  const int S = traj.samples_per_spoke;
  std::vector<double> ramp(S);
  double max_r = 0.0;
  for (int j = 0; j < S; ++j) {
    ramp[j] = std::abs(traj.radius(j));
    max_r = std::max(max_r, ramp[j]);
  }
  if (max_r == 0.0) {
    std::fill(traj.weights.begin(), traj.weights.end(), 1.0);
    return traj;
  }
  const double first = 1.0 / S;
  for (int j = 0; j < S; ++j) {
    ramp[j] = (ramp[j] == 0.0 ? 0.5 * first : ramp[j]) / max_r;
  }
  for (int s = 0; s < traj.n_spokes(); ++s) {
    std::copy(ramp.begin(), ramp.end(), traj.weights.begin() + static_cast<std::ptrdiff_t>(s) * S);
  }
  return traj;
}

RVector CoilSensitivities::sum_of_squares() const { return maps.cwiseAbs2().rowwise().sum(); }

CoilSensitivities make_coils(int grid_size, int n_coils) {
  require(grid_size >= 2 && n_coils >= 1, "make_coils: invalid size");
  CoilSensitivities s;
  s.grid_size = grid_size;
  const int m = grid_size * grid_size;
  s.maps.resize(m, n_coils);
  const double ring = 0.45 * grid_size;
  const double sigma = 0.4 * grid_size;
  for (int c = 0; c < n_coils; ++c) {
    const double theta = 2.0 * std::numbers::pi * c / n_coils;
    const double cx = ring * std::cos(theta);
    const double cy = ring * std::sin(theta);
    for (int iy = 0; iy < grid_size; ++iy) {
      for (int ix = 0; ix < grid_size; ++ix) {
        const double x = ix - grid_size / 2;
        const double y = iy - grid_size / 2;
        const double r2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
        // Constant phase per coil plus a gentle linear ramp across the FOV.
        const double phase = theta + 0.5 * std::numbers::pi * (x * std::cos(theta) + y * std::sin(theta)) / grid_size;
        s.maps(iy * grid_size + ix, c) = std::exp(-r2 / (2.0 * sigma * sigma)) * Cx{std::cos(phase), std::sin(phase)};
      }
    }
  }
  return s;
}

CoilSensitivities uniform_coil(int grid_size) {
  CoilSensitivities s;
  s.grid_size = grid_size;
  s.maps = CxMatrix::Ones(static_cast<Eigen::Index>(grid_size) * grid_size, 1);
  return s;
}

namespace {

// Phi(l, frame(p)) for every sample p, as a P x L matrix.
CxMatrix frame_weights(const CxMatrix &phi, const Trajectory &traj) {
  const int S = traj.samples_per_spoke;
  CxMatrix w(traj.n_samples(), phi.rows());
  for (int s = 0; s < traj.n_spokes(); ++s) {
    const auto col = phi.col(traj.frame[s]).transpose();
    for (int j = 0; j < S; ++j) w.row(static_cast<Eigen::Index>(s) * S + j) = col;
  }
  return w;
}

void check_dims(const CxMatrix &phi, const CoilSensitivities &sens, const Trajectory &traj, const Nufft2d &nufft) {
  traj.validate();
  require(phi.cols() == traj.n_frames, "encoding: basis frame count does not match trajectory");
  require(sens.grid_size == nufft.side(), "encoding: coil grid does not match NUFFT grid");
  require(nufft.n_points() == traj.n_samples(), "encoding: NUFFT plan does not match trajectory");
  require(sens.maps.rows() == static_cast<Eigen::Index>(sens.grid_size) * sens.grid_size,
          "encoding: coil map size mismatch");
}

} // namespace

KSpaceData encode(const CxMatrix &u, const CxMatrix &phi, const CoilSensitivities &sens, const Trajectory &traj,
                  const Nufft2d &nufft) {
  check_dims(phi, sens, traj, nufft);
  require(u.cols() == phi.rows(), "encode: U columns must equal basis rank L");
  require(u.rows() == sens.maps.rows(), "encode: U rows must equal voxel count");

  const CxMatrix weights = frame_weights(phi, traj);
  KSpaceData d;
  d.samples_per_spoke = traj.samples_per_spoke;
  d.samples = CxMatrix::Zero(traj.n_samples(), sens.n_coils());
  for (int c = 0; c < sens.n_coils(); ++c) {
    for (Eigen::Index l = 0; l < u.cols(); ++l) {
      const CxVector coil_image = sens.maps.col(c).cwiseProduct(u.col(l));
      d.samples.col(c) += weights.col(l).cwiseProduct(nufft.forward(coil_image));
    }
  }
  return d;
}

KSpaceData encode(const CxMatrix &u, const CxMatrix &phi, const CoilSensitivities &sens, const Trajectory &traj) {
  return encode(u, phi, sens, traj, Nufft2d(sens.grid_size, traj.points()));
}

CxMatrix backproject(const KSpaceData &d, const CxMatrix &phi, const CoilSensitivities &sens,
                     const Trajectory &traj, BackprojectMode mode, const Nufft2d &nufft) {
  check_dims(phi, sens, traj, nufft);
  require(d.samples.rows() == traj.n_samples() && d.samples.cols() == sens.n_coils(),
          "backproject: k-space data does not match trajectory/coils");

  const bool pc = mode == BackprojectMode::preconditioned;
  const CxMatrix weights = frame_weights(phi, traj).conjugate();
  const Eigen::Map<const RVector> dcf(traj.weights.data(), static_cast<Eigen::Index>(traj.weights.size()));

  CxMatrix u = CxMatrix::Zero(sens.maps.rows(), phi.rows());
  for (int c = 0; c < sens.n_coils(); ++c) {
    CxVector data = d.samples.col(c);
    if (pc) data = data.cwiseProduct(dcf.cast<Cx>());
    for (Eigen::Index l = 0; l < phi.rows(); ++l) {
      const CxVector image = nufft.adjoint(weights.col(l).cwiseProduct(data));
      u.col(l) += sens.maps.col(c).conjugate().cwiseProduct(image);
    }
  }
  if (!pc) return u;

  // S^dagger: divide by sum |S_c|^2, zero where no coil sees the voxel.
  const RVector ssq = sens.sum_of_squares();
  for (Eigen::Index v = 0; v < u.rows(); ++v) {
    if (ssq[v] > 0) u.row(v) /= ssq[v]; else u.row(v).setZero();
  }
  // Gridding gain of F^H W F for band-limited images is (4/pi) sum(w) per
  // frame; dividing it out keeps U0 on the scale of U.
  const double total = dcf.sum();
  if (total > 0) u *= traj.n_frames / (4.0 / std::numbers::pi * total);
  return u;
}

CxMatrix backproject(const KSpaceData &d, const CxMatrix &phi, const CoilSensitivities &sens,
                     const Trajectory &traj, BackprojectMode mode) {
  return backproject(d, phi, sens, traj, mode, Nufft2d(sens.grid_size, traj.points()));
}

KSpaceData sample_frames(const CxMatrix &frames, int grid_size, const CoilSensitivities &sens,
                         const Trajectory &traj, double noise_sigma, std::uint64_t seed) {
  require(noise_sigma >= 0, "simulate_acquisition: noise_sigma must be >= 0");
  traj.validate();
  require(frames.rows() == static_cast<Eigen::Index>(grid_size) * grid_size, "simulate_acquisition: frame size mismatch");
  require(frames.cols() == traj.n_frames, "simulate_acquisition: frame count does not match trajectory");
  require(sens.grid_size == grid_size, "simulate_acquisition: coil grid mismatch");

  const int S = traj.samples_per_spoke;
  KSpaceData d;
  d.samples_per_spoke = S;
  d.samples = CxMatrix::Zero(traj.n_samples(), sens.n_coils());
  const auto groups = traj.spokes_by_frame();
  for (int f = 0; f < traj.n_frames; ++f) {
    const auto &spokes = groups[f];
    if (spokes.empty()) continue;
    const Nufft2d nufft(grid_size, traj.points(spokes));
    for (int c = 0; c < sens.n_coils(); ++c) {
      const CxVector s = nufft.forward(sens.maps.col(c).cwiseProduct(frames.col(f)));
      for (std::size_t i = 0; i < spokes.size(); ++i) {
        d.samples.col(c).segment(static_cast<Eigen::Index>(spokes[i]) * S, S) = s.segment(i * S, S);
      }
    }
  }
  if (noise_sigma > 0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, noise_sigma / std::numbers::sqrt2);
    for (Eigen::Index c = 0; c < d.samples.cols(); ++c) {
      for (Eigen::Index p = 0; p < d.samples.rows(); ++p) {
        const double re = normal(rng);
        const double im = normal(rng);
        d.samples(p, c) += Cx{re, im};
      }
    }
  }
  return d;
}

KSpaceData simulate_acquisition(const phantom::GroundTruth &gt, const CoilSensitivities &sens,
                                const Trajectory &traj, double noise_sigma, std::uint64_t seed) {
  return sample_frames(gt.image, gt.grid_size, sens, traj, noise_sigma, seed);
}

ToeplitzNormal::ToeplitzNormal(const CxMatrix &phi, const CoilSensitivities &sens, const Trajectory &traj,
                               KernelParams kernel)
    : side_(sens.grid_size), rank_(static_cast<int>(phi.rows())), maps_(sens.maps), fft_(2 * sens.grid_size) {
  traj.validate();
  require(phi.cols() == traj.n_frames, "toeplitz: basis N does not match trajectory frames");
  const int n = 2 * side_;
  const Nufft2d wide(n, traj.points(), kernel);
  const CxMatrix w = frame_weights(phi, traj);
  kernels_.resize(static_cast<std::size_t>(rank_) * rank_);
  for (int l = 0; l < rank_; ++l) {
    for (int m = 0; m < rank_; ++m) {
      const CxVector psf = wide.adjoint(w.col(l).conjugate().cwiseProduct(w.col(m)));
      // psf holds offsets [-side, side) at index offset + side; store circularly.
      CxVector k(static_cast<Eigen::Index>(n) * n);
      for (int iy = 0; iy < n; ++iy) {
        const int cy = (iy - side_ + n) % n;
        for (int ix = 0; ix < n; ++ix) {
          const int cx = (ix - side_ + n) % n;
          k[cy * n + cx] = psf[iy * n + ix];
        }
      }
      fft_.forward(k.data());
      kernels_[l * rank_ + m] = k / static_cast<double>(n) / static_cast<double>(n);
    }
  }
}

CxMatrix ToeplitzNormal::apply(const CxMatrix &u) const {
  require(u.rows() == maps_.rows() && u.cols() == rank_, "toeplitz: U shape mismatch");
  const int n = 2 * side_;
  const Eigen::Index nn = static_cast<Eigen::Index>(n) * n;
  CxMatrix out = CxMatrix::Zero(u.rows(), rank_);
  std::vector<CxVector> spectra(rank_, CxVector(nn));
  CxVector acc(nn);
  for (Eigen::Index c = 0; c < maps_.cols(); ++c) {
    for (int m = 0; m < rank_; ++m) {
      CxVector &z = spectra[m];
      z.setZero();
      for (int y = 0; y < side_; ++y) {
        for (int x = 0; x < side_; ++x) {
          const Eigen::Index v = static_cast<Eigen::Index>(y) * side_ + x;
          z[static_cast<Eigen::Index>(y) * n + x] = maps_(v, c) * u(v, m);
        }
      }
      fft_.forward(z.data());
    }
    for (int l = 0; l < rank_; ++l) {
      acc = kernels_[l * rank_].cwiseProduct(spectra[0]);
      for (int m = 1; m < rank_; ++m) acc += kernels_[l * rank_ + m].cwiseProduct(spectra[m]);
      fft_.backward(acc.data());
      for (int y = 0; y < side_; ++y) {
        for (int x = 0; x < side_; ++x) {
          const Eigen::Index v = static_cast<Eigen::Index>(y) * side_ + x;
          out(v, l) += std::conj(maps_(v, c)) * acc[static_cast<Eigen::Index>(y) * n + x];
        }
      }
    }
  }
  return out;
}

Cx inner(const CxMatrix &a, const CxMatrix &b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "inner: shape mismatch");
  return (a.conjugate().cwiseProduct(b)).sum();
}

} // namespace featspace::encoding
