#include "featspace/encoding.hpp"
#include "featspace/subspace.hpp"

#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

using namespace featspace;
using namespace featspace::encoding;

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

CxMatrix random_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64 &rng) {
  std::normal_distribution<double> g;
  CxMatrix m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = Cx{g(rng), g(rng)};
  return m;
}

// Random L x N matrix with orthonormal rows, via QR.
CxMatrix random_basis(int rank, int frames, std::mt19937_64 &rng) {
  const CxMatrix a = random_matrix(frames, rank, rng);
  Eigen::HouseholderQR<CxMatrix> qr(a);
  const CxMatrix q = qr.householderQ() * CxMatrix::Identity(frames, rank);
  return q.adjoint();
}

// Smooth complex blobs, so almost all energy lies inside the radial disk.
CxVector smooth_image(int n, std::mt19937_64 &rng) {
  std::uniform_real_distribution<double> pos(-0.25 * n, 0.25 * n);
  std::normal_distribution<double> g;
  CxVector img = CxVector::Zero(static_cast<Eigen::Index>(n) * n);
  for (int b = 0; b < 4; ++b) {
    const double cx = pos(rng), cy = pos(rng);
    const Cx amp{g(rng), g(rng)};
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        const double r2 = std::pow(x - n / 2 - cx, 2) + std::pow(y - n / 2 - cy, 2);
        img[y * n + x] += amp * std::exp(-r2 / (2.0 * 2.5 * 2.5));
      }
  }
  return img;
}

double correlation(const CxVector &a, const CxVector &b) {
  return std::abs(a.dot(b)) / (a.norm() * b.norm());
}

double rel(const CxMatrix &a, const CxMatrix &ref) { return (a - ref).norm() / ref.norm(); }

} // namespace

TEST_CASE("golden-angle trajectory") {
  const auto t = make_trajectory(3, 5, 1, 0);
  REQUIRE(t.n_spokes() == 3);
  CHECK(t.angle[0] == doctest::Approx(0.0));
  CHECK(t.angle[1] / kDeg == doctest::Approx(111.246).epsilon(1e-5));
  CHECK(t.angle[2] / kDeg == doctest::Approx(42.492).epsilon(1e-4));
  for (double a : t.angle) CHECK((a >= 0 && a < std::numbers::pi));
}

TEST_CASE("first 100 non-navigator angles are distinct") {
  const auto t = make_trajectory(140, 5, 1, 4);
  std::vector<double> angles;
  for (int s = 0; s < t.n_spokes() && angles.size() < 100; ++s)
    if (!t.navigator[s]) angles.push_back(t.angle[s]);
  REQUIRE(angles.size() == 100);
  for (std::size_t i = 0; i < angles.size(); ++i)
    for (std::size_t j = i + 1; j < angles.size(); ++j) CHECK(std::abs(angles[i] - angles[j]) > 1e-6);
}

TEST_CASE("navigator spokes") {
  const auto t = make_trajectory(16, 5, 4, 8);
  int count = 0;
  for (int s = 0; s < 16; ++s) {
    if (t.navigator[s]) {
      ++count;
      CHECK(t.angle[s] == 0.0);
    }
  }
  CHECK(count == 2);
  CHECK(make_trajectory(16, 5, 4, 0).navigator == std::vector<std::uint8_t>(16, 0));
}

TEST_CASE("frame schedule") {
  const auto t = make_trajectory(7, 3, 3, 0);
  for (int s = 0; s < 7; ++s) CHECK(t.frame[s] == s % 3);
  const std::vector<int> sched{2, 2, 0, 1};
  const auto u = make_trajectory(4, 3, 3, 0, sched);
  CHECK(u.frame == sched);
  CHECK_THROWS_AS(make_trajectory(4, 3, 3, 0, std::vector<int>{0, 1}), InvalidParameter);
  CHECK_THROWS_AS(make_trajectory(4, 3, 3, 0, std::vector<int>{0, 1, 2, 3}), InvalidParameter);
}

TEST_CASE("trajectory geometry") {
  const auto t = make_trajectory(9, 11, 2, 3);
  const RMatrix k = t.points();
  for (Eigen::Index p = 0; p < k.rows(); ++p) CHECK(std::hypot(k(p, 0), k(p, 1)) < 0.5);
  for (int s = 0; s < t.n_spokes(); ++s) {
    CHECK(k(s * 11 + 5, 0) == 0.0);
    CHECK(k(s * 11 + 5, 1) == 0.0);
  }
}

TEST_CASE("trajectory parameter errors") {
  CHECK_THROWS_AS(make_trajectory(4, 4, 1, 0), InvalidParameter);
  CHECK_THROWS_AS(make_trajectory(0, 5, 1, 0), InvalidParameter);
  CHECK_THROWS_AS(make_trajectory(4, 5, 0, 0), InvalidParameter);
  CHECK_THROWS_AS(make_trajectory(4, 5, 1, -1), InvalidParameter);
}

TEST_CASE("ramp density compensation") {
  // S = 9: radii are (j - 4) / 9.
  const auto t = density_compensation(make_trajectory(2, 9, 1, 0));
  const double max_r = 4.0 / 9.0;
  for (int j = 0; j < 9; ++j) {
    const double r = std::abs(j - 4) / 9.0;
    const double expected = j == 4 ? 0.5 * (1.0 / 9.0) / max_r : r / max_r;
    CHECK(t.weights[j] == doctest::Approx(expected).epsilon(1e-14));
    CHECK(t.weights[9 + j] == t.weights[j]);
  }
  for (double w : t.weights) CHECK((w >= 0.0 && w <= 1.0));
  CHECK(*std::max_element(t.weights.begin(), t.weights.end()) == doctest::Approx(1.0));
}

TEST_CASE("density weight ratio is linear in radius") {
  // S = 17: |k| = 2/17 and 4/17 sit at samples 10 and 12, and 0.25 vs 0.5
  // is represented by any 1:2 pair of radii.
  const auto t = density_compensation(make_trajectory(1, 17, 1, 0));
  CHECK(t.weights[10] / t.weights[12] == doctest::Approx(0.5).epsilon(1e-14));
  const auto u = density_compensation(make_trajectory(1, 401, 1, 0));
  const int c = 200;
  // |k| = 100/401 ~ 0.25 and 200/401 ~ 0.5-
  CHECK(u.weights[c + 100] / u.weights[c + 200] == doctest::Approx(0.5).epsilon(1e-14));
}

TEST_CASE("coil sensitivities cover the FOV") {
  const auto s = make_coils(32, 4);
  CHECK(s.n_coils() == 4);
  CHECK(s.maps.rows() == 32 * 32);
  CHECK(s.sum_of_squares().minCoeff() > 0.0);
  const auto u = uniform_coil(8);
  CHECK(u.sum_of_squares().isApproxToConstant(1.0));
}

TEST_CASE("encode of zero is zero and backproject of zero is zero") {
  std::mt19937_64 rng(1);
  const auto traj = density_compensation(make_trajectory(12, 9, 3, 4));
  const auto sens = make_coils(8, 2);
  const CxMatrix phi = random_basis(2, 3, rng);
  const auto d = encode(CxMatrix::Zero(64, 2), phi, sens, traj);
  CHECK(d.samples.rows() == 12 * 9);
  CHECK(d.samples.cols() == 2);
  CHECK(d.samples.isZero(0.0));
  for (auto mode : {BackprojectMode::preconditioned, BackprojectMode::exact_adjoint}) {
    CHECK(backproject(d, phi, sens, traj, mode).isZero(0.0));
  }
}

TEST_CASE("single feature with constant basis collapses to the NUFFT") {
  std::mt19937_64 rng(2);
  const auto traj = make_trajectory(10, 9, 4, 0);
  const auto sens = uniform_coil(16);
  const CxMatrix u = random_matrix(256, 1, rng);
  const CxMatrix phi = CxMatrix::Ones(1, 4);
  const Nufft2d plan(16, traj.points());
  const auto d = encode(u, phi, sens, traj, plan);
  const CxVector ref = plan.forward(u.col(0));
  CHECK((d.samples.col(0) - ref).cwiseAbs().maxCoeff() <= 1e-12 * ref.cwiseAbs().maxCoeff());
}

TEST_CASE("identity basis matches a per-frame direct DFT") {
  std::mt19937_64 rng(3);
  const auto traj = make_trajectory(8, 7, 2, 0);
  const auto sens = uniform_coil(8);
  const CxMatrix u = random_matrix(64, 2, rng);
  const CxMatrix phi = CxMatrix::Identity(2, 2);
  const auto d = encode(u, phi, sens, traj);
  const RMatrix k = traj.points();
  double worst = 0.0;
  for (int s = 0; s < traj.n_spokes(); ++s) {
    const CxVector frame = u * phi.col(traj.frame[s]);
    const CxVector ref = direct_dft(8, frame, k.middleRows(s * 7, 7));
    const CxVector got = d.samples.col(0).segment(s * 7, 7);
    worst = std::max(worst, (got - ref).cwiseAbs().maxCoeff() / ref.cwiseAbs().maxCoeff());
  }
  CHECK(worst <= 1e-3);
}

TEST_CASE("exact adjoint satisfies the inner-product identity") {
  std::mt19937_64 rng(4);
  const auto traj = density_compensation(make_trajectory(24, 11, 5, 4));
  const auto sens = make_coils(12, 3);
  const Nufft2d plan(12, traj.points());
  for (int draw = 0; draw < 20; ++draw) {
    const CxMatrix phi = random_basis(3, 5, rng);
    const CxMatrix u = random_matrix(144, 3, rng);
    KSpaceData d;
    d.samples_per_spoke = 11;
    d.samples = random_matrix(traj.n_samples(), 3, rng);
    const Cx lhs = encode(u, phi, sens, traj, plan).samples.conjugate().cwiseProduct(d.samples).sum();
    const Cx rhs = inner(u, backproject(d, phi, sens, traj, BackprojectMode::exact_adjoint, plan));
    CHECK(std::abs(lhs - rhs) <= 1e-9 * u.norm() * d.samples.norm());
  }
}

TEST_CASE("encode is linear") {
  std::mt19937_64 rng(5);
  const auto traj = make_trajectory(16, 9, 4, 0);
  const auto sens = make_coils(8, 2);
  const CxMatrix phi = random_basis(2, 4, rng);
  const Nufft2d plan(8, traj.points());
  const CxMatrix u1 = random_matrix(64, 2, rng), u2 = random_matrix(64, 2, rng);
  const Cx a{0.7, -1.3}, b{-2.1, 0.4};
  const CxMatrix lhs = encode(a * u1 + b * u2, phi, sens, traj, plan).samples;
  const CxMatrix rhs = a * encode(u1, phi, sens, traj, plan).samples + b * encode(u2, phi, sens, traj, plan).samples;
  CHECK(rel(lhs, rhs) <= 1e-12);
}

TEST_CASE("dense radial round trip recovers each channel") {
  std::mt19937_64 rng(6);
  const int n = 16;
  // Two frames, 48 spokes each with 2x radial oversampling.
  const auto traj = density_compensation(make_trajectory(96, 33, 2, 0));
  const auto sens = uniform_coil(n);
  const double c = std::cos(0.6), s = std::sin(0.6);
  CxMatrix phi(2, 2);
  phi << c, s, -s, c;
  CxMatrix u(n * n, 2);
  u.col(0) = smooth_image(n, rng);
  u.col(1) = smooth_image(n, rng);
  const CxMatrix back = backproject(encode(u, phi, sens, traj), phi, sens, traj, BackprojectMode::preconditioned);
  for (int l = 0; l < 2; ++l) CHECK(correlation(back.col(l), u.col(l)) > 0.99);
}

TEST_CASE("point object backprojects to the right voxel") {
  const int n = 16;
  const auto traj = density_compensation(make_trajectory(48, 33, 1, 0));
  const auto sens = uniform_coil(n);
  const CxMatrix phi = CxMatrix::Ones(1, 1);
  const RMatrix k = traj.points();
  for (auto [px, py] : {std::pair{3, 5}, std::pair{12, 9}, std::pair{8, 8}}) {
    CxMatrix u = CxMatrix::Zero(n * n, 1);
    u(py * n + px, 0) = 1.0;
    const auto d = encode(u, phi, sens, traj);
    const CxMatrix back = backproject(d, phi, sens, traj, BackprojectMode::preconditioned);

    // Inverse-crime oracle: weighted direct inverse sum over the same samples.
    CxVector oracle = CxVector::Zero(n * n);
    const CxVector data = direct_dft(n, u.col(0), k);
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x)
        for (Eigen::Index p = 0; p < k.rows(); ++p) {
          const double ph = 2.0 * std::numbers::pi * (k(p, 0) * (x - n / 2) + k(p, 1) * (y - n / 2));
          oracle[y * n + x] += traj.weights[p] * data[p] * Cx{std::cos(ph), std::sin(ph)};
        }
    Eigen::Index got = 0, want = 0;
    back.col(0).cwiseAbs().maxCoeff(&got);
    oracle.cwiseAbs().maxCoeff(&want);
    CHECK(want == py * n + px);
    CHECK(std::abs(got % n - px) <= 1);
    CHECK(std::abs(got / n - py) <= 1);
  }
}

TEST_CASE("backprojection dimension errors") {
  std::mt19937_64 rng(7);
  const auto traj = make_trajectory(8, 5, 2, 0);
  const auto sens = make_coils(8, 2);
  const CxMatrix phi = random_basis(2, 2, rng);
  CHECK_THROWS_AS(encode(CxMatrix::Zero(64, 3), phi, sens, traj), InvalidParameter);
  CHECK_THROWS_AS(encode(CxMatrix::Zero(60, 2), phi, sens, traj), InvalidParameter);
  CHECK_THROWS_AS(encode(CxMatrix::Zero(64, 2), random_basis(2, 3, rng), sens, traj), InvalidParameter);
  KSpaceData d;
  d.samples = CxMatrix::Zero(39, 2);
  CHECK_THROWS_AS(backproject(d, phi, sens, traj, BackprojectMode::exact_adjoint), InvalidParameter);
}

TEST_CASE("noiseless acquisition of a static scene repeats equal-angle spokes") {
  std::mt19937_64 rng(8);
  const int n = 8;
  const auto traj = make_trajectory(24, 9, 6, 4);
  const auto sens = make_coils(n, 2);
  const CxVector frame = random_matrix(n * n, 1, rng);
  const CxMatrix frames = frame.replicate(1, 6);
  const auto d = sample_frames(frames, n, sens, traj, 0.0, 1);
  std::vector<int> navs;
  for (int s = 0; s < traj.n_spokes(); ++s)
    if (traj.navigator[s]) navs.push_back(s);
  REQUIRE(navs.size() == 6);
  for (int s : navs) {
    CHECK((d.samples.middleRows(s * 9, 9) - d.samples.middleRows(navs[0] * 9, 9)).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("acquisition linearity and noise") {
  phantom::PhantomSpec spec;
  spec.grid_size = 16;
  spec.axes = {4, 2, 1};
  spec.tissues = phantom::default_anatomy(16);
  const auto gt = phantom::generate(spec);
  const auto traj = make_trajectory(32, 9, gt.axes.n_frames(), 4);
  const auto sens = make_coils(16, 2);

  auto doubled = gt;
  doubled.image *= 2.0;
  const auto d1 = simulate_acquisition(gt, sens, traj, 0.0, 3);
  const auto d2 = simulate_acquisition(doubled, sens, traj, 0.0, 3);
  CHECK(rel(d2.samples, 2.0 * d1.samples) <= 1e-14);

  const auto noisy = simulate_acquisition(gt, sens, traj, 0.5, 3);
  const CxMatrix noise = noisy.samples - d1.samples;
  const double variance = noise.cwiseAbs2().mean();
  CHECK(variance == doctest::Approx(0.25).epsilon(0.1));
  CHECK(rel(simulate_acquisition(gt, sens, traj, 0.5, 3).samples, noisy.samples) == 0.0);
  CHECK_THROWS_AS(simulate_acquisition(gt, sens, traj, -1.0, 3), InvalidParameter);
}

TEST_CASE("complete basis: acquisition equals encode of the projection") {
  std::mt19937_64 rng(9);
  const int n = 8, frames = 4;
  const CxMatrix a = random_matrix(n * n, frames, rng);
  const auto basis = subspace::extract_basis(random_matrix(20, frames, rng), frames, {frames, 1, 1});
  const auto traj = make_trajectory(20, 7, frames, 4);
  const auto sens = make_coils(n, 3);
  const auto direct = sample_frames(a, n, sens, traj, 0.0, 0);
  const auto via_basis = encode(subspace::project(a, basis), basis.phi, sens, traj);
  CHECK(rel(via_basis.samples, direct.samples) <= 1e-10);
}

TEST_CASE("frame-factor commutation") {
  std::mt19937_64 rng(10);
  const int n = 8;
  const CxMatrix phi = random_basis(2, 6, rng);
  const CxMatrix u = random_matrix(n * n, 2, rng);
  const auto traj = make_trajectory(30, 9, 6, 0);
  const auto sens = make_coils(n, 2);
  const auto factored = encode(u, phi, sens, traj);
  const auto per_frame = sample_frames(u * phi, n, sens, traj, 0.0, 0);
  CHECK(rel(factored.samples, per_frame.samples) <= 1e-10);
}

TEST_CASE("Toeplitz normal operator matches adjoint of forward") {
  std::mt19937_64 rng(11);
  const int n = 12;
  const auto traj = density_compensation(make_trajectory(40, 13, 5, 4));
  const auto sens = make_coils(n, 3);
  const CxMatrix phi = random_basis(3, 5, rng);
  const CxMatrix u = random_matrix(n * n, 3, rng);
  const Nufft2d plan(n, traj.points());
  const CxMatrix ref =
      backproject(encode(u, phi, sens, traj, plan), phi, sens, traj, BackprojectMode::exact_adjoint, plan);
  const ToeplitzNormal normal(phi, sens, traj);
  CHECK(rel(normal.apply(u), ref) <= 1e-4);
  // Self-adjoint and positive.
  const CxMatrix v = random_matrix(n * n, 3, rng);
  const Cx uv = inner(u, normal.apply(v));
  const Cx vu = inner(v, normal.apply(u));
  CHECK(std::abs(uv - std::conj(vu)) <= 1e-9 * std::abs(uv));
  CHECK(inner(u, normal.apply(u)).real() > 0.0);
  CHECK_THROWS_AS((void)normal.apply(CxMatrix::Zero(n * n, 2)), InvalidParameter);
}
