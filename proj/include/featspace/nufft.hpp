#pragma once

#include "featspace/core.hpp"

#include <memory>
#include <vector>

namespace featspace {

// Kaiser-Bessel gridding parameters. Width is measured in oversampled-grid
// samples; beta follows the Beatty et al. rule for the given width and
// oversampling ratio.
struct KernelParams {
  int width = 6;
  int oversampling = 2;

  [[nodiscard]] double beta() const;
};

// 2-D type-2 / type-1 non-uniform FFT pair on a side x side image with pixel
// coordinates x in [-side/2, side/2). Points are in cycles/pixel and must lie
// in [-0.5, 0.5). forward() approximates
//   s_p = sum_x image(x) exp(-i 2 pi k_p . x)
// and adjoint() is its exact conjugate transpose.
//
// Images are row-major (index = y * side + x). Interpolation weights are
// precomputed at construction, so a plan is cheap to reuse across images.
class Nufft2d {
public:
  Nufft2d(int side, const RMatrix &points, KernelParams kernel = {});

  [[nodiscard]] int side() const { return side_; }
  [[nodiscard]] Eigen::Index n_points() const { return n_points_; }

  [[nodiscard]] CxVector forward(const Eigen::Ref<const CxVector> &image) const;
  [[nodiscard]] CxVector adjoint(const Eigen::Ref<const CxVector> &samples) const;

private:
  struct Plans;

  int side_ = 0;
  int grid_ = 0;
  int width_ = 0;
  Eigen::Index n_points_ = 0;
  std::vector<int> index_x_, index_y_; // first grid index per point, wrapped into [0, grid)
  std::vector<double> weight_x_, weight_y_; // width values per point
  RVector deapodization_; // 1 / psi_hat on the image grid (side*side)
  std::shared_ptr<const Plans> plans_;
};

// In-place unnormalised n x n complex FFT, row-major. Copies share plans.
class Fft2d {
public:
  explicit Fft2d(int n);
  [[nodiscard]] int size() const { return n_; }
  void forward(Cx *data) const;
  void backward(Cx *data) const;

private:
  struct Plans;
  int n_ = 0;
  std::shared_ptr<const Plans> plans_;
};

// Reference O(M P) evaluation of the same sum. Used by tests.
CxVector direct_dft(int side, const Eigen::Ref<const CxVector> &image, const RMatrix &points);

} // namespace featspace
