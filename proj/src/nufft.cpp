#include "featspace/nufft.hpp"

#include <fftw3.h>

#include <cmath>
#include <mutex>
#include <numbers>

namespace featspace {

namespace {

// FFTW's planner is not re-entrant.
std::mutex &planner_mutex() {
  static std::mutex m;
  return m;
}

struct FftwBuffer {
  explicit FftwBuffer(std::size_t n) : data(fftw_alloc_complex(n)), size(n) {
    if (data == nullptr) throw std::bad_alloc();
  }
  ~FftwBuffer() { fftw_free(data); }
  FftwBuffer(const FftwBuffer &) = delete;
  FftwBuffer &operator=(const FftwBuffer &) = delete;

  fftw_complex *data;
  std::size_t size;
};

double kaiser_bessel(double u, int width, double beta) {
  const double t = 2.0 * u / width;
  const double arg = 1.0 - t * t;
  if (arg < 0.0) return 0.0;
  return std::cyl_bessel_i(0.0, beta * std::sqrt(arg));
}

// Continuous Fourier transform of the kernel at image offset x.
double kaiser_bessel_ft(double x, int width, int grid, double beta) {
  const double w = std::numbers::pi * width * x / grid;
  const double z2 = beta * beta - w * w;
  if (z2 > 0) {
    const double z = std::sqrt(z2);
    return width * std::sinh(z) / z;
  }
  if (z2 < 0) {
    const double z = std::sqrt(-z2);
    return width * std::sin(z) / z;
  }
  return width;
}

} // namespace

double KernelParams::beta() const {
  const double ratio = static_cast<double>(width) / oversampling;
  const double a = oversampling - 0.5;
  return std::numbers::pi * std::sqrt(ratio * ratio * a * a - 0.8);
}

struct Nufft2d::Plans {
  fftw_plan forward = nullptr;
  fftw_plan backward = nullptr;

  Plans() = default;
  Plans(const Plans &) = delete;
  Plans &operator=(const Plans &) = delete;
  ~Plans() {
    std::lock_guard lock(planner_mutex());
    if (forward != nullptr) fftw_destroy_plan(forward);
    if (backward != nullptr) fftw_destroy_plan(backward);
  }
};

Nufft2d::Nufft2d(int side, const RMatrix &points, KernelParams kernel)
    : side_(side), grid_(side * kernel.oversampling), width_(kernel.width), n_points_(points.rows()) {
  require(side >= 2 && side % 2 == 0, "nufft: image side must be even");
  require(points.cols() == 2, "nufft: points must be P x 2");
  require(kernel.width >= 2 && kernel.oversampling >= 2, "nufft: unsupported kernel parameters");
  require(grid_ >= kernel.width, "nufft: oversampled grid smaller than the kernel");
  const double beta = kernel.beta();

  index_x_.resize(n_points_);
  index_y_.resize(n_points_);
  weight_x_.resize(n_points_ * width_);
  weight_y_.resize(n_points_ * width_);
  for (Eigen::Index p = 0; p < n_points_; ++p) {
    const double kx = points(p, 0);
    const double ky = points(p, 1);
    require(std::isfinite(kx) && std::isfinite(ky) && kx >= -0.5 && kx < 0.5 && ky >= -0.5 && ky < 0.5,
            "nufft: k-space coordinate outside [-0.5, 0.5)");
    const double gx = kx * grid_;
    const double gy = ky * grid_;
    const int x0 = static_cast<int>(std::ceil(gx - 0.5 * width_));
    const int y0 = static_cast<int>(std::ceil(gy - 0.5 * width_));
    index_x_[p] = ((x0 % grid_) + grid_) % grid_;
    index_y_[p] = ((y0 % grid_) + grid_) % grid_;
    for (int j = 0; j < width_; ++j) {
      weight_x_[p * width_ + j] = kaiser_bessel(gx - (x0 + j), width_, beta);
      weight_y_[p * width_ + j] = kaiser_bessel(gy - (y0 + j), width_, beta);
    }
  }

  deapodization_.resize(static_cast<Eigen::Index>(side) * side);
  RVector ft(side);
  for (int i = 0; i < side; ++i) ft[i] = kaiser_bessel_ft(i - side / 2, width_, grid_, beta);
  for (int iy = 0; iy < side; ++iy) {
    for (int ix = 0; ix < side; ++ix) deapodization_[iy * side + ix] = 1.0 / (ft[ix] * ft[iy]);
  }

  auto plans = std::make_shared<Plans>();
  FftwBuffer scratch(static_cast<std::size_t>(grid_) * grid_);
  {
    std::lock_guard lock(planner_mutex());
    // ESTIMATE without accumulated wisdom keeps plan selection, and therefore
    // rounding, independent of what was planned earlier in the process.
    fftw_forget_wisdom();
    plans->forward = fftw_plan_dft_2d(grid_, grid_, scratch.data, scratch.data, FFTW_FORWARD, FFTW_ESTIMATE);
    plans->backward = fftw_plan_dft_2d(grid_, grid_, scratch.data, scratch.data, FFTW_BACKWARD, FFTW_ESTIMATE);
  }
  plans_ = std::move(plans);
}

CxVector Nufft2d::forward(const Eigen::Ref<const CxVector> &image) const {
  require(image.size() == static_cast<Eigen::Index>(side_) * side_, "nufft: image size mismatch");
  const int g = grid_;
  FftwBuffer buf(static_cast<std::size_t>(g) * g);
  auto *grid = reinterpret_cast<Cx *>(buf.data);
  std::fill(grid, grid + buf.size, Cx{0.0, 0.0});

  const int half = side_ / 2;
  for (int iy = 0; iy < side_; ++iy) {
    const int gy = (iy - half + g) % g;
    for (int ix = 0; ix < side_; ++ix) {
      const int gx = (ix - half + g) % g;
      const int v = iy * side_ + ix;
      grid[gy * g + gx] = image[v] * deapodization_[v];
    }
  }
  fftw_execute_dft(plans_->forward, buf.data, buf.data);

  CxVector out(n_points_);
  for (Eigen::Index p = 0; p < n_points_; ++p) {
    const double *wx = &weight_x_[p * width_];
    const double *wy = &weight_y_[p * width_];
    Cx acc{0.0, 0.0};
    for (int j = 0; j < width_; ++j) {
      int row = index_y_[p] + j;
      if (row >= g) row -= g;
      const Cx *line_start = grid + static_cast<std::ptrdiff_t>(row) * g;
      Cx line{0.0, 0.0};
      for (int i = 0; i < width_; ++i) {
        int col = index_x_[p] + i;
        if (col >= g) col -= g;
        line += wx[i] * line_start[col];
      }
      acc += wy[j] * line;
    }
    out[p] = acc;
  }
  return out;
}

CxVector Nufft2d::adjoint(const Eigen::Ref<const CxVector> &samples) const {
  require(samples.size() == n_points_, "nufft: sample count mismatch");
  const int g = grid_;
  FftwBuffer buf(static_cast<std::size_t>(g) * g);
  auto *grid = reinterpret_cast<Cx *>(buf.data);
  std::fill(grid, grid + buf.size, Cx{0.0, 0.0});

  for (Eigen::Index p = 0; p < n_points_; ++p) {
    const double *wx = &weight_x_[p * width_];
    const double *wy = &weight_y_[p * width_];
    const Cx value = samples[p];
    for (int j = 0; j < width_; ++j) {
      int row = index_y_[p] + j;
      if (row >= g) row -= g;
      Cx *line_start = grid + static_cast<std::ptrdiff_t>(row) * g;
      const Cx line = wy[j] * value;
      for (int i = 0; i < width_; ++i) {
        int col = index_x_[p] + i;
        if (col >= g) col -= g;
        line_start[col] += wx[i] * line;
      }
    }
  }
  fftw_execute_dft(plans_->backward, buf.data, buf.data);

  CxVector image(static_cast<Eigen::Index>(side_) * side_);
  const int half = side_ / 2;
  for (int iy = 0; iy < side_; ++iy) {
    const int gy = (iy - half + g) % g;
    for (int ix = 0; ix < side_; ++ix) {
      const int gx = (ix - half + g) % g;
      const int v = iy * side_ + ix;
      image[v] = grid[gy * g + gx] * deapodization_[v];
    }
  }
  return image;
}

struct Fft2d::Plans {
  fftw_plan forward = nullptr;
  fftw_plan backward = nullptr;

  Plans() = default;
  Plans(const Plans &) = delete;
  Plans &operator=(const Plans &) = delete;
  ~Plans() {
    std::lock_guard lock(planner_mutex());
    if (forward != nullptr) fftw_destroy_plan(forward);
    if (backward != nullptr) fftw_destroy_plan(backward);
  }
};

Fft2d::Fft2d(int n) : n_(n) {
  require(n >= 1, "fft: size must be positive");
  auto plans = std::make_shared<Plans>();
  FftwBuffer scratch(static_cast<std::size_t>(n) * n);
  {
    std::lock_guard lock(planner_mutex());
    const unsigned flags = FFTW_ESTIMATE | FFTW_UNALIGNED;
    fftw_forget_wisdom();
    plans->forward = fftw_plan_dft_2d(n, n, scratch.data, scratch.data, FFTW_FORWARD, flags);
    plans->backward = fftw_plan_dft_2d(n, n, scratch.data, scratch.data, FFTW_BACKWARD, flags);
  }
  plans_ = std::move(plans);
}

void Fft2d::forward(Cx *data) const {
  auto *p = reinterpret_cast<fftw_complex *>(data);
  fftw_execute_dft(plans_->forward, p, p);
}

void Fft2d::backward(Cx *data) const {
  auto *p = reinterpret_cast<fftw_complex *>(data);
  fftw_execute_dft(plans_->backward, p, p);
}

CxVector direct_dft(int side, const Eigen::Ref<const CxVector> &image, const RMatrix &points) {
  require(image.size() == static_cast<Eigen::Index>(side) * side, "direct_dft: image size mismatch");
  CxVector out = CxVector::Zero(points.rows());
  const double two_pi = 2.0 * std::numbers::pi;
  for (Eigen::Index p = 0; p < points.rows(); ++p) {
    Cx acc{0.0, 0.0};
    for (int iy = 0; iy < side; ++iy) {
      for (int ix = 0; ix < side; ++ix) {
        const double phase = -two_pi * (points(p, 0) * (ix - side / 2) + points(p, 1) * (iy - side / 2));
        acc += image[iy * side + ix] * Cx{std::cos(phase), std::sin(phase)};
      }
    }
    out[p] = acc;
  }
  return out;
}

} // namespace featspace
