#include "featspace/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace featspace::phantom {

bool Ellipse::contains(double x, double y) const {
  const double dx = (x - cx) / rx;
  const double dy = (y - cy) / ry;
  return dx * dx + dy * dy <= 1.0;
}

std::vector<double> PhantomSpec::tau_values() const {
  std::vector<double> tau(axes.n_tau);
  for (int i = 0; i < axes.n_tau; ++i) tau[i] = tau_first_ms + i * tau_spacing_ms;
  return tau;
}

void PhantomSpec::validate() const {
  require(grid_size >= 2 && grid_size % 2 == 0, "grid_size must be even and >= 2");
  axes.validate();
  require(tau_first_ms >= 0 && tau_spacing_ms > 0, "tau sampling must be non-negative and increasing");
  require(inversion_ratio > 1.0, "inversion_ratio (B/A) must exceed 1");
  require(resp_amplitude >= 0 && cardiac_amplitude >= 0, "motion amplitudes must be >= 0");
  require(cardiac_amplitude < 0.5, "cardiac_amplitude must be < 0.5");
  const double half = grid_size / 2.0;
  for (const auto &t : tissues) {
    require(t.t1_ms > 0, "tissue T1 must be positive");
    require(t.proton_density >= 0, "tissue proton density must be >= 0");
    require(t.shape.rx > 0 && t.shape.ry > 0, "tissue ellipse radii must be positive");
    require(std::abs(t.shape.cx) + t.shape.rx <= half && std::abs(t.shape.cy) + t.shape.ry <= half,
            "tissue region extends outside the grid");
  }
}

std::vector<Tissue> default_anatomy(int grid_size) {
  const double g = grid_size;
  return {
      {kChestWall, {0.0, 0.0, 0.42 * g, 0.32 * g}, 0.75, 950.0},
      {kMyocardium, {0.05 * g, -0.03 * g, 0.17 * g, 0.16 * g}, 0.85, 1300.0},
      {kBloodPool, {0.05 * g, -0.03 * g, 0.10 * g, 0.095 * g}, 1.0, 1600.0},
  };
}

PhantomSpec randomize(const PhantomSpec &base, const PhantomRanges &ranges, std::uint64_t seed) {
  PhantomSpec spec = base;
  spec.seed = seed;
  if (spec.tissues.empty()) spec.tissues = default_anatomy(spec.grid_size);

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto draw = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  const double j = ranges.geometry_jitter;

  // Heart geometry moves as one piece so the ring stays a ring.
  const double heart_dx = draw(-j, j) * 0.1 * spec.grid_size;
  const double heart_dy = draw(-j, j) * 0.1 * spec.grid_size;
  const double heart_scale = 1.0 + draw(-j, j);
  const double body_scale = 1.0 + draw(-j, j) * 0.5;

  for (auto &t : spec.tissues) {
    const TissueRanges *r = nullptr;
    switch (t.label) {
    case kChestWall:
      r = &ranges.chest_wall;
      t.shape.rx *= body_scale;
      t.shape.ry *= body_scale;
      break;
    case kMyocardium:
    case kBloodPool:
      r = t.label == kMyocardium ? &ranges.myocardium : &ranges.blood_pool;
      t.shape.cx += heart_dx;
      t.shape.cy += heart_dy;
      t.shape.rx *= heart_scale;
      t.shape.ry *= heart_scale;
      break;
    default:
      break;
    }
    if (r != nullptr) {
      t.proton_density = draw(r->pd_min, r->pd_max);
      t.t1_ms = draw(r->t1_min, r->t1_max);
    }
  }
  return spec;
}

Cx ir_signal(double tau_ms, double a, double b, double t1_star_ms) {
  require(t1_star_ms > 0, "ir_signal: t1_star must be positive");
  require(tau_ms >= 0, "ir_signal: tau must be non-negative");
  return {a - b * std::exp(-tau_ms / t1_star_ms), 0.0};
}

double apparent_to_true_t1(double a, double b, double t1_star_ms) {
  require(a > 0, "apparent_to_true_t1: a must be positive");
  require(t1_star_ms > 0, "apparent_to_true_t1: t1_star must be positive");
  return t1_star_ms * (b / a - 1.0);
}

StaticAnatomy rasterize(const PhantomSpec &spec) {
  const int n = spec.grid_size;
  const int m = n * n;
  StaticAnatomy out;
  out.grid_size = n;
  out.mask = IVector::Zero(m);
  std::vector<int> owner(m, -1);
  for (int i = 0; i < static_cast<int>(spec.tissues.size()); ++i) {
    const auto &shape = spec.tissues[i].shape;
    for (int iy = 0; iy < n; ++iy) {
      for (int ix = 0; ix < n; ++ix) {
        if (shape.contains(ix - n / 2, iy - n / 2)) owner[iy * n + ix] = i;
      }
    }
  }
  out.region_fraction.assign(spec.tissues.size(), RVector::Zero(m));
  for (int v = 0; v < m; ++v) {
    if (owner[v] < 0) continue;
    out.region_fraction[owner[v]][v] = 1.0;
    out.mask[v] = spec.tissues[owner[v]].label;
  }
  return out;
}

namespace {

struct HeartGeometry {
  bool present = false;
  double cx = 0, cy = 0;
  double inner = 0, outer = 0;
};

HeartGeometry heart_of(const PhantomSpec &spec) {
  HeartGeometry h;
  const Tissue *myo = nullptr;
  const Tissue *pool = nullptr;
  for (const auto &t : spec.tissues) {
    if (t.label == kMyocardium) myo = &t;
    if (t.label == kBloodPool) pool = &t;
  }
  if (myo == nullptr) return h;
  h.present = true;
  h.cx = myo->shape.cx;
  h.cy = myo->shape.cy;
  h.outer = 0.5 * (myo->shape.rx + myo->shape.ry);
  h.inner = pool != nullptr ? 0.5 * (pool->shape.rx + pool->shape.ry) : 0.6 * h.outer;
  return h;
}

double bilinear(const RVector &image, int n, double x, double y) {
  const double fx = std::floor(x);
  const double fy = std::floor(y);
  const int x0 = static_cast<int>(fx);
  const int y0 = static_cast<int>(fy);
  const double wx = x - fx;
  const double wy = y - fy;
  auto at = [&](int ix, int iy) {
    return (ix < 0 || iy < 0 || ix >= n || iy >= n) ? 0.0 : image[iy * n + ix];
  };
  double v = (1.0 - wx) * (1.0 - wy) * at(x0, y0);
  if (wx != 0.0) v += wx * (1.0 - wy) * at(x0 + 1, y0);
  if (wy != 0.0) v += (1.0 - wx) * wy * at(x0, y0 + 1);
  if (wx != 0.0 && wy != 0.0) v += wx * wy * at(x0 + 1, y0 + 1);
  return v;
}

} // namespace

RVector deform(const RVector &image, int cardiac, int resp, const PhantomSpec &spec) {
  const int n = spec.grid_size;
  require(image.size() == static_cast<Eigen::Index>(n) * n, "deform: image size does not match grid");
  require(cardiac >= 0 && cardiac < spec.axes.n_cardiac, "deform: cardiac bin out of range");
  require(resp >= 0 && resp < spec.axes.n_resp, "deform: respiratory bin out of range");

  const double two_pi = 2.0 * std::numbers::pi;
  const HeartGeometry heart = heart_of(spec);
  const double ring = 0.5 * (heart.inner + heart.outer);
  const double shift_r =
      heart.present ? spec.cardiac_amplitude * std::sin(two_pi * cardiac / spec.axes.n_cardiac) * ring : 0.0;
  const double shift_y = spec.resp_amplitude * std::sin(two_pi * resp / spec.axes.n_resp);
  if (shift_r == 0.0 && shift_y == 0.0) return image;

  // Radial displacement profile: linear inside the pool, rigid across the
  // ring, fading to zero at twice the outer radius.
  auto displacement = [&](double rho) {
    if (rho <= heart.inner) return shift_r * rho / heart.inner;
    if (rho <= heart.outer) return shift_r;
    if (rho < 2.0 * heart.outer) return shift_r * (2.0 * heart.outer - rho) / heart.outer;
    return 0.0;
  };

  RVector out(image.size());
  for (int iy = 0; iy < n; ++iy) {
    for (int ix = 0; ix < n; ++ix) {
      double x = ix - n / 2;
      double y = iy - n / 2 - shift_y;
      if (shift_r != 0.0) {
        const double dx = x - heart.cx;
        const double dy = y - heart.cy;
        const double rho = std::hypot(dx, dy);
        if (rho > 0.0) {
          const double scale = (rho - displacement(rho)) / rho;
          x = heart.cx + dx * scale;
          y = heart.cy + dy * scale;
        }
      }
      out[iy * n + ix] = bilinear(image, n, x + n / 2, y + n / 2);
    }
  }
  return out;
}

GroundTruth generate(const PhantomSpec &spec) {
  spec.validate();
  const int m = spec.n_voxels();
  const auto &axes = spec.axes;

  GroundTruth gt;
  gt.grid_size = spec.grid_size;
  gt.axes = axes;
  gt.tau_ms = spec.tau_values();

  const StaticAnatomy anatomy = rasterize(spec);
  gt.tissue_mask = anatomy.mask;

  const std::size_t n_tissue = spec.tissues.size();
  std::vector<double> amp(n_tissue), depth(n_tissue), t1_star(n_tissue);
  gt.t1_map = RVector::Zero(m);
  for (std::size_t i = 0; i < n_tissue; ++i) {
    const auto &t = spec.tissues[i];
    amp[i] = t.proton_density;
    depth[i] = spec.inversion_ratio * t.proton_density;
    t1_star[i] = t.t1_ms / (spec.inversion_ratio - 1.0);
    const double t1 = t.proton_density > 0 ? apparent_to_true_t1(amp[i], depth[i], t1_star[i]) : t.t1_ms;
    for (int v = 0; v < m; ++v) {
      if (anatomy.region_fraction[i][v] > 0) gt.t1_map[v] = t1;
    }
  }

  // Signal curves per tissue, s_i(tau).
  RMatrix curves(n_tissue, axes.n_tau);
  for (std::size_t i = 0; i < n_tissue; ++i) {
    for (int k = 0; k < axes.n_tau; ++k) {
      curves(i, k) = ir_signal(gt.tau_ms[k], amp[i], depth[i], t1_star[i]).real();
    }
  }

  gt.image = CxMatrix::Zero(m, axes.n_frames());
  RMatrix fractions(m, static_cast<Eigen::Index>(n_tissue));
  for (int r = 0; r < axes.n_resp; ++r) {
    for (int c = 0; c < axes.n_cardiac; ++c) {
      for (std::size_t i = 0; i < n_tissue; ++i) {
        fractions.col(i) = deform(anatomy.region_fraction[i], c, r, spec);
      }
      const RMatrix frames = fractions * curves; // M x n_tau
      const int first = axes.frame(0, c, r);
      gt.image.middleCols(first, axes.n_tau) = frames.cast<Cx>();
    }
  }
  return gt;
}

} // namespace featspace::phantom
