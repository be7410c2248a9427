#pragma once

#include "featspace/core.hpp"

#include <string>
#include <vector>

namespace featspace::phantom {

// Region labels of the concentric cardiac phantom.
enum Label : int { kBackground = 0, kChestWall = 1, kMyocardium = 2, kBloodPool = 3 };

// Axis-aligned ellipse in voxel units, relative to the grid centre.
struct Ellipse {
  double cx = 0, cy = 0;
  double rx = 1, ry = 1;

  [[nodiscard]] bool contains(double x, double y) const;
};

struct Tissue {
  int label = kBackground;
  Ellipse shape;
  double proton_density = 1.0; // A >= 0
  double t1_ms = 1000.0;
};

struct PhantomSpec {
  int grid_size = 64;
  TimeAxes axes{24, 6, 4};
  double tau_first_ms = 20.0;
  double tau_spacing_ms = 100.0;
  // B/A of the recovery curve; 2 is a perfect inversion.
  double inversion_ratio = 2.0;
  // Painted in order, later tissues overwrite earlier ones.
  std::vector<Tissue> tissues;
  double cardiac_amplitude = 0.15;
  double resp_amplitude = 2.0;
  std::uint64_t seed = 0;

  [[nodiscard]] int n_voxels() const { return grid_size * grid_size; }
  [[nodiscard]] int n_frames() const { return axes.n_frames(); }
  [[nodiscard]] std::vector<double> tau_values() const;
  void validate() const;
};

// Uniform sampling ranges for seed-randomized phantoms.
struct TissueRanges {
  double pd_min = 0.8, pd_max = 1.2;
  double t1_min = 1000.0, t1_max = 1400.0;
};

struct PhantomRanges {
  TissueRanges chest_wall{0.6, 0.9, 800.0, 1100.0};
  TissueRanges myocardium{0.7, 1.0, 1150.0, 1450.0};
  TissueRanges blood_pool{0.9, 1.2, 1500.0, 1900.0};
  // Relative jitter applied to the geometry.
  double geometry_jitter = 0.08;
};

// Concentric-ellipse anatomy with fixed nominal parameters.
std::vector<Tissue> default_anatomy(int grid_size);

// Copy of `base` whose tissue parameters and geometry are drawn from `ranges`
// using `seed`.
PhantomSpec randomize(const PhantomSpec &base, const PhantomRanges &ranges, std::uint64_t seed);

struct GroundTruth {
  int grid_size = 0;
  TimeAxes axes;
  std::vector<double> tau_ms;
  CxMatrix image;    // M x N, frames as columns
  RVector t1_map;    // ms, 0 on background
  IVector tissue_mask;
};

// s(tau) = a - b exp(-tau / t1_star)
Cx ir_signal(double tau_ms, double a, double b, double t1_star_ms);

// Look-Locker correction T1 = T1* (b/a - 1).
double apparent_to_true_t1(double a, double b, double t1_star_ms);

// Row-major side x side real image plus the region label map it was drawn from.
struct StaticAnatomy {
  int grid_size = 0;
  std::vector<RVector> region_fraction; // one indicator map per tissue
  IVector mask;
};

StaticAnatomy rasterize(const PhantomSpec &spec);

// Warps a row-major side x side image to cardiac bin `cardiac` and
// respiratory bin `resp`. Bilinear, zero outside the grid.
RVector deform(const RVector &image, int cardiac, int resp, const PhantomSpec &spec);

GroundTruth generate(const PhantomSpec &spec);

} // namespace featspace::phantom
