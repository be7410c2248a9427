#pragma once

#include "featspace/core.hpp"
#include "featspace/phantom.hpp"
#include "featspace/subspace.hpp"

#include <optional>
#include <span>
#include <vector>

namespace featspace::eval {

// ||est - ref||_2 / ||ref||_2 over all entries.
double nrmse(const CxMatrix &est, const CxMatrix &ref);

struct Psnr {
  double db = 0;
  bool infinite = false;
};

// 20 log10(max|ref| / rms(|est| - |ref|)).
Psnr psnr(const CxMatrix &est, const CxMatrix &ref);

struct SsimParams {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
};

// Mean SSIM over all window positions that fit inside the image. Images are
// height x width. The dynamic range defaults to max(ref) - min(ref) (1 when
// ref is constant).
double ssim(const RMatrix &est, const RMatrix &ref, std::optional<double> dynamic_range = std::nullopt,
            const SsimParams &params = {});

struct ImageMetrics {
  double nrmse = 0;
  Psnr psnr;
  double ssim = 0;
};

// Frames are M x F with row-major side x side columns; SSIM is computed on
// magnitudes frame by frame and averaged.
ImageMetrics image_metrics(const CxMatrix &est_frames, const CxMatrix &ref_frames, int side);

enum class Contrast { bright_blood, dark_blood };

// Inversion time at which blood crosses zero: T1*_blood ln(B/A).
double blood_null_ms(const phantom::PhantomSpec &spec);

// One frame per cardiac bin at the given respiratory bin and a fixed tau:
// the last tau for bright blood, the tau nearest the blood null for dark blood.
std::vector<int> select_contrast_frames(const TimeAxes &axes, std::span<const double> tau_ms, Contrast contrast,
                                        double blood_null_ms, int resp_bin = 0);

struct CurveFit {
  double a = 0;
  double b = 0;
  double t1_star = 0;
  double t1 = 0;
  double residual = 0;
  bool valid = false;
  bool low_confidence = false;
};

// Fits s(tau) = a - b exp(-tau / T1*) to a signed real curve.
CurveFit fit_ir_curve(std::span<const double> tau_ms, std::span<const double> signal);

// Magnitude curve with polarity restored by flipping the samples before the
// minimum (both "through" and "before" the minimum are tried).
CurveFit fit_ir_magnitude(std::span<const double> tau_ms, std::span<const double> magnitude);

struct T1Map {
  RVector t1;
  RVector residual;
  std::vector<std::uint8_t> valid;
  std::vector<std::uint8_t> low_confidence;
};

// Fits every voxel with mask != 0, using the tau curve rendered at
// (cardiac_bin, resp_bin).
T1Map fit_t1(const CxMatrix &u, const subspace::TemporalBasis &basis, const IVector &mask,
             std::span<const double> tau_ms, int cardiac_bin = 0, int resp_bin = 0);

// Median of valid T1 values per label (labels 1..max).
std::vector<double> region_medians(const T1Map &map, const IVector &labels, int max_label);

struct AgreementStats {
  int n = 0;
  double bias = 0;
  double sd = 0;
  double loa_lower = 0;
  double loa_upper = 0;
  double p_value = 0;
  bool p_defined = false;
  double pearson_r = 0;
  bool r_defined = false;
};

// Differences b - a over the included points.
AgreementStats bland_altman(std::span<const double> a, std::span<const double> b);

enum class AgreementMode { per_voxel, per_region_median };

// Agreement of two T1 maps over voxels whose label is in `roi_labels` and that
// are valid in both maps.
AgreementStats bland_altman(const T1Map &a, const T1Map &b, const IVector &labels,
                            const std::vector<int> &roi_labels, AgreementMode mode = AgreementMode::per_voxel);

} // namespace featspace::eval
