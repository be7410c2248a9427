#include "featspace/metrics.hpp"

#include <boost/math/distributions/students_t.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

namespace featspace::eval {

double nrmse(const CxMatrix &est, const CxMatrix &ref) {
  require(est.rows() == ref.rows() && est.cols() == ref.cols(), "nrmse: shape mismatch");
  const double denom = ref.norm();
  if (denom == 0.0) throw UndefinedMetric("nrmse: reference is all zero");
  return (est - ref).norm() / denom;
}

Psnr psnr(const CxMatrix &est, const CxMatrix &ref) {
  require(est.rows() == ref.rows() && est.cols() == ref.cols(), "psnr: shape mismatch");
  require(ref.size() > 0, "psnr: empty input");
  const double peak = ref.cwiseAbs().maxCoeff();
  if (peak == 0.0) throw UndefinedMetric("psnr: reference is all zero");
  const double mse = (est.cwiseAbs() - ref.cwiseAbs()).squaredNorm() / static_cast<double>(ref.size());
  Psnr out;
  if (mse == 0.0) {
    out.infinite = true;
    out.db = std::numeric_limits<double>::infinity();
    return out;
  }
  out.db = 20.0 * std::log10(peak / std::sqrt(mse));
  return out;
}

namespace {

RVector gaussian_window(const SsimParams &p) {
  RVector g(p.window);
  const int half = p.window / 2;
  for (int i = 0; i < p.window; ++i) g[i] = std::exp(-0.5 * (i - half) * (i - half) / (p.sigma * p.sigma));
  return g / g.sum();
}

// Separable valid-mode filtering.
RMatrix filter_valid(const RMatrix &img, const RVector &g) {
  const Eigen::Index k = g.size();
  const Eigen::Index h = img.rows() - k + 1;
  const Eigen::Index w = img.cols() - k + 1;
  RMatrix rows_done(img.rows(), w);
  for (Eigen::Index x = 0; x < w; ++x) rows_done.col(x) = img.middleCols(x, k) * g;
  RMatrix out(h, w);
  for (Eigen::Index y = 0; y < h; ++y) out.row(y) = g.transpose() * rows_done.middleRows(y, k);
  return out;
}

} // namespace

double ssim(const RMatrix &est, const RMatrix &ref, std::optional<double> dynamic_range, const SsimParams &params) {
  require(est.rows() == ref.rows() && est.cols() == ref.cols(), "ssim: shape mismatch");
  require(ref.rows() >= params.window && ref.cols() >= params.window, "ssim: image smaller than window");
  double range = dynamic_range.value_or(ref.maxCoeff() - ref.minCoeff());
  if (range <= 0) range = 1.0;
  const double c1 = (params.k1 * range) * (params.k1 * range);
  const double c2 = (params.k2 * range) * (params.k2 * range);

  const RVector g = gaussian_window(params);
  const RMatrix mx = filter_valid(est, g);
  const RMatrix my = filter_valid(ref, g);
  const RMatrix sxx = filter_valid(est.cwiseProduct(est), g) - mx.cwiseProduct(mx);
  const RMatrix syy = filter_valid(ref.cwiseProduct(ref), g) - my.cwiseProduct(my);
  const RMatrix sxy = filter_valid(est.cwiseProduct(ref), g) - mx.cwiseProduct(my);

  const auto num = (2.0 * mx.array() * my.array() + c1) * (2.0 * sxy.array() + c2);
  const auto den = (mx.array().square() + my.array().square() + c1) * (sxx.array() + syy.array() + c2);
  return (num / den).mean();
}

ImageMetrics image_metrics(const CxMatrix &est_frames, const CxMatrix &ref_frames, int side) {
  require(est_frames.rows() == static_cast<Eigen::Index>(side) * side, "image_metrics: frame size mismatch");
  ImageMetrics m;
  m.nrmse = nrmse(est_frames, ref_frames);
  m.psnr = psnr(est_frames, ref_frames);
  using RowMajorImage = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  double total = 0.0;
  for (Eigen::Index f = 0; f < ref_frames.cols(); ++f) {
    const RVector e = est_frames.col(f).cwiseAbs();
    const RVector r = ref_frames.col(f).cwiseAbs();
    const RMatrix ei = Eigen::Map<const RowMajorImage>(e.data(), side, side);
    const RMatrix ri = Eigen::Map<const RowMajorImage>(r.data(), side, side);
    total += ssim(ei, ri);
  }
  m.ssim = total / static_cast<double>(ref_frames.cols());
  return m;
}

double blood_null_ms(const phantom::PhantomSpec &spec) {
  for (const auto &t : spec.tissues) {
    if (t.label == phantom::kBloodPool) {
      const double t1_star = t.t1_ms / (spec.inversion_ratio - 1.0);
      return t1_star * std::log(spec.inversion_ratio);
    }
  }
  throw InvalidParameter("blood_null_ms: phantom has no blood pool");
}

std::vector<int> select_contrast_frames(const TimeAxes &axes, std::span<const double> tau_ms, Contrast contrast,
                                        double blood_null, int resp_bin) {
  axes.validate();
  require(static_cast<int>(tau_ms.size()) == axes.n_tau, "select_contrast_frames: tau metadata missing or mismatched");
  require(resp_bin >= 0 && resp_bin < axes.n_resp, "select_contrast_frames: respiratory bin out of range");
  int tau = axes.n_tau - 1;
  if (contrast == Contrast::dark_blood) {
    double best = std::numeric_limits<double>::infinity();
    for (int i = 0; i < axes.n_tau; ++i) {
      if (std::abs(tau_ms[i] - blood_null) < best) {
        best = std::abs(tau_ms[i] - blood_null);
        tau = i;
      }
    }
  }
  std::vector<int> frames(axes.n_cardiac);
  for (int c = 0; c < axes.n_cardiac; ++c) frames[c] = axes.frame(tau, c, resp_bin);
  return frames;
}

namespace {

struct LinearFit {
  double a = 0, b = 0, residual = std::numeric_limits<double>::infinity();
};

// Best (a, b) for a fixed T1*, model a - b e.
LinearFit linear_fit(std::span<const double> tau, std::span<const double> y, double t1_star) {
  double s11 = 0, s12 = 0, s22 = 0, r1 = 0, r2 = 0;
  const std::size_t n = tau.size();
  for (std::size_t i = 0; i < n; ++i) {
    const double e = -std::exp(-tau[i] / t1_star);
    s11 += 1.0;
    s12 += e;
    s22 += e * e;
    r1 += y[i];
    r2 += e * y[i];
  }
  const double det = s11 * s22 - s12 * s12;
  LinearFit fit;
  if (std::abs(det) < 1e-300) return fit;
  fit.a = (s22 * r1 - s12 * r2) / det;
  fit.b = (s11 * r2 - s12 * r1) / det;
  fit.residual = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = y[i] - (fit.a - fit.b * std::exp(-tau[i] / t1_star));
    fit.residual += r * r;
  }
  return fit;
}

double sse(std::span<const double> tau, std::span<const double> y, double a, double b, double t) {
  double s = 0.0;
  for (std::size_t i = 0; i < tau.size(); ++i) {
    const double r = y[i] - (a - b * std::exp(-tau[i] / t));
    s += r * r;
  }
  return s;
}

} // namespace

CurveFit fit_ir_curve(std::span<const double> tau, std::span<const double> y) {
  require(tau.size() == y.size() && tau.size() >= 3, "fit_t1: need at least three samples per curve");
  constexpr int kGrid = 50;
  constexpr double kLo = 100.0, kHi = 3000.0;
  constexpr int kMaxIter = 20;
  constexpr double kTol = 1e-8;

  LinearFit best;
  double best_t = kLo;
  for (int i = 0; i < kGrid; ++i) {
    const double t = kLo * std::pow(kHi / kLo, static_cast<double>(i) / (kGrid - 1));
    const LinearFit f = linear_fit(tau, y, t);
    if (f.residual < best.residual) {
      best = f;
      best_t = t;
    }
  }

  double a = best.a, b = best.b, t = best_t;
  double cost = best.residual;
  const std::size_t n = tau.size();
  Eigen::MatrixXd jac(n, 3);
  Eigen::VectorXd res(n);
  for (int it = 0; it < kMaxIter; ++it) {
    for (std::size_t i = 0; i < n; ++i) {
      const double e = std::exp(-tau[i] / t);
      res[i] = y[i] - (a - b * e);
      jac(i, 0) = 1.0;
      jac(i, 1) = -e;
      jac(i, 2) = -b * e * tau[i] / (t * t);
    }
    const Eigen::Vector3d step = jac.colPivHouseholderQr().solve(res);
    if (!step.allFinite()) break;
    double scale = 1.0;
    bool accepted = false;
    for (int h = 0; h < 12; ++h, scale *= 0.5) {
      const double ta = a + scale * step[0];
      const double tb = b + scale * step[1];
      const double tt = t + scale * step[2];
      if (tt <= 0) continue;
      const double c = sse(tau, y, ta, tb, tt);
      if (c <= cost) {
        a = ta;
        b = tb;
        t = tt;
        cost = c;
        accepted = true;
        break;
      }
    }
    const double rel = scale * std::sqrt(step[0] * step[0] / (a * a + 1e-300) + step[1] * step[1] / (b * b + 1e-300) +
                                         step[2] * step[2] / (t * t));
    if (!accepted || rel < kTol) break;
  }

  CurveFit fit;
  fit.a = a;
  fit.b = b;
  fit.t1_star = t;
  fit.residual = cost;
  if (a > 0 && t > 0 && std::isfinite(a) && std::isfinite(b) && std::isfinite(t)) {
    fit.t1 = t * (b / a - 1.0);
    fit.low_confidence = (b / a - 1.0) < 0.05;
    fit.valid = fit.t1 > 0 && !fit.low_confidence && std::isfinite(fit.t1);
  } else {
    fit.low_confidence = true;
  }
  return fit;
}

CurveFit fit_ir_magnitude(std::span<const double> tau, std::span<const double> magnitude) {
  require(tau.size() == magnitude.size(), "fit_t1: tau and signal lengths differ");
  const auto min_it = std::min_element(magnitude.begin(), magnitude.end());
  const std::size_t pivot = static_cast<std::size_t>(min_it - magnitude.begin());
  CurveFit best;
  best.residual = std::numeric_limits<double>::infinity();
  std::vector<double> signed_curve(magnitude.begin(), magnitude.end());
  for (std::size_t flip_to : {pivot, pivot + 1}) {
    for (std::size_t i = 0; i < signed_curve.size(); ++i) signed_curve[i] = i < flip_to ? -magnitude[i] : magnitude[i];
    const CurveFit f = fit_ir_curve(tau, signed_curve);
    if (f.residual < best.residual) best = f;
  }
  return best;
}

T1Map fit_t1(const CxMatrix &u, const subspace::TemporalBasis &basis, const IVector &mask,
             std::span<const double> tau_ms, int cardiac_bin, int resp_bin) {
  const TimeAxes &axes = basis.axes;
  require(axes.n_frames() == basis.n_frames(), "fit_t1: basis time metadata missing");
  require(static_cast<int>(tau_ms.size()) == axes.n_tau, "fit_t1: tau values do not match the tau axis");
  require(mask.size() == u.rows(), "fit_t1: mask size does not match U");
  require(cardiac_bin >= 0 && cardiac_bin < axes.n_cardiac && resp_bin >= 0 && resp_bin < axes.n_resp,
          "fit_t1: bin out of range");

  std::vector<int> frames(axes.n_tau);
  for (int k = 0; k < axes.n_tau; ++k) frames[k] = axes.frame(k, cardiac_bin, resp_bin);
  const RMatrix curves = subspace::render_frames(u, basis, frames).cwiseAbs();

  T1Map map;
  const Eigen::Index m = u.rows();
  map.t1 = RVector::Zero(m);
  map.residual = RVector::Zero(m);
  map.valid.assign(m, 0);
  map.low_confidence.assign(m, 0);
  std::vector<double> curve(axes.n_tau);
  for (Eigen::Index v = 0; v < m; ++v) {
    if (mask[v] == 0) continue;
    for (int k = 0; k < axes.n_tau; ++k) curve[k] = curves(v, k);
    if (*std::max_element(curve.begin(), curve.end()) == 0.0) continue;
    const CurveFit f = fit_ir_magnitude(tau_ms, curve);
    map.residual[v] = f.residual;
    map.low_confidence[v] = f.low_confidence;
    if (f.valid) {
      map.t1[v] = f.t1;
      map.valid[v] = 1;
    }
  }
  return map;
}

namespace {

double median(std::vector<double> v) {
  require(!v.empty(), "median of empty set");
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  const double hi = v[mid];
  if (v.size() % 2 == 1) return hi;
  const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lo + hi);
}

} // namespace

std::vector<double> region_medians(const T1Map &map, const IVector &labels, int max_label) {
  std::vector<std::vector<double>> groups(max_label + 1);
  for (Eigen::Index v = 0; v < labels.size(); ++v) {
    if (map.valid[v] && labels[v] >= 1 && labels[v] <= max_label) groups[labels[v]].push_back(map.t1[v]);
  }
  std::vector<double> out(max_label + 1, std::numeric_limits<double>::quiet_NaN());
  for (int l = 1; l <= max_label; ++l) {
    if (!groups[l].empty()) out[l] = median(groups[l]);
  }
  return out;
}

AgreementStats bland_altman(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), "bland_altman: maps are not aligned");
  require(a.size() >= 2, "bland_altman: need at least two valid points");
  const double n = static_cast<double>(a.size());
  AgreementStats s;
  s.n = static_cast<int>(a.size());

  double sum_d = 0, mean_a = 0, mean_b = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sum_d += b[i] - a[i];
    mean_a += a[i];
    mean_b += b[i];
  }
  s.bias = sum_d / n;
  mean_a /= n;
  mean_b /= n;

  double ss_d = 0, saa = 0, sbb = 0, sab = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = (b[i] - a[i]) - s.bias;
    ss_d += d * d;
    saa += (a[i] - mean_a) * (a[i] - mean_a);
    sbb += (b[i] - mean_b) * (b[i] - mean_b);
    sab += (a[i] - mean_a) * (b[i] - mean_b);
  }
  s.sd = std::sqrt(ss_d / (n - 1.0));
  s.loa_lower = s.bias - 1.96 * s.sd;
  s.loa_upper = s.bias + 1.96 * s.sd;

  if (s.sd > 0) {
    const double t = s.bias / (s.sd / std::sqrt(n));
    const boost::math::students_t dist(n - 1.0);
    s.p_value = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t)));
    s.p_defined = true;
  } else {
    s.p_value = std::numeric_limits<double>::quiet_NaN();
  }
  if (saa > 0 && sbb > 0) {
    s.pearson_r = sab / std::sqrt(saa * sbb);
    s.r_defined = true;
  } else {
    s.pearson_r = std::numeric_limits<double>::quiet_NaN();
  }
  return s;
}

AgreementStats bland_altman(const T1Map &a, const T1Map &b, const IVector &labels,
                            const std::vector<int> &roi_labels, AgreementMode mode) {
  require(a.t1.size() == b.t1.size() && a.t1.size() == labels.size(), "bland_altman: maps are not aligned");
  auto in_roi = [&](int label) {
    return std::find(roi_labels.begin(), roi_labels.end(), label) != roi_labels.end();
  };
  std::vector<double> xa, xb;
  if (mode == AgreementMode::per_voxel) {
    for (Eigen::Index v = 0; v < labels.size(); ++v) {
      if (in_roi(labels[v]) && a.valid[v] && b.valid[v]) {
        xa.push_back(a.t1[v]);
        xb.push_back(b.t1[v]);
      }
    }
  } else {
    std::map<int, std::pair<std::vector<double>, std::vector<double>>> groups;
    for (Eigen::Index v = 0; v < labels.size(); ++v) {
      if (in_roi(labels[v]) && a.valid[v] && b.valid[v]) {
        groups[labels[v]].first.push_back(a.t1[v]);
        groups[labels[v]].second.push_back(b.t1[v]);
      }
    }
    for (auto &[label, pair] : groups) {
      xa.push_back(median(pair.first));
      xb.push_back(median(pair.second));
    }
  }
  return bland_altman(xa, xb);
}

} // namespace featspace::eval
