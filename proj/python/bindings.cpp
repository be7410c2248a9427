#include "featspace/encoding.hpp"
#include "featspace/io.hpp"
#include "featspace/iterative.hpp"
#include "featspace/metrics.hpp"
#include "featspace/network.hpp"
#include "featspace/nufft.hpp"
#include "featspace/pipeline.hpp"
#include "featspace/subspace.hpp"

#include <pybind11/complex.h>
#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <cmath>
#include <limits>

namespace py = pybind11;
using namespace featspace;
namespace fp = featspace::pipeline;

namespace {

TimeAxes axes_from(const py::object &o) {
  if (py::isinstance<py::int_>(o)) return TimeAxes{o.cast<int>(), 1, 1};
  const auto t = o.cast<std::tuple<int, int, int>>();
  return TimeAxes{std::get<0>(t), std::get<1>(t), std::get<2>(t)};
}

py::object array_to_numpy(const io::ArrayFile &a) {
  std::vector<py::ssize_t> shape(a.dims.begin(), a.dims.end());
  if (a.dtype == io::DType::real64) {
    py::array_t<double> out(shape);
    std::copy(a.real.begin(), a.real.end(), out.mutable_data());
    return std::move(out);
  }
  py::array_t<Cx> out(shape);
  std::copy(a.complex.begin(), a.complex.end(), out.mutable_data());
  return std::move(out);
}

} // namespace

PYBIND11_MODULE(_featspace, m) {
  m.doc() = "featspace: simulation, subspace encoding, ADMM reconstruction and a dense-block network";
  m.attr("__version__") = "0.1.0";

  py::register_exception<InvalidParameter>(m, "InvalidParameter", PyExc_ValueError);
  py::register_exception<UndefinedMetric>(m, "UndefinedMetric", PyExc_ArithmeticError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);
  py::register_exception<StaleInput>(m, "StaleInput", PyExc_RuntimeError);

  // NUFFT
  m.def(
      "nufft_forward",
      [](int side, const CxVector &image, const RMatrix &points, int width) {
        return Nufft2d(side, points, KernelParams{width, 2}).forward(image);
      },
      py::arg("side"), py::arg("image"), py::arg("points"), py::arg("kernel_width") = 6,
      "Samples of a row-major side x side image at k-space points in [-0.5, 0.5).");
  m.def(
      "nufft_adjoint",
      [](int side, const CxVector &samples, const RMatrix &points, int width) {
        return Nufft2d(side, points, KernelParams{width, 2}).adjoint(samples);
      },
      py::arg("side"), py::arg("samples"), py::arg("points"), py::arg("kernel_width") = 6);
  m.def("direct_dft", [](int side, const CxVector &image, const RMatrix &points) {
    return direct_dft(side, image, points);
  });

  // Trajectory and encoding
  py::class_<encoding::Trajectory>(m, "Trajectory")
      .def_readonly("samples_per_spoke", &encoding::Trajectory::samples_per_spoke)
      .def_readonly("n_frames", &encoding::Trajectory::n_frames)
      .def_readonly("angle", &encoding::Trajectory::angle)
      .def_readonly("frame", &encoding::Trajectory::frame)
      .def_readonly("navigator", &encoding::Trajectory::navigator)
      .def_readonly("weights", &encoding::Trajectory::weights)
      .def_property_readonly("n_spokes", &encoding::Trajectory::n_spokes)
      .def("points", py::overload_cast<>(&encoding::Trajectory::points, py::const_));
  m.def(
      "golden_angle_trajectory",
      [](int n_spokes, int samples, int frames, int navigator_every, bool dcf) {
        auto t = encoding::make_trajectory(n_spokes, samples, frames, navigator_every);
        return dcf ? encoding::density_compensation(std::move(t)) : t;
      },
      py::arg("n_spokes"), py::arg("samples_per_spoke"), py::arg("n_frames"), py::arg("navigator_every") = 0,
      py::arg("density_compensation") = true);
  m.def("golden_angle", &encoding::golden_angle);
  m.def(
      "coil_maps", [](int side, int n_coils) { return encoding::make_coils(side, n_coils).maps; }, py::arg("side"),
      py::arg("n_coils"));
  m.def(
      "encode",
      [](const CxMatrix &u, const CxMatrix &phi, const CxMatrix &maps, const encoding::Trajectory &traj) {
        encoding::CoilSensitivities s;
        s.grid_size = static_cast<int>(std::lround(std::sqrt(static_cast<double>(maps.rows()))));
        s.maps = maps;
        return encoding::encode(u, phi, s, traj).samples;
      },
      py::arg("u"), py::arg("phi"), py::arg("coil_maps"), py::arg("trajectory"),
      "k-space samples (n_spokes * S) x n_coils of the factor u (M x L) with basis phi (L x N).");
  m.def(
      "backproject",
      [](const CxMatrix &samples, const CxMatrix &phi, const CxMatrix &maps, const encoding::Trajectory &traj,
         bool exact_adjoint) {
        encoding::CoilSensitivities s;
        s.grid_size = static_cast<int>(std::lround(std::sqrt(static_cast<double>(maps.rows()))));
        s.maps = maps;
        encoding::KSpaceData d;
        d.samples_per_spoke = traj.samples_per_spoke;
        d.samples = samples;
        return encoding::backproject(d, phi, s, traj,
                                     exact_adjoint ? encoding::BackprojectMode::exact_adjoint
                                                   : encoding::BackprojectMode::preconditioned);
      },
      py::arg("samples"), py::arg("phi"), py::arg("coil_maps"), py::arg("trajectory"),
      py::arg("exact_adjoint") = false);

  // Subspace
  m.def(
      "extract_basis", [](const CxMatrix &a, int rank, const py::object &axes) {
        return subspace::extract_basis(a, rank, axes_from(axes)).phi;
      },
      py::arg("source"), py::arg("rank"), py::arg("axes"),
      "Leading rank right singular vectors of the M x N source as an L x N basis. "
      "axes is N or (n_tau, n_cardiac, n_resp).");
  m.def("singular_values", &subspace::singular_values);
  m.def("project", [](const CxMatrix &a, const CxMatrix &phi) { return CxMatrix(a * phi.adjoint()); });
  m.def("to_real_channels", &subspace::to_real_channels);
  m.def("from_real_channels", &subspace::from_real_channels);
  m.def("subspace_angle", &subspace::subspace_angle);

  // Sparsity and reconstruction
  m.def("haar_forward", &iterative::sparsity_transform, py::arg("u"), py::arg("side"), py::arg("levels"));
  m.def("haar_adjoint", &iterative::sparsity_adjoint, py::arg("coefficients"), py::arg("side"), py::arg("levels"));
  m.def("soft_threshold", py::overload_cast<const CxMatrix &, double>(&iterative::soft_threshold));

  // Metrics
  m.def("nrmse", &eval::nrmse, py::arg("estimate"), py::arg("reference"));
  m.def("psnr", [](const CxMatrix &est, const CxMatrix &ref) {
    const auto p = eval::psnr(est, ref);
    return p.infinite ? std::numeric_limits<double>::infinity() : p.db;
  });
  m.def(
      "ssim", [](const RMatrix &est, const RMatrix &ref) { return eval::ssim(est, ref); }, py::arg("estimate"),
      py::arg("reference"));
  m.def(
      "fit_ir_curve",
      [](const std::vector<double> &tau, const std::vector<double> &signal) {
        const auto f = eval::fit_ir_curve(tau, signal);
        py::dict d;
        d["a"] = f.a;
        d["b"] = f.b;
        d["t1_star"] = f.t1_star;
        d["t1"] = f.t1;
        d["residual"] = f.residual;
        d["valid"] = f.valid;
        d["low_confidence"] = f.low_confidence;
        return d;
      },
      py::arg("tau_ms"), py::arg("signal"));
  m.def(
      "bland_altman",
      [](const std::vector<double> &a, const std::vector<double> &b) {
        const auto s = eval::bland_altman(a, b);
        py::dict d;
        d["n"] = s.n;
        d["bias"] = s.bias;
        d["sd"] = s.sd;
        d["loa_lower"] = s.loa_lower;
        d["loa_upper"] = s.loa_upper;
        d["p_value"] = s.p_defined ? py::cast(s.p_value) : py::none();
        d["pearson_r"] = s.r_defined ? py::cast(s.pearson_r) : py::none();
        return d;
      },
      py::arg("a"), py::arg("b"));

  // Files and pipeline
  m.def(
      "read_array", [](const std::filesystem::path &p) { return array_to_numpy(io::read_array(p)); },
      "Contents of a .fsa artifact as a numpy array.");
  m.def(
      "read_attributes", [](const std::filesystem::path &p) { return io::read_array(p).attrs; });
  m.def("stage_names", &fp::stage_names);
  m.def("stage_outputs", &fp::stage_outputs);
  m.def(
      "run_stage",
      [](const std::string &stage, const std::filesystem::path &config, const std::filesystem::path &out,
         const std::map<std::string, std::string> &overrides) {
        auto kv = io::KeyValueConfig::load(config);
        for (const auto &[k, v] : overrides) kv.set(k, v);
        fp::StageOptions opt;
        opt.config = fp::ExperimentConfig::from_kv(kv);
        opt.out = out;
        py::gil_scoped_release release;
        if (stage == "run-all") {
          fp::run_all(opt);
        } else {
          fp::run_stage(stage, opt);
        }
      },
      py::arg("stage"), py::arg("config"), py::arg("out"), py::arg("overrides") = std::map<std::string, std::string>{},
      "Runs one pipeline stage (or 'run-all') with a key = value config file.");
}
