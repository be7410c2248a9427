#include "featspace/pipeline.hpp"

#include "featspace/metrics.hpp"

#include <json.hpp>

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <set>
#include <sstream>

namespace featspace::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const char *tissue_key(int label) {
  switch (label) {
  case phantom::kChestWall:
    return "chest_wall";
  case phantom::kMyocardium:
    return "myocardium";
  case phantom::kBloodPool:
    return "blood_pool";
  default:
    return "background";
  }
}

phantom::TissueRanges &ranges_for(phantom::PhantomRanges &r, int label) {
  switch (label) {
  case phantom::kChestWall:
    return r.chest_wall;
  case phantom::kMyocardium:
    return r.myocardium;
  default:
    return r.blood_pool;
  }
}

const std::vector<int> kTissueLabels{phantom::kChestWall, phantom::kMyocardium, phantom::kBloodPool};

std::string fmt(double v) { return io::format_double(v); }

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

} // namespace

std::string to_string(BasisMode mode) { return mode == BasisMode::oracle ? "oracle" : "navigator"; }

BasisMode basis_mode_from_string(const std::string &s) {
  if (s == "oracle") return BasisMode::oracle;
  if (s == "navigator") return BasisMode::navigator;
  throw InvalidParameter("basis mode must be 'oracle' or 'navigator', got '" + s + "'");
}

ExperimentConfig ExperimentConfig::from_kv(const io::KeyValueConfig &kv) {
  ExperimentConfig c;
  std::set<std::string> known;
  auto num = [&](const std::string &key, auto fallback) {
    known.insert(key);
    return kv.get(key, fallback);
  };
  auto text = [&](const std::string &key, const std::string &fallback) {
    known.insert(key);
    return kv.get(key, fallback);
  };

  auto &p = c.phantom;
  p.grid_size = num("grid_size", p.grid_size);
  p.axes.n_tau = num("n_tau", p.axes.n_tau);
  p.axes.n_cardiac = num("n_cardiac", p.axes.n_cardiac);
  p.axes.n_resp = num("n_resp", p.axes.n_resp);
  p.tau_first_ms = num("tau_first_ms", p.tau_first_ms);
  p.tau_spacing_ms = num("tau_spacing_ms", p.tau_spacing_ms);
  p.inversion_ratio = num("inversion_ratio", p.inversion_ratio);
  p.cardiac_amplitude = num("cardiac_amplitude", p.cardiac_amplitude);
  p.resp_amplitude = num("resp_amplitude", p.resp_amplitude);
  p.tissues = phantom::default_anatomy(p.grid_size);
  for (auto &t : p.tissues) {
    const std::string name = tissue_key(t.label);
    t.proton_density = num(name + "_pd", t.proton_density);
    t.t1_ms = num(name + "_t1_ms", t.t1_ms);
    auto &r = ranges_for(c.ranges, t.label);
    r.pd_min = num(name + "_pd_min", r.pd_min);
    r.pd_max = num(name + "_pd_max", r.pd_max);
    r.t1_min = num(name + "_t1_min", r.t1_min);
    r.t1_max = num(name + "_t1_max", r.t1_max);
  }
  c.ranges.geometry_jitter = num("geometry_jitter", c.ranges.geometry_jitter);
  c.randomize_phantom = num("randomize_phantom", c.randomize_phantom ? 1 : 0) != 0;

  c.n_spokes = num("n_spokes", c.n_spokes);
  c.samples_per_spoke = num("samples_per_spoke", c.samples_per_spoke);
  c.navigator_every = num("navigator_every", c.navigator_every);
  c.n_coils = num("n_coils", c.n_coils);
  c.noise_sigma = num("noise_sigma", c.noise_sigma);

  c.basis_mode = basis_mode_from_string(text("basis_mode", to_string(c.basis_mode)));
  c.rank = num("rank", c.rank);

  auto &r = c.recon;
  r.lambda = num("lambda", r.lambda);
  r.rho = num("rho", r.rho);
  r.rho_scale = num("rho_scale", r.rho_scale);
  r.n_admm = num("n_admm", r.n_admm);
  r.n_cg = num("n_cg", r.n_cg);
  r.cg_tol = num("cg_tol", r.cg_tol);
  r.kernel_width = num("kernel_width", r.kernel_width);
  r.wavelet_levels = num("wavelet_levels", r.wavelet_levels);

  auto &n = c.network;
  n.n_blocks = num("n_blocks", n.n_blocks);
  n.layers_per_block = num("layers_per_block", n.layers_per_block);
  n.growth_rate = num("growth_rate", n.growth_rate);
  known.insert("dilations");
  n.dilations = kv.get_ints("dilations", n.dilations);
  n.kernel_size = num("kernel_size", n.kernel_size);
  n.learning_rate = num("learning_rate", n.learning_rate);
  n.reg_l1 = num("reg_l1", n.reg_l1);
  n.reg_l2 = num("reg_l2", n.reg_l2);
  n.n_steps = num("n_steps", n.n_steps);
  n.batch_size = num("batch_size", n.batch_size);
  n.validate_every = num("validate_every", n.validate_every);

  c.corpus_size = num("corpus_size", c.corpus_size);
  const std::string label = text("label_source", "ground_truth");
  if (label == "ground_truth") {
    c.label_source = LabelSource::ground_truth;
  } else if (label == "admm") {
    c.label_source = LabelSource::admm;
  } else {
    throw InvalidParameter("label_source must be 'ground_truth' or 'admm', got '" + label + "'");
  }
  c.split_train = num("split_train", c.split_train);
  c.split_validation = num("split_validation", c.split_validation);
  c.split_test = num("split_test", c.split_test);

  c.seed = num("seed", c.seed);

  for (const auto &[key, value] : kv.values()) {
    if (!known.count(key)) throw InvalidParameter("unknown config key '" + key + "'");
  }
  c.network.in_channels = 2 * c.rank;
  c.network.seed = derive_seed(c.seed, 0x6e6574);
  c.phantom.seed = c.seed;
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path &path) { return from_kv(io::KeyValueConfig::load(path)); }

io::KeyValueConfig ExperimentConfig::to_kv() const {
  io::KeyValueConfig kv;
  auto put = [&](const std::string &key, double v) { kv.set(key, fmt(v)); };
  auto put_int = [&](const std::string &key, long long v) { kv.set(key, std::to_string(v)); };

  put_int("grid_size", phantom.grid_size);
  put_int("n_tau", phantom.axes.n_tau);
  put_int("n_cardiac", phantom.axes.n_cardiac);
  put_int("n_resp", phantom.axes.n_resp);
  put("tau_first_ms", phantom.tau_first_ms);
  put("tau_spacing_ms", phantom.tau_spacing_ms);
  put("inversion_ratio", phantom.inversion_ratio);
  put("cardiac_amplitude", phantom.cardiac_amplitude);
  put("resp_amplitude", phantom.resp_amplitude);
  phantom::PhantomRanges r = ranges;
  for (const auto &t : phantom.tissues) {
    const std::string name = tissue_key(t.label);
    put(name + "_pd", t.proton_density);
    put(name + "_t1_ms", t.t1_ms);
    const auto &tr = ranges_for(r, t.label);
    put(name + "_pd_min", tr.pd_min);
    put(name + "_pd_max", tr.pd_max);
    put(name + "_t1_min", tr.t1_min);
    put(name + "_t1_max", tr.t1_max);
  }
  put("geometry_jitter", ranges.geometry_jitter);
  put_int("randomize_phantom", randomize_phantom ? 1 : 0);

  put_int("n_spokes", n_spokes);
  put_int("samples_per_spoke", samples_per_spoke);
  put_int("navigator_every", navigator_every);
  put_int("n_coils", n_coils);
  put("noise_sigma", noise_sigma);

  kv.set("basis_mode", to_string(basis_mode));
  put_int("rank", rank);

  put("lambda", recon.lambda);
  put("rho", recon.rho);
  put("rho_scale", recon.rho_scale);
  put_int("n_admm", recon.n_admm);
  put_int("n_cg", recon.n_cg);
  put("cg_tol", recon.cg_tol);
  put_int("wavelet_levels", recon.wavelet_levels);
  put_int("kernel_width", recon.kernel_width);

  put_int("n_blocks", network.n_blocks);
  put_int("layers_per_block", network.layers_per_block);
  put_int("growth_rate", network.growth_rate);
  std::string dil;
  for (std::size_t i = 0; i < network.dilations.size(); ++i) dil += (i ? "-" : "") + std::to_string(network.dilations[i]);
  kv.set("dilations", dil);
  put_int("kernel_size", network.kernel_size);
  put("learning_rate", network.learning_rate);
  put("reg_l1", network.reg_l1);
  put("reg_l2", network.reg_l2);
  put_int("n_steps", network.n_steps);
  put_int("batch_size", network.batch_size);
  put_int("validate_every", network.validate_every);

  put_int("corpus_size", corpus_size);
  kv.set("label_source", label_source == LabelSource::ground_truth ? "ground_truth" : "admm");
  put_int("split_train", split_train);
  put_int("split_validation", split_validation);
  put_int("split_test", split_test);

  kv.set("seed", std::to_string(seed));
  return kv;
}

double ExperimentConfig::memory_estimate_bytes() const {
  const double m = static_cast<double>(phantom.grid_size) * phantom.grid_size;
  const double n = phantom.n_frames();
  const double samples = static_cast<double>(spokes()) * samples_per_spoke * n_coils;
  // Dense sequence plus one working copy, k-space, factors.
  return 2.0 * m * n * 16.0 + samples * 16.0 * 2.0 + 8.0 * m * rank * 16.0;
}

void ExperimentConfig::validate() const {
  phantom.validate();
  require(samples_per_spoke >= 1 && samples_per_spoke % 2 == 1, "samples_per_spoke must be odd");
  require(n_spokes >= 0, "n_spokes must be >= 0");
  require(navigator_every >= 0, "navigator_every must be >= 0");
  require(n_coils >= 1, "n_coils must be >= 1");
  require(noise_sigma >= 0, "noise_sigma must be >= 0");
  require(rank >= 1 && rank <= phantom.n_frames(), "rank must be in [1, number of frames]");
  require(basis_mode == BasisMode::oracle || navigator_every > 0, "navigator basis mode needs navigator_every > 0");
  recon.validate();
  require(phantom.grid_size % (1 << recon.wavelet_levels) == 0, "grid_size must be divisible by 2^wavelet_levels");
  network.validate();
  require(network.in_channels == 2 * rank, "network channels must equal 2 * rank");
  require(corpus_size >= 2, "corpus_size must be >= 2");
  require(split_train >= 1 && split_validation >= 0 && split_test >= 0, "split ratios must be non-negative");
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

phantom::PhantomSpec evaluation_phantom(const ExperimentConfig &cfg) {
  if (!cfg.randomize_phantom) {
    phantom::PhantomSpec spec = cfg.phantom;
    spec.seed = cfg.seed;
    return spec;
  }
  return phantom::randomize(cfg.phantom, cfg.ranges, cfg.seed);
}

phantom::PhantomSpec corpus_phantom(const ExperimentConfig &cfg, int index) {
  const std::uint64_t s = derive_seed(cfg.seed, 1000 + static_cast<std::uint64_t>(index));
  if (!cfg.randomize_phantom) {
    phantom::PhantomSpec spec = cfg.phantom;
    spec.seed = s;
    return spec;
  }
  return phantom::randomize(cfg.phantom, cfg.ranges, s);
}

encoding::Trajectory make_trajectory(const ExperimentConfig &cfg) {
  return encoding::density_compensation(encoding::make_trajectory(cfg.spokes(), cfg.samples_per_spoke,
                                                                  cfg.phantom.n_frames(), cfg.navigator_every));
}

encoding::CoilSensitivities make_coils(const ExperimentConfig &cfg) {
  return encoding::make_coils(cfg.phantom.grid_size, cfg.n_coils);
}

subspace::TemporalBasis make_basis(const ExperimentConfig &cfg, const phantom::GroundTruth &gt,
                                   const encoding::KSpaceData &d, const encoding::Trajectory &traj) {
  if (cfg.basis_mode == BasisMode::oracle) return subspace::extract_basis(gt.image, cfg.rank, gt.axes);
  return subspace::extract_basis(subspace::navigator_casorati(d, traj, gt.axes), cfg.rank, gt.axes);
}

Instance simulate_instance(const ExperimentConfig &cfg, const phantom::PhantomSpec &spec,
                           const encoding::Trajectory &traj, const encoding::CoilSensitivities &sens,
                           std::uint64_t noise_seed) {
  Instance inst;
  inst.spec = spec;
  inst.gt = phantom::generate(spec);
  inst.d = encoding::simulate_acquisition(inst.gt, sens, traj, cfg.noise_sigma, noise_seed);
  inst.basis = make_basis(cfg, inst.gt, inst.d, traj);
  inst.u0 = encoding::backproject(inst.d, inst.basis.phi, sens, traj, encoding::BackprojectMode::preconditioned);
  inst.label = subspace::project(inst.gt.image, inst.basis);
  return inst;
}

Instance simulate_corpus_instance(const ExperimentConfig &cfg, int index, const encoding::Trajectory &traj,
                                  const encoding::CoilSensitivities &sens) {
  const phantom::PhantomSpec spec = corpus_phantom(cfg, index);
  return simulate_instance(cfg, spec, traj, sens, derive_seed(spec.seed, 7));
}

std::vector<network::TrainingPair> build_corpus(const ExperimentConfig &cfg, const std::function<void(int)> &progress) {
  cfg.validate();
  const auto traj = make_trajectory(cfg);
  const auto sens = make_coils(cfg);
  std::vector<network::TrainingPair> corpus;
  corpus.reserve(cfg.corpus_size);
  for (int i = 0; i < cfg.corpus_size; ++i) {
    Instance inst = simulate_corpus_instance(cfg, i, traj, sens);
    CxMatrix label = std::move(inst.label);
    if (cfg.label_source == LabelSource::admm) {
      label = iterative::admm_reconstruct(inst.d, inst.basis.phi, sens, traj, cfg.recon).u;
    }
    corpus.push_back({subspace::to_real_channels(inst.u0), subspace::to_real_channels(label)});
    if (progress) progress(i);
  }
  return corpus;
}

network::DatasetSplit corpus_split(const ExperimentConfig &cfg) {
  return network::split_dataset(cfg.corpus_size, derive_seed(cfg.seed, 0x73706c6974), cfg.split_train,
                                cfg.split_validation, cfg.split_test);
}

// ---------------------------------------------------------------------------
// Artifact files

namespace {

std::map<std::string, double> axes_attrs(int grid_size, const TimeAxes &axes) {
  return {{"grid_size", grid_size},
          {"n_tau", axes.n_tau},
          {"n_cardiac", axes.n_cardiac},
          {"n_resp", axes.n_resp}};
}

TimeAxes axes_from(const io::ArrayFile &a) {
  TimeAxes axes{static_cast<int>(a.attr("n_tau")), static_cast<int>(a.attr("n_cardiac")),
                static_cast<int>(a.attr("n_resp"))};
  axes.validate();
  return axes;
}

RMatrix as_grid(const RVector &v, int side) {
  // Row-major side x side grid stored as a [side, side] array.
  RMatrix g(side, side);
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) g(y, x) = v[y * side + x];
  return g;
}

RVector from_grid(const RMatrix &g) {
  const int side = static_cast<int>(g.rows());
  RVector v(g.size());
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) v[y * side + x] = g(y, x);
  return v;
}

} // namespace

void write_ground_truth(const fs::path &dir, const phantom::GroundTruth &gt) {
  auto attrs = axes_attrs(gt.grid_size, gt.axes);
  if (!gt.tau_ms.empty()) {
    attrs["tau_first_ms"] = gt.tau_ms.front();
    attrs["tau_spacing_ms"] = gt.tau_ms.size() > 1 ? gt.tau_ms[1] - gt.tau_ms[0] : 0.0;
  }
  io::write_array(dir / "ground_truth.fsa", io::from_matrix(gt.image, attrs));
  io::write_array(dir / "t1_map.fsa", io::from_matrix(as_grid(gt.t1_map, gt.grid_size), {{"grid_size", gt.grid_size}}));
  io::write_array(dir / "mask.fsa",
                  io::from_matrix(as_grid(gt.tissue_mask.cast<double>(), gt.grid_size), {{"grid_size", gt.grid_size}}));
}

CxMatrix read_image(const fs::path &path) { return io::to_complex_matrix(io::read_array(path)); }

void write_trajectory(const fs::path &path, const encoding::Trajectory &traj) {
  const int S = traj.samples_per_spoke;
  RMatrix m(traj.n_spokes(), 3 + S);
  for (int n = 0; n < traj.n_spokes(); ++n) {
    m(n, 0) = traj.angle[n];
    m(n, 1) = traj.frame[n];
    m(n, 2) = traj.navigator[n];
    for (int s = 0; s < S; ++s) {
      m(n, 3 + s) = traj.weights.empty() ? 0.0 : traj.weights[static_cast<std::size_t>(n) * S + s];
    }
  }
  io::write_array(path, io::from_matrix(m, {{"samples_per_spoke", S},
                                            {"n_frames", traj.n_frames},
                                            {"n_spokes", traj.n_spokes()},
                                            {"has_weights", traj.weights.empty() ? 0.0 : 1.0}}));
}

encoding::Trajectory read_trajectory(const fs::path &path) {
  const auto a = io::read_array(path);
  const RMatrix m = io::to_real_matrix(a);
  encoding::Trajectory traj;
  traj.samples_per_spoke = static_cast<int>(a.attr("samples_per_spoke"));
  traj.n_frames = static_cast<int>(a.attr("n_frames"));
  const int S = traj.samples_per_spoke;
  if (m.cols() != 3 + S) throw IoError("trajectory file has inconsistent width: " + path.string());
  const bool has_weights = a.attr("has_weights") != 0.0;
  for (Eigen::Index n = 0; n < m.rows(); ++n) {
    traj.angle.push_back(m(n, 0));
    traj.frame.push_back(static_cast<int>(m(n, 1)));
    traj.navigator.push_back(static_cast<std::uint8_t>(m(n, 2)));
    if (has_weights)
      for (int s = 0; s < S; ++s) traj.weights.push_back(m(n, 3 + s));
  }
  traj.validate();
  return traj;
}

void write_coils(const fs::path &path, const encoding::CoilSensitivities &sens) {
  io::write_array(path, io::from_matrix(sens.maps, {{"grid_size", sens.grid_size}, {"n_coils", sens.n_coils()}}));
}

encoding::CoilSensitivities read_coils(const fs::path &path) {
  const auto a = io::read_array(path);
  return {static_cast<int>(a.attr("grid_size")), io::to_complex_matrix(a)};
}

void write_kspace(const fs::path &path, const encoding::KSpaceData &d) {
  const auto spokes = d.samples.rows() / std::max(1, d.samples_per_spoke);
  io::write_array(path, io::from_matrix(d.samples, {{"samples_per_spoke", d.samples_per_spoke},
                                                    {"n_spokes", static_cast<double>(spokes)},
                                                    {"n_coils", d.n_coils()}}));
}

encoding::KSpaceData read_kspace(const fs::path &path) {
  const auto a = io::read_array(path);
  return {static_cast<int>(a.attr("samples_per_spoke")), io::to_complex_matrix(a)};
}

void write_basis(const fs::path &path, const subspace::TemporalBasis &basis, const ExperimentConfig &cfg) {
  auto attrs = axes_attrs(cfg.phantom.grid_size, basis.axes);
  attrs["L"] = basis.rank();
  attrs["N"] = basis.n_frames();
  attrs["tau_first_ms"] = cfg.phantom.tau_first_ms;
  attrs["tau_spacing_ms"] = cfg.phantom.tau_spacing_ms;
  attrs["navigator_mode"] = cfg.basis_mode == BasisMode::navigator ? 1.0 : 0.0;
  io::write_array(path, io::from_matrix(basis.phi, attrs));
}

subspace::TemporalBasis read_basis(const fs::path &path) {
  const auto a = io::read_array(path);
  subspace::TemporalBasis basis{io::to_complex_matrix(a), axes_from(a)};
  if (basis.axes.n_frames() != basis.n_frames()) throw IoError("basis time metadata does not match N: " + path.string());
  return basis;
}

void write_factor(const fs::path &path, const CxMatrix &u, int grid_size) {
  io::write_array(path, io::from_matrix(u, {{"grid_size", grid_size}, {"L", static_cast<double>(u.cols())}}));
}

CxMatrix read_factor(const fs::path &path) { return io::to_complex_matrix(io::read_array(path)); }

void write_model(const fs::path &path, const network::NetworkModel &model) {
  const auto &c = model.config;
  std::map<std::string, double> attrs{{"in_channels", c.in_channels},
                                      {"n_blocks", c.n_blocks},
                                      {"layers_per_block", c.layers_per_block},
                                      {"growth_rate", c.growth_rate},
                                      {"kernel_size", c.kernel_size},
                                      {"learning_rate", c.learning_rate},
                                      {"reg_l1", c.reg_l1},
                                      {"reg_l2", c.reg_l2},
                                      {"n_steps", c.n_steps},
                                      {"batch_size", c.batch_size},
                                      {"validate_every", c.validate_every},
                                      {"seed_hi", static_cast<double>(c.seed >> 32)},
                                      {"seed_lo", static_cast<double>(c.seed & 0xffffffffULL)}};
  for (std::size_t i = 0; i < c.dilations.size(); ++i) attrs["dilation_" + std::to_string(i)] = c.dilations[i];
  io::ArrayFile a;
  a.dtype = io::DType::real64;
  a.attrs = std::move(attrs);
  for (const auto &layer : model.layers) {
    a.real.insert(a.real.end(), layer.weight.begin(), layer.weight.end());
    a.real.insert(a.real.end(), layer.bias.begin(), layer.bias.end());
  }
  a.dims = {a.real.size()};
  io::write_array(path, a);
}

network::NetworkModel read_model(const fs::path &path) {
  const auto a = io::read_array(path);
  if (a.dtype != io::DType::real64 || a.dims.size() != 1) throw IoError("not a model file: " + path.string());
  network::NetworkConfig c;
  auto i = [&](const char *k) { return static_cast<int>(a.attr(k)); };
  c.in_channels = i("in_channels");
  c.n_blocks = i("n_blocks");
  c.layers_per_block = i("layers_per_block");
  c.growth_rate = i("growth_rate");
  c.kernel_size = i("kernel_size");
  c.learning_rate = a.attr("learning_rate");
  c.reg_l1 = a.attr("reg_l1");
  c.reg_l2 = a.attr("reg_l2");
  c.n_steps = i("n_steps");
  c.batch_size = i("batch_size");
  c.validate_every = i("validate_every");
  c.seed = (static_cast<std::uint64_t>(a.attr("seed_hi")) << 32) | static_cast<std::uint64_t>(a.attr("seed_lo"));
  c.dilations.clear();
  for (int k = 0; k < c.layers_per_block; ++k) c.dilations.push_back(i(("dilation_" + std::to_string(k)).c_str()));
  network::NetworkModel model = network::build_mdcn(c);
  if (model.parameter_count() != a.real.size()) throw IoError("model weight count does not match its architecture");
  std::size_t pos = 0;
  for (auto &layer : model.layers) {
    std::copy_n(a.real.begin() + pos, layer.weight.size(), layer.weight.begin());
    pos += layer.weight.size();
    std::copy_n(a.real.begin() + pos, layer.bias.size(), layer.bias.begin());
    pos += layer.bias.size();
  }
  return model;
}

// ---------------------------------------------------------------------------
// Locking, manifests, timing

DirectoryLock::DirectoryLock(const fs::path &dir) : path_(dir / ".featspace.lock") {
  const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) {
    throw IoError("output directory is in use by another stage (remove " + path_.string() + " if stale)");
  }
  const std::string pid = std::to_string(::getpid()) + "\n";
  [[maybe_unused]] const auto n = ::write(fd, pid.data(), pid.size());
  ::close(fd);
}

DirectoryLock::~DirectoryLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

namespace {

fs::path manifest_path(const fs::path &out, const std::string &stage) { return out / (stage + ".manifest.json"); }

// Verifies upstream manifests against the current config and the files on
// disk; returns file -> hash of everything they produced.
std::map<std::string, std::string> check_upstream(const StageOptions &opt, const std::vector<std::string> &stages) {
  std::map<std::string, std::string> inputs;
  const std::string config_hash = opt.config.hash();
  for (const auto &stage : stages) {
    const fs::path mp = manifest_path(opt.out, stage);
    if (!fs::exists(mp)) throw StaleInput("missing " + mp.string() + "; run the '" + stage + "' stage first");
    json m;
    try {
      m = json::parse(io::read_text(mp));
    } catch (const json::exception &e) {
      throw StaleInput("unreadable manifest " + mp.string() + ": " + e.what());
    }
    if (m.value("config_sha256", "") != config_hash) {
      throw StaleInput("stage '" + stage + "' was produced with a different configuration; re-run it");
    }
    for (const auto &[file, hash] : m.at("outputs").items()) {
      const fs::path p = opt.out / file;
      if (!fs::exists(p)) throw StaleInput("upstream artifact missing: " + p.string());
      if (io::sha256_file(p) != hash.get<std::string>()) {
        throw StaleInput("upstream artifact " + p.string() + " does not match its manifest; re-run '" + stage + "'");
      }
      inputs[file] = hash.get<std::string>();
    }
  }
  return inputs;
}

void write_manifest(const StageOptions &opt, const std::string &stage, const std::map<std::string, std::string> &inputs,
                    const std::map<std::string, std::string> &extra = {}) {
  json m;
  m["stage"] = stage;
  m["seed"] = std::to_string(opt.config.seed);
  m["config_sha256"] = opt.config.hash();
  m["inputs"] = inputs;
  std::map<std::string, std::string> outputs;
  for (const auto &file : stage_outputs(stage)) outputs[file] = io::sha256_file(opt.out / file);
  m["outputs"] = outputs;
  for (const auto &[k, v] : extra) m[k] = v;
  io::write_text(manifest_path(opt.out, stage), m.dump(2) + "\n");
}

// timing.csv keeps one block of rows per stage; re-running a stage replaces it.
void record_timing(const StageOptions &opt, const std::string &stage,
                   const std::vector<std::pair<std::string, double>> &rows) {
  const fs::path p = opt.out / "timing.csv";
  std::vector<std::string> kept;
  if (fs::exists(p)) {
    std::istringstream in(io::read_text(p));
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      if (line.rfind(stage + ",", 0) != 0 && !line.empty()) kept.push_back(line);
    }
  }
  io::CsvWriter csv({"stage", "method", "seconds"});
  for (const auto &line : kept) {
    const auto a = line.find(',');
    const auto b = line.find(',', a + 1);
    csv.row({line.substr(0, a), line.substr(a + 1, b - a - 1), line.substr(b + 1)});
  }
  for (const auto &[method, s] : rows) csv.row({stage, method, fmt(s)});
  csv.save(p);
}

phantom::GroundTruth load_ground_truth(const StageOptions &opt) {
  const auto a = io::read_array(opt.out / "ground_truth.fsa");
  phantom::GroundTruth gt;
  gt.grid_size = static_cast<int>(a.attr("grid_size"));
  gt.axes = axes_from(a);
  gt.image = io::to_complex_matrix(a);
  gt.t1_map = from_grid(io::to_real_matrix(io::read_array(opt.out / "t1_map.fsa")));
  gt.tissue_mask = from_grid(io::to_real_matrix(io::read_array(opt.out / "mask.fsa"))).cast<int>();
  const phantom::PhantomSpec spec = evaluation_phantom(opt.config);
  gt.tau_ms = spec.tau_values();
  return gt;
}

std::string describe(const phantom::PhantomSpec &spec) {
  std::ostringstream s;
  s << "grid=" << spec.grid_size << " axes=" << spec.axes.n_tau << "," << spec.axes.n_cardiac << ","
    << spec.axes.n_resp << " tau=" << fmt(spec.tau_first_ms) << "+" << fmt(spec.tau_spacing_ms)
    << " ratio=" << fmt(spec.inversion_ratio) << " motion=" << fmt(spec.cardiac_amplitude) << ","
    << fmt(spec.resp_amplitude) << " seed=" << spec.seed << "\n";
  for (const auto &t : spec.tissues) {
    s << t.label << ":" << fmt(t.shape.cx) << "," << fmt(t.shape.cy) << "," << fmt(t.shape.rx) << ","
      << fmt(t.shape.ry) << " pd=" << fmt(t.proton_density) << " t1=" << fmt(t.t1_ms) << "\n";
  }
  return s.str();
}

// ---------------------------------------------------------------------------
// Stages (caller holds the directory lock)

void do_phantom(const StageOptions &opt) {
  const auto t0 = std::chrono::steady_clock::now();
  const phantom::PhantomSpec spec = evaluation_phantom(opt.config);
  const phantom::GroundTruth gt = phantom::generate(spec);
  write_ground_truth(opt.out, gt);
  record_timing(opt, "phantom", {{"phantom", seconds_since(t0)}});
  write_manifest(opt, "phantom", {}, {{"phantom_spec_sha256", io::sha256_hex(describe(spec))}});
}

void do_acquire(const StageOptions &opt) {
  const auto inputs = check_upstream(opt, {"phantom"});
  const auto t0 = std::chrono::steady_clock::now();
  const auto gt = load_ground_truth(opt);
  const auto traj = make_trajectory(opt.config);
  const auto sens = make_coils(opt.config);
  const auto spec = evaluation_phantom(opt.config);
  const auto d = encoding::simulate_acquisition(gt, sens, traj, opt.config.noise_sigma, derive_seed(spec.seed, 7));
  write_trajectory(opt.out / "trajectory.fsa", traj);
  write_coils(opt.out / "coils.fsa", sens);
  write_kspace(opt.out / "kspace.fsa", d);
  record_timing(opt, "acquire", {{"acquire", seconds_since(t0)}});
  write_manifest(opt, "acquire", inputs);
}

void do_basis(const StageOptions &opt) {
  const auto inputs = check_upstream(opt, {"phantom", "acquire"});
  const auto t0 = std::chrono::steady_clock::now();
  const auto gt = load_ground_truth(opt);
  const auto traj = read_trajectory(opt.out / "trajectory.fsa");
  const auto d = read_kspace(opt.out / "kspace.fsa");
  const auto basis = make_basis(opt.config, gt, d, traj);
  write_basis(opt.out / "phi.fsa", basis, opt.config);
  const double seconds = seconds_since(t0);

  // Agreement with the basis of the full ground-truth sequence.
  const auto oracle = opt.config.basis_mode == BasisMode::oracle
                          ? basis
                          : subspace::extract_basis(gt.image, opt.config.rank, gt.axes);
  io::CsvWriter report({"mode", "rank", "n_frames", "subspace_angle_to_oracle_rad"});
  report.row({to_string(opt.config.basis_mode), std::to_string(basis.rank()), std::to_string(basis.n_frames()),
              fmt(subspace::subspace_angle(basis.phi, oracle.phi))});
  report.save(opt.out / "basis_report.csv");
  record_timing(opt, "basis", {{to_string(opt.config.basis_mode), seconds}});
  write_manifest(opt, "basis", inputs);
}

void do_backproject(const StageOptions &opt) {
  const auto inputs = check_upstream(opt, {"acquire", "basis"});
  const auto traj = read_trajectory(opt.out / "trajectory.fsa");
  const auto sens = read_coils(opt.out / "coils.fsa");
  const auto d = read_kspace(opt.out / "kspace.fsa");
  const auto basis = read_basis(opt.out / "phi.fsa");
  const auto t0 = std::chrono::steady_clock::now();
  const CxMatrix u0 = encoding::backproject(d, basis.phi, sens, traj, encoding::BackprojectMode::preconditioned);
  const double seconds = seconds_since(t0);
  write_factor(opt.out / "u0.fsa", u0, sens.grid_size);
  record_timing(opt, "backproject", {{"backprojection", seconds}});
  write_manifest(opt, "backproject", inputs);
}

void write_trace(const StageOptions &opt, const std::vector<iterative::TraceRow> &trace) {
  io::CsvWriter csv({"iteration", "data_term", "l1_term", "total"});
  io::CsvWriter timing({"iteration", "seconds"});
  for (const auto &r : trace) {
    csv.row({std::to_string(r.iteration), fmt(r.data_term), fmt(r.l1_term), fmt(r.total)});
    timing.row({std::to_string(r.iteration), fmt(r.seconds)});
  }
  csv.save(opt.out / "admm_trace.csv");
  timing.save(opt.out / "admm_trace_timing.csv");
}

void do_recon_admm(const StageOptions &opt) {
  const auto inputs = check_upstream(opt, {"acquire", "basis"});
  const auto traj = read_trajectory(opt.out / "trajectory.fsa");
  const auto sens = read_coils(opt.out / "coils.fsa");
  const auto d = read_kspace(opt.out / "kspace.fsa");
  const auto basis = read_basis(opt.out / "phi.fsa");
  const auto t0 = std::chrono::steady_clock::now();
  iterative::AdmmResult result;
  try {
    result = iterative::admm_reconstruct(d, basis.phi, sens, traj, opt.config.recon);
  } catch (const iterative::SolverFailure &e) {
    write_trace(opt, e.trace);
    throw;
  }
  const double seconds = seconds_since(t0);
  write_factor(opt.out / "u_admm.fsa", result.u, sens.grid_size);
  write_trace(opt, result.trace);
  io::CsvWriter summary({"lambda", "rho", "n_admm", "n_cg", "wavelet_levels"});
  summary.row({fmt(result.lambda), fmt(result.rho), std::to_string(opt.config.recon.n_admm),
               std::to_string(opt.config.recon.n_cg), std::to_string(opt.config.recon.wavelet_levels)});
  summary.save(opt.out / "admm_summary.csv");
  record_timing(opt, "recon-admm", {{"admm", seconds}});
  write_manifest(opt, "recon-admm", inputs);
}

void do_train(const StageOptions &opt) {
  const auto &cfg = opt.config;
  const auto t0 = std::chrono::steady_clock::now();
  opt.log("simulating " + std::to_string(cfg.corpus_size) + " phantoms");
  const auto corpus = build_corpus(cfg);
  const double corpus_seconds = seconds_since(t0);
  const auto split = corpus_split(cfg);
  opt.log("training on " + std::to_string(split.train.size()) + " instances, validating on " +
          std::to_string(split.validation.size()));
  const auto t1 = std::chrono::steady_clock::now();
  const auto result = network::train(corpus, split.train, split.validation, cfg.phantom.grid_size, cfg.network);
  const double train_seconds = seconds_since(t1);

  write_model(opt.out / "model.fsa", result.model);
  io::CsvWriter history({"step", "train_loss", "validation_loss"});
  for (const auto &h : result.history) {
    history.row({std::to_string(h.step), fmt(h.train_loss), fmt(h.validation_loss)});
  }
  history.save(opt.out / "history.csv");

  io::CsvWriter held({"corpus_index", "nrmse_backprojection", "nrmse_network"});
  double infer_seconds = 0;
  for (int id : split.test) {
    const CxMatrix u0 = subspace::from_real_channels(corpus[id].input);
    const CxMatrix label = subspace::from_real_channels(corpus[id].label);
    const auto r = network::infer(result.model, u0, cfg.phantom.grid_size);
    infer_seconds += r.seconds;
    held.row({std::to_string(id), fmt(eval::nrmse(u0, label)), fmt(eval::nrmse(r.u, label))});
  }
  held.save(opt.out / "heldout.csv");
  record_timing(opt, "train", {{"corpus", corpus_seconds}, {"training", train_seconds}, {"heldout_inference", infer_seconds}});
  write_manifest(opt, "train", {}, {{"best_step", std::to_string(result.best_step)}});
}

void do_infer(const StageOptions &opt) {
  const auto inputs = check_upstream(opt, {"backproject", "train"});
  const auto model = read_model(opt.out / "model.fsa");
  const CxMatrix u0 = read_factor(opt.out / "u0.fsa");
  const auto r = network::infer(model, u0, opt.config.phantom.grid_size);
  write_factor(opt.out / "u_network.fsa", r.u, opt.config.phantom.grid_size);
  record_timing(opt, "infer", {{"network", r.seconds}});
  write_manifest(opt, "infer", inputs);
}

eval::T1Map ground_truth_t1(const phantom::GroundTruth &gt) {
  eval::T1Map m;
  m.t1 = gt.t1_map;
  m.residual = RVector::Zero(gt.t1_map.size());
  m.valid.resize(gt.t1_map.size());
  m.low_confidence.assign(gt.t1_map.size(), 0);
  for (Eigen::Index v = 0; v < gt.t1_map.size(); ++v) m.valid[v] = gt.tissue_mask[v] != 0 && gt.t1_map[v] > 0;
  return m;
}

std::vector<std::string> agreement_cells(const std::string &name, const eval::AgreementStats &s) {
  return {name,
          std::to_string(s.n),
          fmt(s.bias),
          fmt(s.sd),
          fmt(s.loa_lower),
          fmt(s.loa_upper),
          s.p_defined ? fmt(s.p_value) : "undefined",
          s.r_defined ? fmt(s.pearson_r) : "undefined"};
}

void do_eval(const StageOptions &opt) {
  const auto inputs = check_upstream(opt, {"phantom", "basis", "backproject", "recon-admm", "infer"});
  const auto t0 = std::chrono::steady_clock::now();
  const auto gt = load_ground_truth(opt);
  const auto basis = read_basis(opt.out / "phi.fsa");
  const auto spec = evaluation_phantom(opt.config);
  const int side = gt.grid_size;
  const CxMatrix label = subspace::project(gt.image, basis);

  const std::vector<std::pair<std::string, CxMatrix>> methods{
      {"backprojection", read_factor(opt.out / "u0.fsa")},
      {"admm", read_factor(opt.out / "u_admm.fsa")},
      {"network", read_factor(opt.out / "u_network.fsa")}};

  const double null_ms = eval::blood_null_ms(spec);
  const auto bright = eval::select_contrast_frames(gt.axes, gt.tau_ms, eval::Contrast::bright_blood, null_ms, 0);
  const auto dark = eval::select_contrast_frames(gt.axes, gt.tau_ms, eval::Contrast::dark_blood, null_ms, 0);
  auto columns = [&](const std::vector<int> &frames) {
    CxMatrix m(gt.image.rows(), static_cast<Eigen::Index>(frames.size()));
    for (std::size_t i = 0; i < frames.size(); ++i) m.col(i) = gt.image.col(frames[i]);
    return m;
  };
  const CxMatrix ref_bright = columns(bright);
  const CxMatrix ref_dark = columns(dark);

  io::CsvWriter metrics({"method", "nrmse_factor_l2rel", "bright_nrmse_l2rel", "bright_psnr_db_peak_maxref",
                         "bright_ssim_gauss11_sigma1.5", "dark_nrmse_l2rel", "dark_psnr_db_peak_maxref",
                         "dark_ssim_gauss11_sigma1.5", "t1_chest_wall_median_ms", "t1_myocardium_median_ms",
                         "t1_blood_pool_median_ms"});
  const IVector &labels = gt.tissue_mask;
  std::map<std::string, eval::T1Map> maps;
  auto psnr_cell = [](const eval::Psnr &p) { return p.infinite ? std::string("inf") : fmt(p.db); };
  for (const auto &[name, u] : methods) {
    const auto mb = eval::image_metrics(subspace::render_frames(u, basis, bright), ref_bright, side);
    const auto md = eval::image_metrics(subspace::render_frames(u, basis, dark), ref_dark, side);
    auto t1 = eval::fit_t1(u, basis, labels, gt.tau_ms, 0, 0);
    const auto med = eval::region_medians(t1, labels, phantom::kBloodPool);
    metrics.row({name, fmt(eval::nrmse(u, label)), fmt(mb.nrmse), psnr_cell(mb.psnr), fmt(mb.ssim), fmt(md.nrmse),
                 psnr_cell(md.psnr), fmt(md.ssim), fmt(med[phantom::kChestWall]), fmt(med[phantom::kMyocardium]),
                 fmt(med[phantom::kBloodPool])});
    maps.emplace(name, std::move(t1));
  }
  metrics.save(opt.out / "metrics.csv");
  maps.emplace("ground_truth", ground_truth_t1(gt));

  for (const auto &[name, map] : maps) {
    RVector shown = map.t1;
    for (Eigen::Index v = 0; v < shown.size(); ++v)
      if (!map.valid[v]) shown[v] = 0.0;
    io::write_array(opt.out / ("t1_" + name + ".fsa"), io::from_matrix(as_grid(shown, side), {{"grid_size", side}}));
    io::write_pgm(opt.out / ("t1_" + name + ".pgm"), shown, side, side, 0.0, 2000.0);
  }

  io::CsvWriter ba({"comparison_b_minus_a", "n", "bias_ms", "sd_ms", "loa_lower_ms", "loa_upper_ms", "p_value",
                    "pearson_r"});
  const std::vector<int> roi{phantom::kMyocardium};
  const std::vector<std::pair<std::string, std::string>> pairs{
      {"admm", "network"}, {"ground_truth", "admm"}, {"ground_truth", "network"}};
  for (const auto &[a, b] : pairs) {
    ba.row(agreement_cells(b + "_vs_" + a, eval::bland_altman(maps.at(a), maps.at(b), labels, roi)));
  }
  ba.save(opt.out / "bland_altman.csv");
  record_timing(opt, "eval", {{"eval", seconds_since(t0)}});
  write_manifest(opt, "eval", inputs);
}

using StageFn = void (*)(const StageOptions &);

const std::map<std::string, StageFn> &stage_table() {
  static const std::map<std::string, StageFn> table{
      {"phantom", do_phantom},       {"acquire", do_acquire},         {"basis", do_basis},
      {"backproject", do_backproject}, {"recon-admm", do_recon_admm}, {"train", do_train},
      {"infer", do_infer},           {"eval", do_eval}};
  return table;
}

void locked(const StageOptions &opt, const std::vector<std::string> &stages) {
  opt.config.validate();
  fs::create_directories(opt.out);
  DirectoryLock lock(opt.out);
  for (const auto &s : stages) {
    opt.log("stage " + s);
    stage_table().at(s)(opt);
  }
}

} // namespace

const std::vector<std::string> &stage_names() {
  static const std::vector<std::string> names{"phantom", "acquire",    "basis", "backproject",
                                              "recon-admm", "train", "infer", "eval"};
  return names;
}

std::vector<std::string> stage_outputs(const std::string &name) {
  static const std::map<std::string, std::vector<std::string>> outputs{
      {"phantom", {"ground_truth.fsa", "t1_map.fsa", "mask.fsa"}},
      {"acquire", {"trajectory.fsa", "coils.fsa", "kspace.fsa"}},
      {"basis", {"phi.fsa", "basis_report.csv"}},
      {"backproject", {"u0.fsa"}},
      {"recon-admm", {"u_admm.fsa", "admm_trace.csv", "admm_summary.csv"}},
      {"train", {"model.fsa", "history.csv", "heldout.csv"}},
      {"infer", {"u_network.fsa"}},
      {"eval",
       {"metrics.csv", "bland_altman.csv", "t1_admm.fsa", "t1_admm.pgm", "t1_backprojection.fsa",
        "t1_backprojection.pgm", "t1_ground_truth.fsa", "t1_ground_truth.pgm", "t1_network.fsa", "t1_network.pgm"}}};
  const auto it = outputs.find(name);
  if (it == outputs.end()) throw InvalidParameter("unknown stage '" + name + "'");
  return it->second;
}

void run_stage(const std::string &name, const StageOptions &opt) {
  if (!stage_table().count(name)) throw InvalidParameter("unknown stage '" + name + "'");
  locked(opt, {name});
}

void run_phantom(const StageOptions &opt) { run_stage("phantom", opt); }
void run_acquire(const StageOptions &opt) { run_stage("acquire", opt); }
void run_basis(const StageOptions &opt) { run_stage("basis", opt); }
void run_backproject(const StageOptions &opt) { run_stage("backproject", opt); }
void run_recon_admm(const StageOptions &opt) { run_stage("recon-admm", opt); }
void run_train(const StageOptions &opt) { run_stage("train", opt); }
void run_infer(const StageOptions &opt) { run_stage("infer", opt); }
void run_eval(const StageOptions &opt) { run_stage("eval", opt); }
void run_all(const StageOptions &opt) { locked(opt, stage_names()); }

} // namespace featspace::pipeline
