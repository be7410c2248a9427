#pragma once

#include "featspace/core.hpp"
#include "featspace/encoding.hpp"
#include "featspace/io.hpp"
#include "featspace/iterative.hpp"
#include "featspace/network.hpp"
#include "featspace/phantom.hpp"
#include "featspace/subspace.hpp"

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace featspace::pipeline {

enum class BasisMode { oracle, navigator };
enum class LabelSource { ground_truth, admm };

struct ExperimentConfig {
  phantom::PhantomSpec phantom;
  phantom::PhantomRanges ranges;
  bool randomize_phantom = true;

  int n_spokes = 0; // 0 selects one spoke per frame
  int samples_per_spoke = 65;
  int navigator_every = 4;
  int n_coils = 4;
  double noise_sigma = 1.0;

  BasisMode basis_mode = BasisMode::oracle;
  int rank = 8;

  iterative::ReconConfig recon;
  network::NetworkConfig network;

  int corpus_size = 40;
  LabelSource label_source = LabelSource::ground_truth;
  int split_train = 8;
  int split_validation = 1;
  int split_test = 1;

  std::uint64_t seed = 1;

  static ExperimentConfig from_kv(const io::KeyValueConfig &kv);
  static ExperimentConfig load(const std::filesystem::path &path);
  [[nodiscard]] io::KeyValueConfig to_kv() const;
  [[nodiscard]] std::string canonical() const { return to_kv().canonical(); }
  [[nodiscard]] std::string hash() const { return io::sha256_hex(canonical()); }
  [[nodiscard]] int spokes() const { return n_spokes > 0 ? n_spokes : phantom.n_frames(); }
  // Rough peak memory of one pipeline run, dominated by the dense image sequence.
  [[nodiscard]] double memory_estimate_bytes() const;
  void validate() const;
};

std::string to_string(BasisMode mode);
BasisMode basis_mode_from_string(const std::string &s);

// splitmix64 of (seed, stream); distinct streams give independent seeds.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

// Phantom used by the single-instance stages.
phantom::PhantomSpec evaluation_phantom(const ExperimentConfig &cfg);
// Phantom number `index` of the training corpus.
phantom::PhantomSpec corpus_phantom(const ExperimentConfig &cfg, int index);

encoding::Trajectory make_trajectory(const ExperimentConfig &cfg);
encoding::CoilSensitivities make_coils(const ExperimentConfig &cfg);

// One simulated acquisition carried through to the network's input and label.
struct Instance {
  phantom::PhantomSpec spec;
  phantom::GroundTruth gt;
  encoding::KSpaceData d;
  subspace::TemporalBasis basis;
  CxMatrix u0;    // preconditioned backprojection
  CxMatrix label; // project(A, Phi)
};

subspace::TemporalBasis make_basis(const ExperimentConfig &cfg, const phantom::GroundTruth &gt,
                                   const encoding::KSpaceData &d, const encoding::Trajectory &traj);

Instance simulate_instance(const ExperimentConfig &cfg, const phantom::PhantomSpec &spec,
                           const encoding::Trajectory &traj, const encoding::CoilSensitivities &sens,
                           std::uint64_t noise_seed);
Instance simulate_corpus_instance(const ExperimentConfig &cfg, int index, const encoding::Trajectory &traj,
                                  const encoding::CoilSensitivities &sens);

// Training pairs for all corpus_size phantoms, in index order.
std::vector<network::TrainingPair> build_corpus(const ExperimentConfig &cfg,
                                                const std::function<void(int)> &progress = {});

network::DatasetSplit corpus_split(const ExperimentConfig &cfg);

// Artifact serialization.
void write_ground_truth(const std::filesystem::path &dir, const phantom::GroundTruth &gt);
CxMatrix read_image(const std::filesystem::path &path);
void write_trajectory(const std::filesystem::path &path, const encoding::Trajectory &traj);
encoding::Trajectory read_trajectory(const std::filesystem::path &path);
void write_coils(const std::filesystem::path &path, const encoding::CoilSensitivities &sens);
encoding::CoilSensitivities read_coils(const std::filesystem::path &path);
void write_kspace(const std::filesystem::path &path, const encoding::KSpaceData &d);
encoding::KSpaceData read_kspace(const std::filesystem::path &path);
void write_basis(const std::filesystem::path &path, const subspace::TemporalBasis &basis, const ExperimentConfig &cfg);
subspace::TemporalBasis read_basis(const std::filesystem::path &path);
void write_factor(const std::filesystem::path &path, const CxMatrix &u, int grid_size);
CxMatrix read_factor(const std::filesystem::path &path);
void write_model(const std::filesystem::path &path, const network::NetworkModel &model);
network::NetworkModel read_model(const std::filesystem::path &path);

// Exclusive marker file in an output directory, removed on destruction.
class DirectoryLock {
public:
  explicit DirectoryLock(const std::filesystem::path &dir);
  ~DirectoryLock();
  DirectoryLock(const DirectoryLock &) = delete;
  DirectoryLock &operator=(const DirectoryLock &) = delete;

private:
  std::filesystem::path path_;
};

struct StageOptions {
  ExperimentConfig config;
  std::filesystem::path out;
  // Diagnostic messages (progress, warnings).
  std::function<void(const std::string &)> log = [](const std::string &) {};
};

void run_phantom(const StageOptions &opt);
void run_acquire(const StageOptions &opt);
void run_basis(const StageOptions &opt);
void run_backproject(const StageOptions &opt);
void run_recon_admm(const StageOptions &opt);
void run_train(const StageOptions &opt);
void run_infer(const StageOptions &opt);
void run_eval(const StageOptions &opt);
void run_all(const StageOptions &opt);

// Names in pipeline order.
const std::vector<std::string> &stage_names();
void run_stage(const std::string &name, const StageOptions &opt);

// Files a stage writes besides its manifest. Timing reports are not listed.
std::vector<std::string> stage_outputs(const std::string &name);

} // namespace featspace::pipeline
