#pragma once

#include "featspace/core.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace featspace::network {

struct NetworkConfig {
  int in_channels = 16; // 2L
  int n_blocks = 2;
  int layers_per_block = 4;
  int growth_rate = 8;
  std::vector<int> dilations{1, 4, 8, 1};
  int kernel_size = 3;
  double learning_rate = 1e-4;
  double reg_l1 = 0.0;
  double reg_l2 = 0.0;
  int n_steps = 500;
  int batch_size = 4;
  int validate_every = 25;
  std::uint64_t seed = 1;

  void validate() const;
  // 1 + sum over the block's layers of (kernel - 1) * dilation.
  [[nodiscard]] int block_receptive_field() const;
};

// Channels-first image: data[(c * height + y) * width + x].
struct Tensor {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<double> data;

  Tensor() = default;
  Tensor(int c, int h, int w) : channels(c), height(h), width(w), data(static_cast<std::size_t>(c) * h * w, 0.0) {}

  [[nodiscard]] std::size_t plane() const { return static_cast<std::size_t>(height) * width; }
  [[nodiscard]] bool same_shape(const Tensor &o) const {
    return channels == o.channels && height == o.height && width == o.width;
  }
};

// M x C channel matrix (column c is a row-major side x side map) <-> Tensor.
Tensor to_tensor(const RMatrix &channels, int side);
RMatrix to_matrix(const Tensor &t);

// A convolution reading the channel-concatenation of `inputs` (node ids) and
// writing one new node. Weights are out x in x k x k.
struct ConvLayer {
  std::vector<int> inputs;
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 1;
  int dilation = 1;
  bool elu = false;
  std::vector<double> weight;
  std::vector<double> bias;
};

struct HistoryRow {
  int step = 0;
  double train_loss = 0;
  double validation_loss = 0;
};

// Node 0 is the network input; layer i writes node i + 1. The network output
// is input + node[output_node].
struct NetworkModel {
  NetworkConfig config;
  std::vector<ConvLayer> layers;
  std::vector<int> node_channels;
  int output_node = 0;
  std::vector<HistoryRow> history;

  [[nodiscard]] std::size_t parameter_count() const;
  void set_zero();
};

NetworkModel build_mdcn(const NetworkConfig &cfg);

// Output of the last layer alone; forward() adds the input to it.
Tensor residual(const NetworkModel &model, const Tensor &x);
Tensor forward(const NetworkModel &model, const Tensor &x);

// Mean absolute error plus weight penalties (kernels only).
double data_loss(const Tensor &pred, const Tensor &label);
double regularization(const NetworkModel &model, double reg_l1, double reg_l2);
double loss(const Tensor &pred, const Tensor &label, const NetworkModel &model, const NetworkConfig &cfg);

struct Gradients {
  std::vector<std::vector<double>> weight;
  std::vector<std::vector<double>> bias;

  static Gradients zeros_like(const NetworkModel &model);
  void scale(double s);
};

// Adds scale * d(data_loss)/d(params) for one instance; returns the data loss.
double accumulate_data_gradients(const NetworkModel &model, const Tensor &x, const Tensor &label, double scale,
                                 Gradients &grads);
void add_regularization_gradients(const NetworkModel &model, double reg_l1, double reg_l2, Gradients &grads);

// Full gradient of loss(forward(model, x), label, model, cfg).
Gradients backward(const NetworkModel &model, const Tensor &x, const Tensor &label, const NetworkConfig &cfg);

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  long step = 0;
  Gradients m;
  Gradients v;
};

AdamState make_adam(const NetworkModel &model);

// One bias-corrected Adam update of a flat parameter group; `step` is the
// 1-based update count.
void adam_update(std::span<double> params, std::span<const double> grads, std::span<double> m, std::span<double> v,
                 long step, double lr, double beta1 = 0.9, double beta2 = 0.999, double epsilon = 1e-8);

void adam_step(NetworkModel &model, const Gradients &grads, AdamState &state, double lr);

struct NormStats {
  double mean = 0;
  double std = 1;
  bool degenerate = false;
};

NormStats norm_stats(const RMatrix &x);
RMatrix normalize(const RMatrix &x, const NormStats &stats);
RMatrix denormalize(const RMatrix &y, const NormStats &stats);

struct TrainingPair {
  RMatrix input; // M x 2L
  RMatrix label; // M x 2L
};

struct DatasetSplit {
  std::vector<int> train;
  std::vector<int> validation;
  std::vector<int> test;
};

// Seeded shuffle then split by ratio (default 8:1:1). Every part with a
// positive ratio gets at least one item when n allows it.
DatasetSplit split_dataset(int n, std::uint64_t seed, int train_ratio = 8, int validation_ratio = 1,
                           int test_ratio = 1);

struct TrainResult {
  NetworkModel model; // weights at the best validation loss
  std::vector<HistoryRow> history;
  double best_validation_loss = 0;
  int best_step = 0;
};

// Normalises each input by its own statistics and its label by the same
// statistics, then runs cfg.n_steps Adam steps on seeded random batches.
TrainResult train(const std::vector<TrainingPair> &corpus, const std::vector<int> &train_ids,
                  const std::vector<int> &validation_ids, int side, const NetworkConfig &cfg);

struct InferResult {
  CxMatrix u;
  double seconds = 0;
};

InferResult infer(const NetworkModel &model, const CxMatrix &u0, int side);

} // namespace featspace::network
