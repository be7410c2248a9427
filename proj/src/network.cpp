#include "featspace/network.hpp"

#include "featspace/subspace.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

namespace featspace::network {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMat>;
using ConstRowMap = Eigen::Map<const RowMat>;

void NetworkConfig::validate() const {
  require(in_channels >= 1 && n_blocks >= 1 && layers_per_block >= 1 && growth_rate >= 1,
          "network config: channel and block counts must be >= 1");
  require(static_cast<int>(dilations.size()) == layers_per_block, "network config: need one dilation per block layer");
  for (int d : dilations) require(d >= 1, "network config: dilations must be >= 1");
  require(kernel_size >= 1 && kernel_size % 2 == 1, "network config: kernel size must be odd");
  require(learning_rate > 0, "network config: learning rate must be positive");
  require(reg_l1 >= 0 && reg_l2 >= 0, "network config: regularization scales must be >= 0");
  require(n_steps >= 0 && batch_size >= 1 && validate_every >= 1, "network config: invalid step counts");
}

int NetworkConfig::block_receptive_field() const {
  int field = 1;
  for (int d : dilations) field += (kernel_size - 1) * d;
  return field;
}

Tensor to_tensor(const RMatrix &channels, int side) {
  require(channels.rows() == static_cast<Eigen::Index>(side) * side, "to_tensor: channel size does not match side");
  Tensor t(static_cast<int>(channels.cols()), side, side);
  std::copy(channels.data(), channels.data() + channels.size(), t.data.begin());
  return t;
}

RMatrix to_matrix(const Tensor &t) {
  RMatrix m(static_cast<Eigen::Index>(t.plane()), t.channels);
  std::copy(t.data.begin(), t.data.end(), m.data());
  return m;
}

std::size_t NetworkModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto &l : layers) n += l.weight.size() + l.bias.size();
  return n;
}

void NetworkModel::set_zero() {
  for (auto &l : layers) {
    std::fill(l.weight.begin(), l.weight.end(), 0.0);
    std::fill(l.bias.begin(), l.bias.end(), 0.0);
  }
}

NetworkModel build_mdcn(const NetworkConfig &cfg) {
  cfg.validate();
  NetworkModel model;
  model.config = cfg;
  model.node_channels.push_back(cfg.in_channels);

  auto add = [&](std::vector<int> inputs, int out, int kernel, int dilation, bool elu) {
    ConvLayer layer;
    layer.inputs = std::move(inputs);
    for (int id : layer.inputs) layer.in_channels += model.node_channels.at(id);
    layer.out_channels = out;
    layer.kernel = kernel;
    layer.dilation = dilation;
    layer.elu = elu;
    model.layers.push_back(std::move(layer));
    model.node_channels.push_back(out);
    return static_cast<int>(model.node_channels.size()) - 1;
  };

  const int g = cfg.growth_rate;
  const int first = add({0}, g, cfg.kernel_size, 1, false);
  std::vector<int> levels{first};
  for (int b = 0; b < cfg.n_blocks; ++b) {
    const int block_in = b == 0 ? first : add(levels, g, 1, 1, false);
    std::vector<int> block{block_in};
    for (int k = 0; k < cfg.layers_per_block; ++k) {
      const int y = add(block, g, cfg.kernel_size, cfg.dilations[k], true);
      block.push_back(y);
      levels.push_back(y);
    }
  }
  model.output_node = add(levels, cfg.in_channels, 1, 1, false);

  // He-uniform initialisation from the configured seed.
  std::mt19937_64 rng(cfg.seed);
  for (auto &layer : model.layers) {
    const int fan_in = layer.in_channels * layer.kernel * layer.kernel;
    const double limit = std::sqrt(6.0 / fan_in);
    std::uniform_real_distribution<double> dist(-limit, limit);
    layer.weight.resize(static_cast<std::size_t>(layer.out_channels) * fan_in);
    for (auto &w : layer.weight) w = dist(rng);
    layer.bias.assign(layer.out_channels, 0.0);
  }
  return model;
}

namespace {

// Rows: (channel, ky, kx) over the concatenated inputs; columns: pixels.
RowMat im2col(const std::vector<Tensor> &nodes, const ConvLayer &layer, int h, int w) {
  const int k = layer.kernel;
  const int half = k / 2;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  RowMat col(static_cast<Eigen::Index>(layer.in_channels) * k * k, static_cast<Eigen::Index>(plane));
  Eigen::Index row = 0;
  for (int id : layer.inputs) {
    const Tensor &in = nodes[id];
    for (int c = 0; c < in.channels; ++c) {
      const double *src = in.data.data() + c * plane;
      for (int ky = 0; ky < k; ++ky) {
        const int dy = (ky - half) * layer.dilation;
        for (int kx = 0; kx < k; ++kx, ++row) {
          const int dx = (kx - half) * layer.dilation;
          double *dst = col.row(row).data();
          for (int y = 0; y < h; ++y) {
            const int sy = y + dy;
            double *out = dst + static_cast<std::size_t>(y) * w;
            if (sy < 0 || sy >= h) {
              std::fill(out, out + w, 0.0);
              continue;
            }
            const double *line = src + static_cast<std::size_t>(sy) * w;
            for (int x = 0; x < w; ++x) {
              const int sx = x + dx;
              out[x] = (sx >= 0 && sx < w) ? line[sx] : 0.0;
            }
          }
        }
      }
    }
  }
  return col;
}

// Scatter-add of a column-matrix gradient back onto the input node grads.
void col2im(const RowMat &dcol, const ConvLayer &layer, int h, int w, std::vector<Tensor> &grads) {
  const int k = layer.kernel;
  const int half = k / 2;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  Eigen::Index row = 0;
  for (int id : layer.inputs) {
    Tensor &g = grads[id];
    for (int c = 0; c < g.channels; ++c) {
      double *dst = g.data.data() + c * plane;
      for (int ky = 0; ky < k; ++ky) {
        const int dy = (ky - half) * layer.dilation;
        for (int kx = 0; kx < k; ++kx, ++row) {
          const int dx = (kx - half) * layer.dilation;
          const double *src = dcol.row(row).data();
          for (int y = 0; y < h; ++y) {
            const int sy = y + dy;
            if (sy < 0 || sy >= h) continue;
            const double *in = src + static_cast<std::size_t>(y) * w;
            double *line = dst + static_cast<std::size_t>(sy) * w;
            const int x0 = std::max(0, -dx);
            const int x1 = std::min(w, w - dx);
            for (int x = x0; x < x1; ++x) line[x + dx] += in[x];
          }
        }
      }
    }
  }
}

double elu(double z) { return z > 0 ? z : std::expm1(z); }

// Runs every layer, keeping all node activations.
std::vector<Tensor> run(const NetworkModel &model, const Tensor &x) {
  require(x.channels == model.config.in_channels, "forward: input channel count does not match model");
  const int h = x.height;
  const int w = x.width;
  std::vector<Tensor> nodes;
  nodes.reserve(model.node_channels.size());
  nodes.push_back(x);
  for (const auto &layer : model.layers) {
    const RowMat col = im2col(nodes, layer, h, w);
    Tensor out(layer.out_channels, h, w);
    RowMap z(out.data.data(), layer.out_channels, static_cast<Eigen::Index>(out.plane()));
    const ConstRowMap weight(layer.weight.data(), layer.out_channels, col.rows());
    z.noalias() = weight * col;
    for (int c = 0; c < layer.out_channels; ++c) z.row(c).array() += layer.bias[c];
    if (layer.elu) {
      for (auto &v : out.data) v = elu(v);
    }
    nodes.push_back(std::move(out));
  }
  return nodes;
}

} // namespace

Tensor residual(const NetworkModel &model, const Tensor &x) {
  std::vector<Tensor> nodes = run(model, x);
  return std::move(nodes[model.output_node]);
}

Tensor forward(const NetworkModel &model, const Tensor &x) {
  Tensor out = residual(model, x);
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += x.data[i];
  return out;
}

double data_loss(const Tensor &pred, const Tensor &label) {
  require(pred.same_shape(label), "loss: prediction and label shapes differ");
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.data.size(); ++i) sum += std::abs(pred.data[i] - label.data[i]);
  return sum / static_cast<double>(pred.data.size());
}

double regularization(const NetworkModel &model, double reg_l1, double reg_l2) {
  if (reg_l1 == 0.0 && reg_l2 == 0.0) return 0.0;
  double l1 = 0.0, l2 = 0.0;
  for (const auto &layer : model.layers) {
    for (double w : layer.weight) {
      l1 += std::abs(w);
      l2 += w * w;
    }
  }
  return reg_l1 * l1 + reg_l2 * l2;
}

double loss(const Tensor &pred, const Tensor &label, const NetworkModel &model, const NetworkConfig &cfg) {
  return data_loss(pred, label) + regularization(model, cfg.reg_l1, cfg.reg_l2);
}

Gradients Gradients::zeros_like(const NetworkModel &model) {
  Gradients g;
  for (const auto &layer : model.layers) {
    g.weight.emplace_back(layer.weight.size(), 0.0);
    g.bias.emplace_back(layer.bias.size(), 0.0);
  }
  return g;
}

void Gradients::scale(double s) {
  for (auto &v : weight) for (auto &x : v) x *= s;
  for (auto &v : bias) for (auto &x : v) x *= s;
}

double accumulate_data_gradients(const NetworkModel &model, const Tensor &x, const Tensor &label, double scale,
                                 Gradients &grads) {
  const std::vector<Tensor> nodes = run(model, x);
  const Tensor &correction = nodes[model.output_node];
  require(label.same_shape(x), "backward: label shape does not match input");

  const double n = static_cast<double>(x.data.size());
  std::vector<Tensor> node_grads;
  node_grads.reserve(nodes.size());
  for (const auto &t : nodes) node_grads.emplace_back(t.channels, t.height, t.width);

  double sum = 0.0;
  Tensor &top = node_grads[model.output_node];
  for (std::size_t i = 0; i < x.data.size(); ++i) {
    const double diff = x.data[i] + correction.data[i] - label.data[i];
    sum += std::abs(diff);
    top.data[i] = diff > 0 ? scale / n : (diff < 0 ? -scale / n : 0.0);
  }

  const int h = x.height;
  const int w = x.width;
  for (int li = static_cast<int>(model.layers.size()) - 1; li >= 0; --li) {
    const ConvLayer &layer = model.layers[li];
    const int node = li + 1;
    Tensor &dnode = node_grads[node];
    if (layer.elu) {
      const auto &y = nodes[node].data;
      for (std::size_t i = 0; i < y.size(); ++i) {
        if (y[i] < 0) dnode.data[i] *= y[i] + 1.0;
      }
    }
    const ConstRowMap dz(dnode.data.data(), layer.out_channels, static_cast<Eigen::Index>(dnode.plane()));
    const RowMat col = im2col(nodes, layer, h, w);
    RowMap dweight(grads.weight[li].data(), layer.out_channels, col.rows());
    dweight.noalias() += dz * col.transpose();
    // Plain loop: an Eigen reduction over heap memory of varying alignment
    // would change the summation order between runs.
    for (int c = 0; c < layer.out_channels; ++c) {
      const double *row = dnode.data.data() + c * dnode.plane();
      grads.bias[li][c] += std::accumulate(row, row + dnode.plane(), 0.0);
    }
    const ConstRowMap weight(layer.weight.data(), layer.out_channels, col.rows());
    const RowMat dcol = weight.transpose() * dz;
    col2im(dcol, layer, h, w, node_grads);
  }
  return sum / n;
}

void add_regularization_gradients(const NetworkModel &model, double reg_l1, double reg_l2, Gradients &grads) {
  if (reg_l1 == 0.0 && reg_l2 == 0.0) return;
  for (std::size_t li = 0; li < model.layers.size(); ++li) {
    const auto &w = model.layers[li].weight;
    auto &g = grads.weight[li];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double sign = w[i] > 0 ? 1.0 : (w[i] < 0 ? -1.0 : 0.0);
      g[i] += reg_l1 * sign + 2.0 * reg_l2 * w[i];
    }
  }
}

Gradients backward(const NetworkModel &model, const Tensor &x, const Tensor &label, const NetworkConfig &cfg) {
  Gradients grads = Gradients::zeros_like(model);
  accumulate_data_gradients(model, x, label, 1.0, grads);
  add_regularization_gradients(model, cfg.reg_l1, cfg.reg_l2, grads);
  return grads;
}

AdamState make_adam(const NetworkModel &model) {
  AdamState s;
  s.m = Gradients::zeros_like(model);
  s.v = Gradients::zeros_like(model);
  return s;
}

void adam_update(std::span<double> params, std::span<const double> grads, std::span<double> m, std::span<double> v,
                 long step, double lr, double beta1, double beta2, double epsilon) {
  require(params.size() == grads.size() && m.size() == params.size() && v.size() == params.size(),
          "adam: parameter and state sizes differ");
  require(step >= 1, "adam: step count is 1-based");
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    m[i] = beta1 * m[i] + (1.0 - beta1) * grads[i];
    v[i] = beta2 * v[i] + (1.0 - beta2) * grads[i] * grads[i];
    const double m_hat = m[i] / c1;
    const double v_hat = v[i] / c2;
    params[i] -= lr * m_hat / (std::sqrt(v_hat) + epsilon);
  }
}

void adam_step(NetworkModel &model, const Gradients &grads, AdamState &state, double lr) {
  ++state.step;
  for (std::size_t li = 0; li < model.layers.size(); ++li) {
    auto &layer = model.layers[li];
    adam_update(layer.weight, grads.weight[li], state.m.weight[li], state.v.weight[li], state.step, lr, state.beta1,
                state.beta2, state.epsilon);
    adam_update(layer.bias, grads.bias[li], state.m.bias[li], state.v.bias[li], state.step, lr, state.beta1,
                state.beta2, state.epsilon);
  }
}

NormStats norm_stats(const RMatrix &x) {
  NormStats s;
  const double n = static_cast<double>(x.size());
  if (n == 0) {
    s.degenerate = true;
    return s;
  }
  s.mean = x.sum() / n;
  const double var = (x.array() - s.mean).square().sum() / n;
  s.std = std::sqrt(var);
  if (!(s.std >= 1e-12)) {
    s.std = 1.0;
    s.degenerate = true;
  }
  return s;
}

RMatrix normalize(const RMatrix &x, const NormStats &stats) { return (x.array() - stats.mean) / stats.std; }

RMatrix denormalize(const RMatrix &y, const NormStats &stats) { return y.array() * stats.std + stats.mean; }

DatasetSplit split_dataset(int n, std::uint64_t seed, int train_ratio, int validation_ratio, int test_ratio) {
  require(n >= 1, "split_dataset: empty corpus");
  require(train_ratio >= 1 && validation_ratio >= 0 && test_ratio >= 0, "split_dataset: invalid ratios");
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  for (int i = n - 1; i > 0; --i) {
    std::uniform_int_distribution<int> pick(0, i);
    std::swap(order[i], order[pick(rng)]);
  }
  const int total = train_ratio + validation_ratio + test_ratio;
  int n_val = static_cast<int>(std::lround(static_cast<double>(n) * validation_ratio / total));
  int n_test = static_cast<int>(std::lround(static_cast<double>(n) * test_ratio / total));
  if (validation_ratio > 0 && n_val == 0 && n >= 3) n_val = 1;
  if (test_ratio > 0 && n_test == 0 && n >= 3) n_test = 1;
  const int n_train = n - n_val - n_test;
  require(n_train >= 1, "split_dataset: corpus too small for the requested split");

  DatasetSplit split;
  split.train.assign(order.begin(), order.begin() + n_train);
  split.validation.assign(order.begin() + n_train, order.begin() + n_train + n_val);
  split.test.assign(order.begin() + n_train + n_val, order.end());
  return split;
}

namespace {

struct Prepared {
  Tensor input;
  Tensor target;
};

Prepared prepare(const TrainingPair &pair, int side) {
  require(pair.input.rows() == pair.label.rows() && pair.input.cols() == pair.label.cols(),
          "train: input and label shapes differ");
  const NormStats stats = norm_stats(pair.input);
  return {to_tensor(normalize(pair.input, stats), side), to_tensor(normalize(pair.label, stats), side)};
}

double mean_loss(const NetworkModel &model, const std::vector<Prepared> &data, const std::vector<int> &ids) {
  double sum = 0.0;
  for (int id : ids) sum += data_loss(forward(model, data[id].input), data[id].target);
  return ids.empty() ? 0.0 : sum / static_cast<double>(ids.size());
}

} // namespace

TrainResult train(const std::vector<TrainingPair> &corpus, const std::vector<int> &train_ids,
                  const std::vector<int> &validation_ids, int side, const NetworkConfig &cfg) {
  require(!corpus.empty() && !train_ids.empty(), "train: empty corpus");
  cfg.validate();
  for (int id : train_ids) require(id >= 0 && id < static_cast<int>(corpus.size()), "train: bad training index");
  for (int id : validation_ids) require(id >= 0 && id < static_cast<int>(corpus.size()), "train: bad validation index");
  require(corpus.front().input.cols() == cfg.in_channels, "train: corpus channel count does not match config");

  std::vector<Prepared> data;
  data.reserve(corpus.size());
  for (const auto &pair : corpus) data.push_back(prepare(pair, side));
  const std::vector<int> &val_ids = validation_ids.empty() ? train_ids : validation_ids;

  TrainResult result;
  NetworkModel model = build_mdcn(cfg);
  AdamState adam = make_adam(model);
  // Batches come from a stream distinct from the initialisation stream.
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_int_distribution<std::size_t> pick(0, train_ids.size() - 1);

  result.best_validation_loss = mean_loss(model, data, val_ids);
  result.best_step = 0;
  result.model = model;
  result.history.push_back({0, mean_loss(model, data, train_ids), result.best_validation_loss});

  double running = 0.0;
  int running_count = 0;
  for (int step = 1; step <= cfg.n_steps; ++step) {
    Gradients grads = Gradients::zeros_like(model);
    const double inv_batch = 1.0 / cfg.batch_size;
    double batch_loss = 0.0;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const auto &item = data[train_ids[pick(rng)]];
      batch_loss += accumulate_data_gradients(model, item.input, item.target, inv_batch, grads);
    }
    add_regularization_gradients(model, cfg.reg_l1, cfg.reg_l2, grads);
    adam_step(model, grads, adam, cfg.learning_rate);
    running += batch_loss * inv_batch;
    ++running_count;

    if (step % cfg.validate_every == 0 || step == cfg.n_steps) {
      const double val = mean_loss(model, data, val_ids);
      result.history.push_back({step, running / running_count, val});
      running = 0.0;
      running_count = 0;
      if (val < result.best_validation_loss) {
        result.best_validation_loss = val;
        result.best_step = step;
        result.model = model;
      }
    }
  }
  result.model.history = result.history;
  return result;
}

InferResult infer(const NetworkModel &model, const CxMatrix &u0, int side) {
  require(u0.cols() * 2 == model.config.in_channels, "infer: model expects 2L channels");
  const auto start = std::chrono::steady_clock::now();
  const RMatrix channels = subspace::to_real_channels(u0);
  const NormStats stats = norm_stats(channels);
  // denormalize(x_n + r) = x + std * r; adding the residual in the input's
  // own scale keeps a zero residual bit-exact.
  const Tensor r = residual(model, to_tensor(normalize(channels, stats), side));
  InferResult result;
  result.u = subspace::from_real_channels(channels + stats.std * to_matrix(r));
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

} // namespace featspace::network
