#include "featspace/network.hpp"
#include "featspace/pipeline.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

using namespace featspace;
using namespace featspace::network;

namespace {

Tensor random_tensor(int c, int h, int w, std::mt19937_64 &rng, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  Tensor t(c, h, w);
  for (auto &x : t.data) x = g(rng);
  return t;
}

NetworkConfig toy_config() {
  NetworkConfig c;
  c.in_channels = 4;
  c.n_blocks = 2;
  c.layers_per_block = 2;
  c.growth_rate = 3;
  c.dilations = {1, 2};
  c.seed = 5;
  return c;
}

double group_error(const std::vector<double> &fd, const std::vector<double> &exact) {
  double diff = 0.0, ref = 0.0;
  for (std::size_t i = 0; i < fd.size(); ++i) {
    diff += (fd[i] - exact[i]) * (fd[i] - exact[i]);
    ref += fd[i] * fd[i];
  }
  return ref > 0 ? std::sqrt(diff / ref) : std::sqrt(diff);
}

} // namespace

TEST_CASE("receptive field of one block") {
  NetworkConfig c;
  c.dilations = {1, 4, 8, 1};
  CHECK(c.block_receptive_field() == 29);
  c.dilations = {1, 1, 1, 1};
  CHECK(c.block_receptive_field() == 9);
}

TEST_CASE("full-size dense block wiring") {
  NetworkConfig c;
  c.in_channels = 64;
  c.n_blocks = 1;
  c.layers_per_block = 4;
  c.growth_rate = 128;
  c.dilations = {1, 4, 8, 1};
  const auto m = build_mdcn(c);
  // Initial conv, four block layers, final 1x1.
  REQUIRE(m.layers.size() == 6);
  CHECK(m.layers[0].in_channels == 64);
  for (int k = 0; k < 4; ++k) {
    const auto &l = m.layers[1 + k];
    CHECK(l.in_channels == 128 * (k + 1));
    CHECK(l.out_channels == 128);
    CHECK(l.dilation == c.dilations[k]);
    CHECK(l.kernel == 3);
    CHECK(l.elu);
  }
  CHECK(m.layers.back().out_channels == 64);
  CHECK(m.layers.back().kernel == 1);
}

TEST_CASE("multi-level connectivity across blocks") {
  const auto m = build_mdcn(toy_config());
  // first, block 1 (2 layers), compression, block 2 (2 layers), output.
  REQUIRE(m.layers.size() == 7);
  const auto &compress = m.layers[3];
  CHECK(compress.kernel == 1);
  CHECK(compress.inputs == std::vector<int>{1, 2, 3});
  CHECK(m.layers.back().inputs == std::vector<int>{1, 2, 3, 5, 6});
  CHECK(m.layers.back().in_channels == 15);
  CHECK(m.layers.back().out_channels == 4);
  for (const auto &l : m.layers)
    for (double w : l.weight) CHECK(std::isfinite(w));
}

TEST_CASE("config validation") {
  auto c = toy_config();
  c.dilations = {1};
  CHECK_THROWS_AS(build_mdcn(c), InvalidParameter);
  c = toy_config();
  c.dilations = {1, 0};
  CHECK_THROWS_AS(build_mdcn(c), InvalidParameter);
  c = toy_config();
  c.kernel_size = 4;
  CHECK_THROWS_AS(build_mdcn(c), InvalidParameter);
  c = toy_config();
  c.in_channels = 0;
  CHECK_THROWS_AS(build_mdcn(c), InvalidParameter);
}

TEST_CASE("zero weights give the identity map") {
  std::mt19937_64 rng(1);
  auto m = build_mdcn(toy_config());
  m.set_zero();
  const Tensor x = random_tensor(4, 8, 8, rng);
  CHECK(forward(m, x).data == x.data);
}

TEST_CASE("shape preservation at full scale") {
  NetworkConfig c;
  c.in_channels = 64;
  c.n_blocks = 1;
  c.layers_per_block = 1;
  c.growth_rate = 2;
  c.dilations = {8};
  const auto m = build_mdcn(c);
  Tensor x(64, 160, 160);
  const Tensor y = forward(m, x);
  CHECK(y.same_shape(x));
  CHECK_THROWS_AS(forward(m, Tensor(63, 160, 160)), InvalidParameter);
}

TEST_CASE("zero input with zero biases gives zero output") {
  const auto m = build_mdcn(toy_config());
  const Tensor y = forward(m, Tensor(4, 8, 8));
  CHECK(std::all_of(y.data.begin(), y.data.end(), [](double v) { return v == 0.0; }));
}

TEST_CASE("loss values") {
  std::mt19937_64 rng(2);
  auto m = build_mdcn(toy_config());
  m.set_zero();
  const Tensor label = random_tensor(4, 8, 8, rng);
  CHECK(loss(label, label, m, toy_config()) == 0.0);
  Tensor shifted = label;
  for (auto &v : shifted.data) v += 1.0;
  CHECK(data_loss(shifted, label) == doctest::Approx(1.0).epsilon(1e-14));

  const auto w = build_mdcn(toy_config());
  double l1 = 0.0, l2 = 0.0;
  for (const auto &l : w.layers)
    for (double v : l.weight) {
      l1 += std::abs(v);
      l2 += v * v;
    }
  CHECK(regularization(w, 1e-2, 1e-2) == doctest::Approx(1e-2 * l1 + 1e-2 * l2).epsilon(1e-12));
  CHECK_THROWS_AS(data_loss(Tensor(4, 8, 8), Tensor(4, 8, 7)), InvalidParameter);
}

TEST_CASE("gradients match central finite differences") {
  std::mt19937_64 rng(3);
  auto cfg = toy_config();
  cfg.reg_l1 = 1e-3;
  cfg.reg_l2 = 1e-2;
  auto model = build_mdcn(cfg);
  std::normal_distribution<double> g(0.0, 0.1);
  for (auto &l : model.layers)
    for (auto &b : l.bias) b = g(rng);
  const Tensor x = random_tensor(4, 8, 8, rng);
  const Tensor label = random_tensor(4, 8, 8, rng, 2.0);
  const Gradients exact = backward(model, x, label, cfg);

  const double eps = 1e-4;
  auto objective = [&](const NetworkModel &m) { return loss(forward(m, x), label, m, cfg); };
  for (std::size_t li = 0; li < model.layers.size(); ++li) {
    for (int group = 0; group < 2; ++group) {
      auto &params = group == 0 ? model.layers[li].weight : model.layers[li].bias;
      const auto &analytic = group == 0 ? exact.weight[li] : exact.bias[li];
      std::vector<double> fd(params.size());
      for (std::size_t i = 0; i < params.size(); ++i) {
        const double saved = params[i];
        params[i] = saved + eps;
        const double up = objective(model);
        params[i] = saved - eps;
        const double down = objective(model);
        params[i] = saved;
        fd[i] = (up - down) / (2.0 * eps);
      }
      INFO("layer " << li << (group == 0 ? " weights" : " biases"));
      CHECK(group_error(fd, analytic) <= 1e-3);
    }
  }
}

TEST_CASE("zero input and label give zero gradients") {
  auto cfg = toy_config();
  const auto m = build_mdcn(cfg);
  const Gradients grads = backward(m, Tensor(4, 8, 8), Tensor(4, 8, 8), cfg);
  for (const auto &w : grads.weight)
    for (double v : w) CHECK(v == 0.0);
  for (const auto &b : grads.bias)
    for (double v : b) CHECK(v == 0.0);
}

TEST_CASE("L2 regularization gradient") {
  const auto m = build_mdcn(toy_config());
  Gradients grads = Gradients::zeros_like(m);
  add_regularization_gradients(m, 0.0, 0.03, grads);
  for (std::size_t li = 0; li < m.layers.size(); ++li) {
    for (std::size_t i = 0; i < m.layers[li].weight.size(); ++i)
      CHECK(grads.weight[li][i] == doctest::Approx(2.0 * 0.03 * m.layers[li].weight[i]).epsilon(1e-14));
    for (double b : grads.bias[li]) CHECK(b == 0.0);
  }
}

TEST_CASE("Adam update") {
  CHECK(NetworkConfig{}.learning_rate == 1e-4);
  for (double gval : {0.3, -2.5, 0.05, 1e-3}) {
    std::vector<double> w{1.0}, m{0.0}, v{0.0};
    const std::vector<double> grad{gval};
    const double lr = 1e-4;
    adam_update(w, grad, m, v, 1, lr);
    // Bias-corrected first step: -lr g / (|g| + eps).
    CHECK(w[0] == doctest::Approx(1.0 - lr * gval / (std::abs(gval) + 1e-8)).epsilon(1e-15));
    // Sign step, once eps / |g| is negligible.
    if (std::abs(gval) >= 1e-2) CHECK(std::abs(w[0] - (1.0 - lr * (gval > 0 ? 1.0 : -1.0))) <= 1e-6 * lr);
  }
  std::vector<double> w{0.7}, m{0.0}, v{0.0};
  const std::vector<double> zero{0.0};
  adam_update(w, zero, m, v, 1, 1e-3);
  CHECK(w[0] == 0.7);

  // Two steps against an independent recomputation of the Adam recurrences.
  std::vector<double> p{0.5}, pm{0.0}, pv{0.0};
  const double g1 = 0.2, g2 = -0.7, lr = 0.01;
  adam_update(p, std::vector<double>{g1}, pm, pv, 1, lr);
  adam_update(p, std::vector<double>{g2}, pm, pv, 2, lr);
  double em = 0, ev = 0, ep = 0.5;
  for (auto [t, gg] : {std::pair{1, g1}, std::pair{2, g2}}) {
    em = 0.9 * em + 0.1 * gg;
    ev = 0.999 * ev + 0.001 * gg * gg;
    const double mh = em / (1 - std::pow(0.9, t));
    const double vh = ev / (1 - std::pow(0.999, t));
    ep -= lr * mh / (std::sqrt(vh) + 1e-8);
  }
  CHECK(p[0] == doctest::Approx(ep).epsilon(1e-14));
}

TEST_CASE("instance normalisation") {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> g(3.0, 2.0);
  RMatrix x(100, 6);
  for (auto &v : x.reshaped()) v = g(rng);
  const NormStats s = norm_stats(x);
  CHECK_FALSE(s.degenerate);
  const RMatrix n = normalize(x, s);
  const double mean = n.mean();
  const double sd = std::sqrt((n.array() - mean).square().mean());
  CHECK(std::abs(mean) <= 1e-10);
  CHECK(std::abs(sd - 1.0) <= 1e-10);
  CHECK((denormalize(n, s) - x).cwiseAbs().maxCoeff() <= 1e-12);

  const RMatrix c = RMatrix::Constant(10, 2, 4.0);
  const NormStats cs = norm_stats(c);
  CHECK(cs.degenerate);
  CHECK(cs.std == 1.0);
  const RMatrix cn = normalize(c, cs);
  CHECK(cn.rows() == 10);
  CHECK(cn.cols() == 2);
}

TEST_CASE("dataset split") {
  const auto s = split_dataset(10, 1);
  CHECK(s.train.size() == 8);
  CHECK(s.validation.size() == 1);
  CHECK(s.test.size() == 1);
  const auto big = split_dataset(40, 2);
  CHECK(big.train.size() == 32);
  CHECK(big.validation.size() == 4);
  CHECK(big.test.size() == 4);
  std::set<int> all(big.train.begin(), big.train.end());
  all.insert(big.validation.begin(), big.validation.end());
  all.insert(big.test.begin(), big.test.end());
  CHECK(all.size() == 40);
  CHECK(split_dataset(40, 2).train == big.train);
  CHECK(split_dataset(40, 3).train != big.train);
  CHECK_THROWS_AS(split_dataset(0, 1), InvalidParameter);
}

TEST_CASE("inference") {
  std::mt19937_64 rng(5);
  auto cfg = toy_config();
  auto m = build_mdcn(cfg);
  std::normal_distribution<double> g;
  CxMatrix u0(64, 2);
  for (auto &v : u0.reshaped()) v = Cx{g(rng), g(rng)};
  m.set_zero();
  const auto same = infer(m, u0, 8);
  CHECK(same.u == u0);
  CHECK(same.seconds >= 0.0);
  const auto trained = infer(build_mdcn(cfg), u0, 8);
  CHECK(trained.u.rows() == 64);
  CHECK(trained.u.cols() == 2);
  CHECK_THROWS_AS(infer(m, CxMatrix::Zero(64, 3), 8), InvalidParameter);
}

TEST_CASE("training beats the identity map and is reproducible") {
  auto exp = pipeline::ExperimentConfig::load(FEATSPACE_CONFIG_DIR "/smoke.cfg");
  exp.corpus_size = 8;
  const auto corpus = pipeline::build_corpus(exp);
  REQUIRE(corpus.size() == 8);
  const std::vector<int> train_ids{0, 1, 2, 3, 4, 5};
  const std::vector<int> val_ids{6, 7};

  NetworkConfig cfg = exp.network;
  cfg.n_blocks = 2;
  cfg.layers_per_block = 2;
  cfg.dilations = {1, 2};
  cfg.growth_rate = 4;
  cfg.n_steps = 500;
  cfg.batch_size = 2;
  cfg.validate_every = 50;
  cfg.learning_rate = 1e-3;
  const int side = exp.phantom.grid_size;

  // Identity-map baseline, normalised exactly as the trainer does.
  double identity = 0.0;
  for (int id : val_ids) {
    const NormStats s = norm_stats(corpus[id].input);
    identity += (normalize(corpus[id].input, s) - normalize(corpus[id].label, s)).cwiseAbs().mean();
  }
  identity /= static_cast<double>(val_ids.size());

  const auto result = train(corpus, train_ids, val_ids, side, cfg);
  MESSAGE("identity loss " << identity << ", best validation loss " << result.best_validation_loss);
  CHECK(result.best_validation_loss < identity);
  CHECK(result.history.back().validation_loss < result.history.front().validation_loss);
  CHECK(result.history.size() == 11);

  cfg.n_steps = 20;
  cfg.validate_every = 10;
  const auto a = train(corpus, train_ids, val_ids, side, cfg);
  const auto b = train(corpus, train_ids, val_ids, side, cfg);
  for (std::size_t li = 0; li < a.model.layers.size(); ++li) CHECK(a.model.layers[li].weight == b.model.layers[li].weight);
  CHECK(a.best_validation_loss == b.best_validation_loss);

  CHECK_THROWS_AS(train({}, train_ids, val_ids, side, cfg), InvalidParameter);
  CHECK_THROWS_AS(train(corpus, {}, val_ids, side, cfg), InvalidParameter);
}
