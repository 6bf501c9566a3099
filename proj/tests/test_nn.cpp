#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "randprune/data.hpp"
#include "randprune/nn.hpp"
#include "test_helpers.hpp"

using namespace randprune;

namespace {

Layer make_layer(std::vector<std::vector<double>> w, std::vector<double> b, Activation a) {
  Layer l;
  l.weights.resize(static_cast<Eigen::Index>(w.size()), static_cast<Eigen::Index>(w[0].size()));
  for (std::size_t r = 0; r < w.size(); ++r)
    for (std::size_t c = 0; c < w[r].size(); ++c) l.weights(r, c) = w[r][c];
  l.bias = Eigen::Map<const Vector>(b.data(), static_cast<Eigen::Index>(b.size()));
  l.activation = a;
  return l;
}

// Hand-set 2-4-2 network shared by the forward oracle tests.
Network fixed_2_4_2() {
  return Network({make_layer({{0.5, -0.3}, {0.8, 0.1}, {-0.6, 0.4}, {0.2, 0.9}}, {0.1, -0.2, 0.05, 0.0},
                             Activation::relu),
                  make_layer({{0.3, -0.7, 0.5, 0.2}, {-0.4, 0.6, 0.1, -0.8}}, {0.02, -0.01}, Activation::identity)});
}

// Scalar re-evaluation of the 2-4-2 forward pass and mean cross-entropy.
double scalar_loss_2_4_2(const std::vector<std::vector<double>>& xs, const std::vector<int>& ys) {
  const double w1[4][2] = {{0.5, -0.3}, {0.8, 0.1}, {-0.6, 0.4}, {0.2, 0.9}};
  const double b1[4] = {0.1, -0.2, 0.05, 0.0};
  const double w2[2][4] = {{0.3, -0.7, 0.5, 0.2}, {-0.4, 0.6, 0.1, -0.8}};
  const double b2[2] = {0.02, -0.01};
  double total = 0.0;
  for (std::size_t s = 0; s < xs.size(); ++s) {
    double h[4];
    for (int j = 0; j < 4; ++j) {
      double z = b1[j];
      for (int i = 0; i < 2; ++i) z += w1[j][i] * xs[s][i];
      h[j] = z > 0.0 ? z : 0.0;
    }
    double logit[2];
    for (int j = 0; j < 2; ++j) {
      logit[j] = b2[j];
      for (int i = 0; i < 4; ++i) logit[j] += w2[j][i] * h[i];
    }
    const double norm = std::log(std::exp(logit[0]) + std::exp(logit[1]));
    total += norm - logit[ys[s]];
  }
  return total / static_cast<double>(xs.size());
}

}  // namespace

TEST(Forward, IdentityNetworkPassesInputThrough) {
  auto net = MaskedNetwork(Network({make_layer({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}, {0, 0, 0}, Activation::identity)}));
  Matrix x(2, 3);
  x << 0.5, -1.0, 2.0, 3.0, 0.0, -0.25;
  const std::vector<int> y{0, 2};
  const auto cache = forward(net, x, y);
  EXPECT_TRUE(cache.logits() == x);
}

TEST(Forward, UniformLogitsGiveLn2) {
  auto net = MaskedNetwork(Network({make_layer({{0.0, 0.0}, {0.0, 0.0}}, {0.3, 0.3}, Activation::identity)}));
  Matrix x(3, 2);
  x << 1, 2, -3, 4, 0, 0;
  const auto cache = forward(net, x, std::vector<int>{0, 1, 1});
  EXPECT_NEAR(cache.cross_entropy, std::log(2.0), 1e-15);
}

TEST(Forward, MatchesScalarOracleOnFixedNetwork) {
  const std::vector<std::vector<double>> xs{{1.0, 2.0}, {-0.5, 0.3}, {0.7, -1.2}, {2.0, 0.1}};
  const std::vector<int> ys{0, 1, 1, 0};
  Matrix x(4, 2);
  for (int r = 0; r < 4; ++r) x.row(r) << xs[r][0], xs[r][1];
  const auto cache = forward(MaskedNetwork(fixed_2_4_2()), x, ys);
  EXPECT_NEAR(cache.loss, scalar_loss_2_4_2(xs, ys), 1e-14);
  EXPECT_EQ(cache.activations.size(), 3u);
}

TEST(Forward, RejectsWrongInputWidth) {
  const MaskedNetwork net(fixed_2_4_2());
  Matrix x(1, 3);
  x.setZero();
  EXPECT_THROW(forward(net, x, std::vector<int>{0}), ShapeError);
}

TEST(Network, RejectsIncompatibleLayers) {
  EXPECT_THROW(Network({make_layer({{1, 2}}, {0}, Activation::relu), make_layer({{1, 2}}, {0}, Activation::identity)}),
               ShapeError);
}

TEST(Backward, MaskedLayerHasZeroWeightGradient) {
  Rng rng(3);
  const std::vector<std::size_t> widths{2, 8, 2};
  MaskedNetwork net(Network::initialize(widths, Activation::relu, rng));
  auto masks = std::vector<BitMask>{BitMask(16, false), BitMask(16, true)};
  net.set_masks(masks);
  const auto batch = test::random_batch(4, 2, 2, rng);
  const auto g = backward(net, forward(net, batch.inputs, batch.labels));
  EXPECT_EQ(g.weights[0].cwiseAbs().maxCoeff(), 0.0);
  EXPECT_GT(g.weights[1].cwiseAbs().maxCoeff(), 0.0);
}

TEST(Backward, VanishesAtConvergedSymmetricMinimum) {
  // Same input with both labels: the optimum has equal logits and the loss is
  // locally quadratic in the logit gap.
  auto net = MaskedNetwork(Network({make_layer({{0.9}, {-0.4}}, {0.3, -0.2}, Activation::identity)}));
  Matrix x(2, 1);
  x << 1.0, 1.0;
  const std::vector<int> y{0, 1};
  auto opt = OptimizerState::for_network(net.network(), OptimizerKind::sgd, 0.5);
  for (int i = 0; i < 5000; ++i) optimizer_step(net, backward(net, forward(net, x, y)), opt);
  const auto g = backward(net, forward(net, x, y));
  const double norm = std::sqrt(g.weights[0].squaredNorm() + g.biases[0].squaredNorm());
  EXPECT_LT(norm, 1e-8);
}

TEST(Backward, RejectsStaleCache) {
  Rng rng(5);
  const std::vector<std::size_t> widths{2, 4, 2};
  MaskedNetwork net(Network::initialize(widths, Activation::relu, rng));
  const auto batch = test::random_batch(3, 2, 2, rng);
  const auto cache = forward(net, batch.inputs, batch.labels);
  net.modify([](Network& n) { n.layer(0).weights(0, 0) += 0.1; });
  EXPECT_THROW(backward(net, cache), StaleCacheError);
}

TEST(Backward, MatchesFiniteDifferencesOnRandom_2_8_2) {
  Rng rng(11);
  const std::vector<std::size_t> widths{2, 8, 2};
  MaskedNetwork net(Network::initialize(widths, Activation::relu, rng));
  const auto batch = test::random_batch(4, 2, 2, rng);
  const auto report = test::check_gradients(net, batch, KdConfig{}, nullptr);
  EXPECT_TRUE(report.ok) << report.detail;
  EXPECT_EQ(report.checked, net.network().parameter_count());
}

TEST(Backward, MatchesFiniteDifferencesWithDistillation) {
  Rng rng(12);
  const std::vector<std::size_t> widths{3, 6, 5, 3};
  MaskedNetwork student(Network::initialize(widths, Activation::relu, rng));
  const Network teacher = Network::initialize(widths, Activation::relu, rng);
  const auto batch = test::random_batch(5, 3, 3, rng);
  const KdConfig kd{true, 0.7, 1.3};
  const auto report = test::check_gradients(student, batch, kd, &teacher);
  EXPECT_TRUE(report.ok) << report.detail;
}

TEST(Backward, MaskedFiniteDifferencesAgreeOnRetainedWeights) {
  Rng rng(13);
  const std::vector<std::size_t> widths{2, 8, 2};
  MaskedNetwork net(Network::initialize(widths, Activation::relu, rng));
  std::vector<BitMask> masks;
  for (std::size_t l = 0; l < net.layer_count(); ++l) {
    BitMask m(net.layer(l).weight_count(), true);
    for (std::size_t i = 0; i < m.size(); i += 3) m.set(i, false);
    masks.push_back(m);
  }
  net.set_masks(masks);
  const auto batch = test::random_batch(4, 2, 2, rng);
  const auto report = test::check_gradients(net, batch, KdConfig{}, nullptr);
  EXPECT_TRUE(report.ok) << report.detail;
}

TEST(Optimizer, SgdUpdateArithmetic) {
  auto net = MaskedNetwork(Network({make_layer({{1.0}}, {0.0}, Activation::identity)}));
  auto opt = OptimizerState::for_network(net.network(), OptimizerKind::sgd, 0.1);
  Gradients g{{Matrix::Constant(1, 1, 0.5)}, {Vector::Zero(1)}};
  optimizer_step(net, g, opt);
  EXPECT_DOUBLE_EQ(net.layer(0).weights(0, 0), 0.95);
}

TEST(Optimizer, MaskedWeightStaysZero) {
  auto net = MaskedNetwork(Network({make_layer({{1.0, 2.0}}, {0.0}, Activation::identity)}));
  net.set_masks({BitMask::from_indices(2, std::vector<std::size_t>{1})});
  for (auto kind : {OptimizerKind::sgd, OptimizerKind::adam}) {
    auto opt = OptimizerState::for_network(net.network(), kind, 0.1);
    Gradients g{{Matrix::Constant(1, 2, -3.0)}, {Vector::Zero(1)}};
    optimizer_step(net, g, opt);
    EXPECT_EQ(net.layer(0).weights(0, 0), 0.0);
    EXPECT_NE(net.layer(0).weights(0, 1), 2.0);
  }
}

TEST(Optimizer, AdamMatchesScalarRecurrence) {
  const double lr = 0.01, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  const std::vector<double> grads{0.1, -0.05, 0.2, 0.0, 0.07};
  auto net = MaskedNetwork(Network({make_layer({{0.4}}, {0.0}, Activation::identity)}));
  auto opt = OptimizerState::for_network(net.network(), OptimizerKind::adam, lr);

  double w = 0.4, m = 0.0, v = 0.0;
  for (std::size_t t = 1; t <= grads.size(); ++t) {
    const double g = grads[t - 1];
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mhat = m / (1 - std::pow(b1, t));
    const double vhat = v / (1 - std::pow(b2, t));
    const double before = w;
    w -= lr * mhat / (std::sqrt(vhat) + eps);
    optimizer_step(net, Gradients{{Matrix::Constant(1, 1, g)}, {Vector::Zero(1)}}, opt);
    EXPECT_NEAR(net.layer(0).weights(0, 0), w, 1e-15) << "step " << t;
    if (t == 1) {
      EXPECT_NEAR(before - w, lr, 1e-6);  // first step moves by ≈ lr
    }
  }
  EXPECT_EQ(opt.step, grads.size());
}

TEST(Optimizer, NonFiniteGradientReportsLayer) {
  Rng rng(2);
  const std::vector<std::size_t> widths{2, 3, 2};
  MaskedNetwork net(Network::initialize(widths, Activation::relu, rng));
  auto opt = OptimizerState::for_network(net.network(), OptimizerKind::adam, 0.01);
  const auto before = net.network();
  Gradients g{{Matrix::Zero(3, 2), Matrix::Zero(2, 3)}, {Vector::Zero(3), Vector::Zero(2)}};
  g.weights[1](0, 0) = std::nan("");
  try {
    optimizer_step(net, g, opt);
    FAIL() << "expected NonFiniteGradientError";
  } catch (const NonFiniteGradientError& e) {
    EXPECT_EQ(e.layer, 1u);
  }
  EXPECT_TRUE(bitwise_equal(net.network(), before));
  EXPECT_EQ(opt.step, 0u);
}

TEST(Training, DistillationTermsVanishForIdenticalStudent) {
  Rng rng(21);
  const std::vector<std::size_t> widths{2, 8, 2};
  const Network teacher = Network::initialize(widths, Activation::relu, rng);
  const auto batch = test::random_batch(16, 2, 2, rng);
  const MaskedNetwork t(teacher), s(teacher);
  const auto tc = forward(t, batch.inputs, batch.labels);
  const auto sc = forward(s, batch.inputs, batch.labels, KdConfig{true, 1.0, 1.0}, &tc);
  EXPECT_EQ(sc.hidden_distill, 0.0);
  EXPECT_EQ(sc.output_distill, 0.0);
  EXPECT_EQ(sc.loss, sc.cross_entropy);

  MaskedNetwork moved(teacher);
  moved.modify([](Network& n) { n.layer(0).weights(0, 0) += 0.5; });
  const auto mc = forward(moved, batch.inputs, batch.labels, KdConfig{true, 1.0, 1.0}, &tc);
  EXPECT_GT(mc.hidden_distill + mc.output_distill, 0.0);
}

TEST(Training, OneEpochReducesLossOnBlobs) {
  const auto data = generate_synthetic(SyntheticKind::blobs, 400, 1.0, 4);
  Rng rng(8);
  const std::vector<std::size_t> widths{2, 8, 2};
  MaskedNetwork net(Network::initialize(widths, Activation::relu, rng));
  auto opt = OptimizerState::for_network(net.network(), OptimizerKind::adam, 0.01);
  const double before = evaluate(net, data).loss;
  Rng shuffle(1);
  train_one_epoch(net, data, opt, KdConfig{}, nullptr, shuffle, 16);
  EXPECT_LT(evaluate(net, data).loss, before);
}

TEST(Training, SameSeedGivesBitIdenticalWeights) {
  const auto data = generate_synthetic(SyntheticKind::moons, 300, 0.2, 9);
  auto run = [&] {
    Rng init(77);
    const std::vector<std::size_t> widths{2, 8, 2};
    MaskedNetwork net(Network::initialize(widths, Activation::relu, init));
    auto opt = OptimizerState::for_network(net.network(), OptimizerKind::adam, 0.01);
    for (std::uint64_t e = 0; e < 3; ++e) {
      auto rng = make_rng(77, {e});
      train_one_epoch(net, data, opt, KdConfig{}, nullptr, rng);
    }
    return net.network();
  };
  EXPECT_TRUE(bitwise_equal(run(), run()));
}

TEST(Training, MaskedWeightsRemainZeroAcrossEpochs) {
  const auto data = generate_synthetic(SyntheticKind::moons, 200, 0.2, 10);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    const std::vector<std::size_t> widths{2, 6, 6, 2};
    MaskedNetwork net(Network::initialize(widths, Activation::relu, rng));
    std::vector<BitMask> masks;
    std::bernoulli_distribution keep(0.5);
    for (std::size_t l = 0; l < net.layer_count(); ++l) {
      BitMask m(net.layer(l).weight_count());
      for (std::size_t i = 0; i < m.size(); ++i) m.set(i, keep(rng));
      masks.push_back(m);
    }
    net.set_masks(masks);
    auto opt = OptimizerState::for_network(net.network(), seed % 2 ? OptimizerKind::sgd : OptimizerKind::adam, 0.05);
    const Network teacher = net.network();
    for (int e = 0; e < 3; ++e) train_one_epoch(net, data, opt, KdConfig{seed % 3 == 0, 1.0, 1.0}, &teacher, rng);
    for (std::size_t l = 0; l < net.layer_count(); ++l)
      for (std::size_t i = 0; i < masks[l].size(); ++i)
        if (!masks[l][i]) {
          ASSERT_EQ(net.layer(l).flat_weights()[i], 0.0);
        }
  }
}

TEST(Training, RejectsEmptyDatasetAndMissingTeacher) {
  Rng rng(1);
  const std::vector<std::size_t> widths{2, 4, 2};
  MaskedNetwork net(Network::initialize(widths, Activation::relu, rng));
  auto opt = OptimizerState::for_network(net.network(), OptimizerKind::adam, 0.01);
  Dataset empty;
  empty.inputs.resize(0, 2);
  empty.class_count = 2;
  EXPECT_THROW(train_one_epoch(net, empty, opt, KdConfig{}, nullptr, rng), DataError);
  EXPECT_THROW(evaluate(net, empty), DataError);
  const auto data = generate_synthetic(SyntheticKind::moons, 20, 0.1, 1);
  EXPECT_THROW(train_one_epoch(net, data, opt, KdConfig{true, 1, 1}, nullptr, rng), Error);
}

TEST(Evaluate, PerfectPredictorAndSingleSample) {
  // Bias strongly favours class 0.
  auto net = MaskedNetwork(Network({make_layer({{0.0, 0.0}, {0.0, 0.0}}, {5.0, -5.0}, Activation::identity)}));
  Dataset d;
  d.inputs = Matrix::Random(10, 2);
  d.labels.assign(10, 0);
  d.class_count = 2;
  EXPECT_EQ(evaluate(net, d).accuracy, 1.0);
  EXPECT_EQ(evaluate(net, d.subset(std::vector<std::size_t>{3})).accuracy, 1.0);
}

TEST(Evaluate, TiesGoToLowestClass) {
  auto net = MaskedNetwork(Network({make_layer({{0.0}, {0.0}, {0.0}}, {1.0, 1.0, 1.0}, Activation::identity)}));
  Dataset d;
  d.inputs = Matrix::Ones(2, 1);
  d.labels = {0, 1};
  d.class_count = 3;
  EXPECT_EQ(evaluate(net, d).accuracy, 0.5);
}

TEST(Evaluate, RandomNetworkIsNearChanceOnBalancedData) {
  // Labels independent of inputs: any fixed predictor is a coin flip per sample.
  int inside = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    Dataset d;
    d.inputs.resize(1000, 2);
    std::normal_distribution<double> g;
    for (Eigen::Index i = 0; i < d.inputs.size(); ++i) d.inputs.data()[i] = g(rng);
    d.labels.resize(1000);
    for (std::size_t i = 0; i < 1000; ++i) d.labels[i] = static_cast<int>(i % 2);
    std::shuffle(d.labels.begin(), d.labels.end(), rng);
    d.class_count = 2;
    const std::vector<std::size_t> widths{2, 8, 2};
    const MaskedNetwork net(Network::initialize(widths, Activation::relu, rng));
    const double acc = evaluate(net, d).accuracy;
    if (acc >= 0.4 && acc <= 0.6) ++inside;
  }
  EXPECT_GE(inside, 95);
}

TEST(Snapshot, RestoreUndoesPerturbationBitwise) {
  Rng rng(4);
  const std::vector<std::size_t> widths{2, 5, 3};
  MaskedNetwork net(Network::initialize(widths, Activation::relu, rng));
  auto opt = OptimizerState::for_network(net.network(), OptimizerKind::adam, 0.01);
  const auto snap = snapshot(net, opt);
  net.modify([](Network& n) {
    for (std::size_t l = 0; l < n.layer_count(); ++l) n.layer(l).weights.array() += 0.25;
  });
  restore(net, opt, snap);
  EXPECT_TRUE(bitwise_equal(net.network(), snap.network));
}

TEST(Snapshot, RestoreRewindsAdamState) {
  const auto data = generate_synthetic(SyntheticKind::moons, 64, 0.2, 3);
  Rng rng(4);
  const std::vector<std::size_t> widths{2, 5, 2};
  MaskedNetwork net(Network::initialize(widths, Activation::relu, rng));
  auto opt = OptimizerState::for_network(net.network(), OptimizerKind::adam, 0.01);
  train_one_epoch(net, data, opt, KdConfig{}, nullptr, rng, 64);
  const auto snap = snapshot(net, opt);
  opt.learning_rate = 0.5;
  train_one_epoch(net, data, opt, KdConfig{}, nullptr, rng, 13);  // 5 Adam steps
  EXPECT_EQ(opt.step, snap.optimizer.step + 5);
  restore(net, opt, snap);
  EXPECT_TRUE(matches_snapshot(net, opt, snap));
  EXPECT_EQ(opt.step, snap.optimizer.step);
  EXPECT_EQ(opt.learning_rate, 0.01);
}

TEST(Snapshot, RestoreIntoDifferentShapeFails) {
  Rng rng(4);
  const std::vector<std::size_t> a{2, 5, 2}, b{2, 6, 2};
  MaskedNetwork na(Network::initialize(a, Activation::relu, rng));
  MaskedNetwork nb(Network::initialize(b, Activation::relu, rng));
  auto oa = OptimizerState::for_network(na.network(), OptimizerKind::adam, 0.01);
  auto ob = OptimizerState::for_network(nb.network(), OptimizerKind::adam, 0.01);
  EXPECT_THROW(restore(nb, ob, snapshot(na, oa)), ShapeError);
}
