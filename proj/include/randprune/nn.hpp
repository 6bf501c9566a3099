#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "randprune/bitmask.hpp"
#include "randprune/data.hpp"
#include "randprune/error.hpp"
#include "randprune/rng.hpp"

namespace randprune {

enum class Activation { relu, identity };

struct Layer {
  Matrix weights;  // rows = outputs, cols = inputs; flattened row-major for masking
  Vector bias;
  Activation activation = Activation::relu;

  std::size_t weight_count() const { return static_cast<std::size_t>(weights.size()); }
  std::span<const double> flat_weights() const { return {weights.data(), weight_count()}; }
};

/// Dense feedforward stack; the last layer's outputs are logits for softmax
/// cross-entropy.
class Network {
 public:
  Network() = default;
  explicit Network(std::vector<Layer> layers) : layers_(std::move(layers)) { validate(); }

  /// Uniform init in [−1/√fan_in, 1/√fan_in] for weights and biases. Hidden
  /// layers use `hidden`, the output layer is identity.
  static Network initialize(std::span<const std::size_t> widths, Activation hidden, Rng& rng) {
    if (widths.size() < 2) throw ShapeError("network needs at least input and output widths");
    std::vector<Layer> layers;
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
      const auto in = static_cast<Eigen::Index>(widths[l]);
      const auto out = static_cast<Eigen::Index>(widths[l + 1]);
      if (in == 0 || out == 0) throw ShapeError("layer widths must be positive");
      const double bound = 1.0 / std::sqrt(static_cast<double>(in));
      std::uniform_real_distribution<double> u(-bound, bound);
      Layer layer;
      layer.weights.resize(out, in);
      for (Eigen::Index i = 0; i < layer.weights.size(); ++i) layer.weights.data()[i] = u(rng);
      layer.bias.resize(out);
      for (Eigen::Index i = 0; i < out; ++i) layer.bias(i) = u(rng);
      layer.activation = l + 2 == widths.size() ? Activation::identity : hidden;
      layers.push_back(std::move(layer));
    }
    return Network(std::move(layers));
  }

  std::size_t layer_count() const { return layers_.size(); }
  const Layer& layer(std::size_t i) const { return layers_.at(i); }
  Layer& layer(std::size_t i) { return layers_.at(i); }
  std::span<const Layer> layers() const { return layers_; }

  std::size_t input_dim() const { return static_cast<std::size_t>(layers_.front().weights.cols()); }
  std::size_t output_dim() const { return static_cast<std::size_t>(layers_.back().weights.rows()); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.weight_count() + static_cast<std::size_t>(l.bias.size());
    return n;
  }

  std::vector<std::size_t> weight_counts() const {
    std::vector<std::size_t> out;
    for (const auto& l : layers_) out.push_back(l.weight_count());
    return out;
  }

  bool same_shape(const Network& other) const {
    if (layers_.size() != other.layers_.size()) return false;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const auto& a = layers_[i];
      const auto& b = other.layers_[i];
      if (a.weights.rows() != b.weights.rows() || a.weights.cols() != b.weights.cols() ||
          a.bias.size() != b.bias.size())
        return false;
    }
    return true;
  }

  void validate() const {
    if (layers_.empty()) throw ShapeError("network has no layers");
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const auto& l = layers_[i];
      if (l.bias.size() != l.weights.rows())
        throw ShapeError("layer " + std::to_string(i) + ": bias length != weight rows");
      if (i > 0 && l.weights.cols() != layers_[i - 1].weights.rows())
        throw ShapeError("layer " + std::to_string(i) + ": input width " + std::to_string(l.weights.cols()) +
                         " != previous output width " + std::to_string(layers_[i - 1].weights.rows()));
      if (!l.weights.allFinite() || !l.bias.allFinite())
        throw Error("layer " + std::to_string(i) + " has non-finite parameters");
    }
  }

 private:
  std::vector<Layer> layers_;
};

/// A network together with one retain mask per layer's weight matrix (biases
/// are never masked). Weights at pruned positions are held at exactly zero.
/// Every parameter change bumps `version()`, which forward caches record.
class MaskedNetwork {
 public:
  MaskedNetwork() = default;

  explicit MaskedNetwork(Network net) : network_(std::move(net)) {
    for (const auto& l : network_.layers()) masks_.emplace_back(l.weight_count(), true);
  }

  MaskedNetwork(Network net, std::vector<BitMask> masks) : network_(std::move(net)) {
    set_masks(std::move(masks));
  }

  const Network& network() const { return network_; }
  std::size_t layer_count() const { return network_.layer_count(); }
  const Layer& layer(std::size_t i) const { return network_.layer(i); }
  const BitMask& mask(std::size_t i) const { return masks_.at(i); }
  std::span<const BitMask> masks() const { return masks_; }
  std::uint64_t version() const { return version_; }

  void set_masks(std::vector<BitMask> masks) {
    if (masks.size() != network_.layer_count()) throw ShapeError("one mask per layer required");
    for (std::size_t i = 0; i < masks.size(); ++i)
      if (masks[i].size() != network_.layer(i).weight_count())
        throw ShapeError("layer " + std::to_string(i) + ": mask length != weight count");
    masks_ = std::move(masks);
    apply_masks();
  }

  /// Runs `f` on the underlying network, then re-zeroes pruned weights.
  template <class F>
  void modify(F&& f) {
    f(network_);
    network_.validate();
    apply_masks();
  }

  void assign(Network net, std::vector<BitMask> masks) {
    if (!net.same_shape(network_)) throw ShapeError("assigned network has a different shape");
    network_ = std::move(net);
    set_masks(std::move(masks));
  }

  std::size_t zero_count(std::size_t layer) const {
    const auto w = network_.layer(layer).flat_weights();
    return static_cast<std::size_t>(std::count(w.begin(), w.end(), 0.0));
  }

 private:
  void apply_masks() {
    for (std::size_t l = 0; l < masks_.size(); ++l) {
      auto& w = network_.layer(l).weights;
      const auto bits = masks_[l].bits();
      for (std::size_t i = 0; i < bits.size(); ++i)
        if (!bits[i]) w.data()[i] = 0.0;
    }
    ++version_;
  }

  Network network_;
  std::vector<BitMask> masks_;
  std::uint64_t version_ = 0;
};

/// Distillation weights. Student and teacher share an architecture; hidden
/// states are matched by per-layer mean squared error, logits likewise.
struct KdConfig {
  bool enabled = false;
  double alpha_hidden = 1.0;
  double alpha_output = 1.0;

  void validate() const {
    if (!std::isfinite(alpha_hidden) || !std::isfinite(alpha_output) || alpha_hidden < 0.0 ||
        alpha_output < 0.0)
      throw Error("distillation weights must be finite and non-negative");
  }
};

struct ForwardCache {
  std::vector<Matrix> pre_activations;  // per layer, before the nonlinearity
  std::vector<Matrix> activations;      // [0] = input, [l+1] = output of layer l; back() = logits
  Matrix probabilities;
  std::vector<int> labels;
  double cross_entropy = 0.0;
  double hidden_distill = 0.0;
  double output_distill = 0.0;
  double loss = 0.0;
  KdConfig kd;
  std::vector<Matrix> teacher_activations;  // aligned with activations[1..]; empty without KD
  std::uint64_t version = 0;

  const Matrix& logits() const { return activations.back(); }
};

namespace detail {

inline void apply_activation(Matrix& z, Activation a) {
  if (a == Activation::relu) z = z.cwiseMax(0.0);
}

}  // namespace detail

/// Full forward pass with mean softmax cross-entropy. When `kd.enabled` and a
/// teacher cache over the same inputs is given, the distillation terms are added.
inline ForwardCache forward(const MaskedNetwork& net, const Matrix& inputs, std::span<const int> labels,
                            const KdConfig& kd = {}, const ForwardCache* teacher = nullptr) {
  const auto& network = net.network();
  if (static_cast<std::size_t>(inputs.cols()) != network.input_dim())
    throw ShapeError("input has " + std::to_string(inputs.cols()) + " columns, network expects " +
                     std::to_string(network.input_dim()));
  if (static_cast<std::size_t>(inputs.rows()) != labels.size())
    throw ShapeError("batch has " + std::to_string(inputs.rows()) + " rows but " +
                     std::to_string(labels.size()) + " labels");
  if (inputs.rows() == 0) throw ShapeError("empty batch");

  ForwardCache cache;
  cache.version = net.version();
  cache.labels.assign(labels.begin(), labels.end());
  cache.activations.push_back(inputs);
  for (const auto& layer : network.layers()) {
    Matrix z = cache.activations.back() * layer.weights.transpose();
    z.rowwise() += layer.bias.transpose();
    cache.pre_activations.push_back(z);
    detail::apply_activation(z, layer.activation);
    cache.activations.push_back(std::move(z));
  }

  const Matrix& logits = cache.activations.back();
  const auto batch = logits.rows();
  const auto classes = logits.cols();
  cache.probabilities.resize(batch, classes);
  double ce = 0.0;
  for (Eigen::Index r = 0; r < batch; ++r) {
    const int y = labels[static_cast<std::size_t>(r)];
    if (y < 0 || y >= classes) throw ShapeError("label outside the network's output range");
    const double mx = logits.row(r).maxCoeff();
    const Eigen::RowVectorXd e = (logits.row(r).array() - mx).exp();
    const double s = e.sum();
    cache.probabilities.row(r) = e / s;
    ce += -(logits(r, y) - mx - std::log(s));
  }
  cache.cross_entropy = ce / static_cast<double>(batch);
  cache.loss = cache.cross_entropy;

  if (kd.enabled && teacher != nullptr) {
    kd.validate();
    if (teacher->activations.size() != cache.activations.size())
      throw ShapeError("teacher depth differs from student depth");
    cache.kd = kd;
    for (std::size_t l = 1; l < cache.activations.size(); ++l) {
      const auto& t = teacher->activations[l];
      const auto& s = cache.activations[l];
      if (t.rows() != s.rows() || t.cols() != s.cols()) throw ShapeError("teacher activation shape mismatch");
      cache.teacher_activations.push_back(t);
      const double mse = (s - t).squaredNorm() / static_cast<double>(s.size());
      if (l + 1 < cache.activations.size())
        cache.hidden_distill += mse;
      else
        cache.output_distill = mse;
    }
    cache.loss += kd.alpha_hidden * cache.hidden_distill + kd.alpha_output * cache.output_distill;
  }
  return cache;
}

struct Gradients {
  std::vector<Matrix> weights;
  std::vector<Vector> biases;
};

/// Analytic gradients of `cache.loss`; pruned weight positions get zero.
inline Gradients backward(const MaskedNetwork& net, const ForwardCache& cache) {
  if (cache.version != net.version())
    throw StaleCacheError("forward cache was computed on an older parameter version");
  const auto& network = net.network();
  const std::size_t depth = network.layer_count();
  if (cache.pre_activations.size() != depth) throw ShapeError("forward cache depth mismatch");

  const Matrix& logits = cache.logits();
  const auto batch = static_cast<double>(logits.rows());
  const bool kd = !cache.teacher_activations.empty();

  Matrix delta = cache.probabilities;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) delta(r, cache.labels[static_cast<std::size_t>(r)]) -= 1.0;
  delta /= batch;
  if (kd && cache.kd.alpha_output != 0.0)
    delta += (cache.kd.alpha_output * 2.0 / static_cast<double>(logits.size())) *
             (logits - cache.teacher_activations.back());

  Gradients g;
  g.weights.resize(depth);
  g.biases.resize(depth);
  for (std::size_t l = depth; l-- > 0;) {
    const auto& layer = network.layer(l);
    // delta is dLoss/d(pre-activation of layer l)
    g.weights[l] = delta.transpose() * cache.activations[l];
    g.biases[l] = delta.colwise().sum().transpose();
    const auto bits = net.mask(l).bits();
    for (std::size_t i = 0; i < bits.size(); ++i)
      if (!bits[i]) g.weights[l].data()[i] = 0.0;
    if (l == 0) break;

    Matrix upstream = delta * layer.weights;  // dLoss/d(activations[l])
    const Matrix& hidden = cache.activations[l];
    if (kd && cache.kd.alpha_hidden != 0.0)
      upstream += (cache.kd.alpha_hidden * 2.0 / static_cast<double>(hidden.size())) *
                  (hidden - cache.teacher_activations[l - 1]);
    if (network.layer(l - 1).activation == Activation::relu)
      upstream = upstream.cwiseProduct((cache.pre_activations[l - 1].array() > 0.0).cast<double>().matrix());
    delta = std::move(upstream);
  }
  return g;
}

enum class OptimizerKind { sgd, adam };

struct OptimizerState {
  OptimizerKind kind = OptimizerKind::adam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::vector<Matrix> m_weights, v_weights;
  std::vector<Vector> m_biases, v_biases;
  std::uint64_t step = 0;

  static OptimizerState for_network(const Network& net, OptimizerKind kind, double learning_rate) {
    if (!(learning_rate > 0.0)) throw Error("learning rate must be positive");
    OptimizerState s;
    s.kind = kind;
    s.learning_rate = learning_rate;
    if (kind == OptimizerKind::adam) {
      for (const auto& l : net.layers()) {
        s.m_weights.push_back(Matrix::Zero(l.weights.rows(), l.weights.cols()));
        s.v_weights.push_back(Matrix::Zero(l.weights.rows(), l.weights.cols()));
        s.m_biases.push_back(Vector::Zero(l.bias.size()));
        s.v_biases.push_back(Vector::Zero(l.bias.size()));
      }
    }
    return s;
  }
};

/// One SGD or bias-corrected Adam update. All gradients are checked for
/// finiteness before any parameter moves.
inline void optimizer_step(MaskedNetwork& net, const Gradients& grads, OptimizerState& opt) {
  const std::size_t depth = net.layer_count();
  if (grads.weights.size() != depth || grads.biases.size() != depth)
    throw ShapeError("gradient layer count mismatch");
  for (std::size_t l = 0; l < depth; ++l) {
    const auto& layer = net.layer(l);
    if (grads.weights[l].rows() != layer.weights.rows() || grads.weights[l].cols() != layer.weights.cols() ||
        grads.biases[l].size() != layer.bias.size())
      throw ShapeError("gradient shape mismatch in layer " + std::to_string(l));
    if (!grads.weights[l].allFinite() || !grads.biases[l].allFinite()) throw NonFiniteGradientError(l);
  }
  if (opt.kind == OptimizerKind::adam && opt.m_weights.size() != depth)
    throw ShapeError("optimizer moments do not match the network");

  ++opt.step;
  net.modify([&](Network& network) {
    for (std::size_t l = 0; l < depth; ++l) {
      auto& layer = network.layer(l);
      if (opt.kind == OptimizerKind::sgd) {
        layer.weights -= opt.learning_rate * grads.weights[l];
        layer.bias -= opt.learning_rate * grads.biases[l];
        continue;
      }
      const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(opt.step));
      const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(opt.step));
      auto update = [&](auto& param, auto& m, auto& v, const auto& g) {
        m = opt.beta1 * m + (1.0 - opt.beta1) * g;
        v = opt.beta2 * v + (1.0 - opt.beta2) * g.cwiseProduct(g);
        param.array() -= opt.learning_rate * (m.array() / c1) / ((v.array() / c2).sqrt() + opt.epsilon);
      };
      update(layer.weights, opt.m_weights[l], opt.v_weights[l], grads.weights[l]);
      update(layer.bias, opt.m_biases[l], opt.v_biases[l], grads.biases[l]);
    }
  });
}

namespace detail {

inline Matrix gather_rows(const Matrix& m, std::span<const std::size_t> rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t r = 0; r < rows.size(); ++r)
    out.row(static_cast<Eigen::Index>(r)) = m.row(static_cast<Eigen::Index>(rows[r]));
  return out;
}

}  // namespace detail

/// One pass over shuffled mini-batches. Returns the sample-weighted mean of the
/// (possibly distillation-augmented) batch losses.
inline double train_one_epoch(MaskedNetwork& net, const Dataset& data, OptimizerState& opt, const KdConfig& kd,
                              const Network* teacher, Rng& rng, std::size_t batch_size = 32) {
  if (data.size() == 0) throw DataError("cannot train on an empty dataset");
  if (batch_size == 0) throw Error("batch size must be positive");
  std::optional<MaskedNetwork> dense_teacher;
  if (kd.enabled) {
    kd.validate();
    if (teacher == nullptr) throw Error("distillation enabled without a teacher");
    if (!teacher->same_shape(net.network())) throw ShapeError("teacher and student shapes differ");
    dense_teacher.emplace(*teacher);
  }

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);

  double total = 0.0;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const auto rows = std::span(order).subspan(start, std::min(batch_size, order.size() - start));
    const Matrix x = detail::gather_rows(data.inputs, rows);
    std::vector<int> y;
    y.reserve(rows.size());
    for (auto r : rows) y.push_back(data.labels[r]);

    ForwardCache cache;
    if (dense_teacher) {
      const auto t = forward(*dense_teacher, x, y);
      cache = forward(net, x, y, kd, &t);
    } else {
      cache = forward(net, x, y);
    }
    total += cache.loss * static_cast<double>(rows.size());
    optimizer_step(net, backward(net, cache), opt);
  }
  return total / static_cast<double>(data.size());
}

struct Evaluation {
  double accuracy = 0.0;
  double loss = 0.0;
};

/// Argmax accuracy (ties go to the lowest class index) and mean cross-entropy.
inline Evaluation evaluate(const MaskedNetwork& net, const Dataset& data) {
  if (data.size() == 0) throw DataError("cannot evaluate on an empty dataset");
  const auto cache = forward(net, data.inputs, data.labels);
  const Matrix& logits = cache.logits();
  std::size_t correct = 0;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < logits.cols(); ++c)
      if (logits(r, c) > logits(r, best)) best = c;
    if (best == data.labels[static_cast<std::size_t>(r)]) ++correct;
  }
  return {static_cast<double>(correct) / static_cast<double>(data.size()), cache.cross_entropy};
}

/// Exact copy of parameters, masks and optimizer state for rewinding.
struct ModelSnapshot {
  Network network;
  std::vector<BitMask> masks;
  OptimizerState optimizer;
  double learning_rate = 0.0;
};

inline ModelSnapshot snapshot(const MaskedNetwork& net, const OptimizerState& opt) {
  return {net.network(), std::vector<BitMask>(net.masks().begin(), net.masks().end()), opt, opt.learning_rate};
}

inline void restore(MaskedNetwork& net, OptimizerState& opt, const ModelSnapshot& snap) {
  if (!snap.network.same_shape(net.network())) throw ShapeError("snapshot shape does not match the network");
  if (opt.kind != snap.optimizer.kind) throw ShapeError("snapshot optimizer kind differs");
  net.assign(snap.network, snap.masks);
  opt = snap.optimizer;
  opt.learning_rate = snap.learning_rate;
}

namespace detail {

template <class M>
bool bitwise_equal(const M& a, const M& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

}  // namespace detail

inline bool bitwise_equal(const Network& a, const Network& b) {
  if (!a.same_shape(b)) return false;
  for (std::size_t l = 0; l < a.layer_count(); ++l)
    if (!detail::bitwise_equal(a.layer(l).weights, b.layer(l).weights) ||
        !detail::bitwise_equal(a.layer(l).bias, b.layer(l).bias) || a.layer(l).activation != b.layer(l).activation)
      return false;
  return true;
}

inline bool bitwise_equal(const OptimizerState& a, const OptimizerState& b) {
  auto same_list = [](const auto& x, const auto& y) {
    if (x.size() != y.size()) return false;
    for (std::size_t i = 0; i < x.size(); ++i)
      if (!detail::bitwise_equal(x[i], y[i])) return false;
    return true;
  };
  return a.kind == b.kind && std::memcmp(&a.learning_rate, &b.learning_rate, sizeof(double)) == 0 &&
         a.beta1 == b.beta1 && a.beta2 == b.beta2 && a.epsilon == b.epsilon && a.step == b.step &&
         same_list(a.m_weights, b.m_weights) && same_list(a.v_weights, b.v_weights) &&
         same_list(a.m_biases, b.m_biases) && same_list(a.v_biases, b.v_biases);
}

/// True when the live model matches the snapshot bit for bit.
inline bool matches_snapshot(const MaskedNetwork& net, const OptimizerState& opt, const ModelSnapshot& snap) {
  if (!bitwise_equal(net.network(), snap.network) || !bitwise_equal(opt, snap.optimizer)) return false;
  if (std::memcmp(&opt.learning_rate, &snap.learning_rate, sizeof(double)) != 0) return false;
  return std::equal(net.masks().begin(), net.masks().end(), snap.masks.begin(), snap.masks.end());
}

}  // namespace randprune
