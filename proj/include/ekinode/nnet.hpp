#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "ekinode/rng.hpp"

namespace ekinode {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using RowMajorMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Flat network parameters. Layout per layer: weight matrix (out x in)
/// row-major, then the bias vector.
using ParamVector = Eigen::VectorXd;

enum class Activation { Tanh, Elu };

inline std::string_view to_string(Activation a) {
  return a == Activation::Tanh ? "tanh" : "elu";
}

inline Activation activation_from_string(std::string_view s) {
  if (s == "tanh") return Activation::Tanh;
  if (s == "elu") return Activation::Elu;
  throw std::invalid_argument("unknown activation '" + std::string(s) + "'");
}

/// Fully connected network: hidden layers use `activation`, the output
/// layer is affine.
class MlpSpec {
 public:
  MlpSpec(std::vector<std::size_t> layer_sizes, Activation activation)
      : layer_sizes_(std::move(layer_sizes)), activation_(activation) {
    if (layer_sizes_.size() < 2)
      throw std::invalid_argument("MlpSpec: need at least input and output layer");
    for (std::size_t s : layer_sizes_)
      if (s == 0) throw std::invalid_argument("MlpSpec: layer sizes must be >= 1");
  }

  const std::vector<std::size_t>& layer_sizes() const { return layer_sizes_; }
  Activation activation() const { return activation_; }
  std::size_t num_layers() const { return layer_sizes_.size() - 1; }
  std::size_t input_dim() const { return layer_sizes_.front(); }
  std::size_t output_dim() const { return layer_sizes_.back(); }
  std::size_t fan_in(std::size_t layer) const { return layer_sizes_[layer]; }
  std::size_t fan_out(std::size_t layer) const { return layer_sizes_[layer + 1]; }

  /// Offset of layer `layer`'s weight block inside a ParamVector.
  std::size_t offset(std::size_t layer) const {
    std::size_t off = 0;
    for (std::size_t i = 0; i < layer; ++i) off += fan_out(i) * (fan_in(i) + 1);
    return off;
  }

  std::size_t param_count() const { return offset(num_layers()); }

  bool operator==(const MlpSpec&) const = default;

 private:
  std::vector<std::size_t> layer_sizes_;
  Activation activation_;
};

inline std::size_t param_count(const MlpSpec& spec) { return spec.param_count(); }

/// Read-only view of one layer inside a flat parameter vector.
struct LayerView {
  Eigen::Map<const RowMajorMatrix> weight;
  Eigen::Map<const Vector> bias;
};

inline LayerView layer_view(const MlpSpec& spec, const ParamVector& theta, std::size_t layer) {
  const auto in = static_cast<Eigen::Index>(spec.fan_in(layer));
  const auto out = static_cast<Eigen::Index>(spec.fan_out(layer));
  const double* base = theta.data() + spec.offset(layer);
  return {Eigen::Map<const RowMajorMatrix>(base, out, in),
          Eigen::Map<const Vector>(base + out * in, out)};
}

/// Unpacked weights, mostly useful for tests and for building networks by hand.
struct MlpWeights {
  std::vector<Matrix> weights;  // out x in
  std::vector<Vector> biases;
};

inline MlpWeights unflatten(const MlpSpec& spec, const ParamVector& theta) {
  if (static_cast<std::size_t>(theta.size()) != spec.param_count())
    throw std::invalid_argument("unflatten: parameter vector has wrong length");
  MlpWeights w;
  for (std::size_t l = 0; l < spec.num_layers(); ++l) {
    auto view = layer_view(spec, theta, l);
    w.weights.emplace_back(view.weight);
    w.biases.emplace_back(view.bias);
  }
  return w;
}

inline ParamVector flatten(const MlpSpec& spec, const MlpWeights& w) {
  if (w.weights.size() != spec.num_layers() || w.biases.size() != spec.num_layers())
    throw std::invalid_argument("flatten: layer count mismatch");
  ParamVector theta(static_cast<Eigen::Index>(spec.param_count()));
  for (std::size_t l = 0; l < spec.num_layers(); ++l) {
    const auto in = static_cast<Eigen::Index>(spec.fan_in(l));
    const auto out = static_cast<Eigen::Index>(spec.fan_out(l));
    if (w.weights[l].rows() != out || w.weights[l].cols() != in || w.biases[l].size() != out)
      throw std::invalid_argument("flatten: layer " + std::to_string(l) + " has wrong shape");
    double* base = theta.data() + spec.offset(l);
    Eigen::Map<RowMajorMatrix>(base, out, in) = w.weights[l];
    Eigen::Map<Vector>(base + out * in, out) = w.biases[l];
  }
  return theta;
}

/// Weights and biases of a layer with fan-in k are i.i.d. U(-sqrt(1/k), sqrt(1/k)).
inline ParamVector mlp_init(const MlpSpec& spec, Rng& rng) {
  ParamVector theta(static_cast<Eigen::Index>(spec.param_count()));
  Eigen::Index pos = 0;
  for (std::size_t l = 0; l < spec.num_layers(); ++l) {
    const double bound = std::sqrt(1.0 / static_cast<double>(spec.fan_in(l)));
    const std::size_t n = spec.fan_out(l) * (spec.fan_in(l) + 1);
    for (std::size_t i = 0; i < n; ++i) theta[pos++] = rng.uniform(-bound, bound);
  }
  return theta;
}

inline double activate(Activation a, double z) {
  if (a == Activation::Tanh) return std::tanh(z);
  return z >= 0.0 ? z : std::expm1(z);
}

/// d activation / dz, expressed through the pre-activation z.
inline double activate_derivative(Activation a, double z) {
  if (a == Activation::Tanh) {
    const double t = std::tanh(z);
    return 1.0 - t * t;
  }
  return z >= 0.0 ? 1.0 : std::exp(z);
}

/// Per-layer record of a forward pass: the input to each layer and each
/// layer's pre-activation. Consumed by reverse-mode differentiation.
struct MlpTrace {
  std::vector<Vector> inputs;
  std::vector<Vector> preactivations;
};

inline void check_forward_args(const MlpSpec& spec, const ParamVector& theta,
                               Eigen::Index input_size) {
  if (static_cast<std::size_t>(theta.size()) != spec.param_count())
    throw std::invalid_argument("mlp_forward: expected " + std::to_string(spec.param_count()) +
                                " parameters, got " + std::to_string(theta.size()));
  if (static_cast<std::size_t>(input_size) != spec.input_dim())
    throw std::invalid_argument("mlp_forward: expected input of length " +
                                std::to_string(spec.input_dim()) + ", got " +
                                std::to_string(input_size));
}

inline Vector mlp_forward(const MlpSpec& spec, const ParamVector& theta,
                          const Eigen::Ref<const Vector>& input, MlpTrace* trace = nullptr) {
  check_forward_args(spec, theta, input.size());
  if (trace) {
    trace->inputs.clear();
    trace->preactivations.clear();
  }
  Vector x = input;
  const std::size_t last = spec.num_layers() - 1;
  for (std::size_t l = 0; l <= last; ++l) {
    auto layer = layer_view(spec, theta, l);
    Vector z = layer.weight * x + layer.bias;
    if (trace) {
      trace->inputs.push_back(x);
      trace->preactivations.push_back(z);
    }
    if (l != last) z = z.unaryExpr([a = spec.activation()](double v) { return activate(a, v); });
    x = std::move(z);
  }
  return x;
}

/// Scalar-input convenience for controllers u(t).
inline Vector mlp_forward(const MlpSpec& spec, const ParamVector& theta, double input) {
  Vector in(1);
  in[0] = input;
  return mlp_forward(spec, theta, in);
}

}  // namespace ekinode
