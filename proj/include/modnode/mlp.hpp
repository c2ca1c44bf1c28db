#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "modnode/tape.hpp"

namespace modnode {

/// Layer widths of a fully connected network, e.g. "3-25-25-25-1".
/// Hidden layers use softplus; the output layer is affine.
struct MlpSpec {
  std::vector<std::uint32_t> widths;

  MlpSpec() = default;
  explicit MlpSpec(std::vector<std::uint32_t> w) : widths(std::move(w)) { validate(); }

  static MlpSpec parse(const std::string& text) {
    std::vector<std::uint32_t> w;
    std::stringstream in(text);
    std::string item;
    while (std::getline(in, item, '-')) {
      if (item.empty() || item.find_first_not_of("0123456789") != std::string::npos) {
        throw std::invalid_argument("MlpSpec: malformed layer list '" + text + "'");
      }
      w.push_back(static_cast<std::uint32_t>(std::stoul(item)));
    }
    return MlpSpec(std::move(w));
  }

  void validate() const {
    if (widths.size() < 2) throw std::invalid_argument("MlpSpec: need at least input and output widths");
    for (auto w : widths) {
      if (w == 0) throw std::invalid_argument("MlpSpec: widths must be positive");
    }
  }

  [[nodiscard]] std::uint32_t input_dim() const { return widths.front(); }
  [[nodiscard]] std::uint32_t output_dim() const { return widths.back(); }
  [[nodiscard]] std::size_t layer_count() const { return widths.size() - 1; }

  [[nodiscard]] std::size_t parameter_count() const {
    std::size_t n = 0;
    for (std::size_t k = 0; k + 1 < widths.size(); ++k) n += std::size_t{widths[k + 1]} * (widths[k] + 1);
    return n;
  }

  [[nodiscard]] std::string to_string() const {
    std::string s;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      if (k) s += '-';
      s += std::to_string(widths[k]);
    }
    return s;
  }

  friend bool operator==(const MlpSpec&, const MlpSpec&) = default;
};

/// Weights and biases of one network, stored flat: for each layer the
/// out x in weight matrix (row-major) followed by its bias vector.
class Mlp {
 public:
  Mlp() = default;
  explicit Mlp(MlpSpec spec) : spec_(std::move(spec)), params_(spec_.parameter_count(), 0.0) {
    spec_.validate();
  }
  Mlp(MlpSpec spec, std::vector<double> params) : spec_(std::move(spec)), params_(std::move(params)) {
    spec_.validate();
    if (params_.size() != spec_.parameter_count()) {
      throw std::invalid_argument("Mlp: " + std::to_string(params_.size()) + " parameters given, spec " +
                                  spec_.to_string() + " needs " + std::to_string(spec_.parameter_count()));
    }
  }

  /// Glorot-uniform weights in +-sqrt(6 / (fan_in + fan_out)), zero biases.
  static Mlp initialized(const MlpSpec& spec, std::uint64_t seed) {
    Mlp net(spec);
    std::mt19937_64 rng(seed);
    for (std::size_t k = 0; k < spec.layer_count(); ++k) {
      const double limit = std::sqrt(6.0 / (spec.widths[k] + spec.widths[k + 1]));
      std::uniform_real_distribution<double> dist(-limit, limit);
      for (double& w : net.weights(k)) w = dist(rng);
    }
    return net;
  }

  [[nodiscard]] const MlpSpec& spec() const { return spec_; }
  [[nodiscard]] std::span<const double> params() const { return params_; }
  std::span<double> params() { return params_; }

  std::span<double> weights(std::size_t layer) { return {params_.data() + weight_offset(layer), weight_size(layer)}; }
  std::span<double> biases(std::size_t layer) {
    return {params_.data() + weight_offset(layer) + weight_size(layer), spec_.widths[layer + 1]};
  }
  [[nodiscard]] std::span<const double> weights(std::size_t layer) const {
    return {params_.data() + weight_offset(layer), weight_size(layer)};
  }
  [[nodiscard]] std::span<const double> biases(std::size_t layer) const {
    return {params_.data() + weight_offset(layer) + weight_size(layer), spec_.widths[layer + 1]};
  }

  /// Plain forward pass, no tape.
  [[nodiscard]] std::vector<double> evaluate(std::span<const double> input) const {
    if (input.size() != spec_.input_dim()) {
      throw std::invalid_argument("Mlp::evaluate: input length " + std::to_string(input.size()) + ", expected " +
                                  std::to_string(spec_.input_dim()));
    }
    std::vector<double> h(input.begin(), input.end());
    std::vector<double> z;
    for (std::size_t k = 0; k < spec_.layer_count(); ++k) {
      const auto w = weights(k);
      const auto b = biases(k);
      const std::size_t in = spec_.widths[k];
      z.assign(b.begin(), b.end());
      for (std::size_t i = 0; i < z.size(); ++i) {
        for (std::size_t j = 0; j < in; ++j) z[i] += w[i * in + j] * h[j];
      }
      if (k + 1 < spec_.layer_count()) {
        for (double& v : z) v = softplus(v);
      }
      h.swap(z);
    }
    return h;
  }

 private:
  [[nodiscard]] std::size_t weight_size(std::size_t layer) const {
    return std::size_t{spec_.widths[layer]} * spec_.widths[layer + 1];
  }
  [[nodiscard]] std::size_t weight_offset(std::size_t layer) const {
    if (layer >= spec_.layer_count()) throw std::out_of_range("Mlp: layer index");
    std::size_t off = 0;
    for (std::size_t k = 0; k < layer; ++k) off += std::size_t{spec_.widths[k + 1]} * (spec_.widths[k] + 1);
    return off;
  }

  MlpSpec spec_;
  std::vector<double> params_;
};

/// Tape leaves for one network's parameters.
struct MlpNodes {
  const MlpSpec* spec = nullptr;
  std::vector<NodeId> weights;
  std::vector<NodeId> biases;
};

inline MlpNodes bind(Tape& tape, const Mlp& net) {
  MlpNodes nodes;
  nodes.spec = &net.spec();
  const auto& w = net.spec().widths;
  for (std::size_t k = 0; k < net.spec().layer_count(); ++k) {
    nodes.weights.push_back(tape.matrix(net.weights(k), w[k + 1], w[k]));
    nodes.biases.push_back(tape.variable(net.biases(k)));
  }
  return nodes;
}

/// Adds the adjoints of `nodes` into `grad`, laid out like Mlp::params().
inline void accumulate_gradient(const Tape& tape, const MlpNodes& nodes, std::span<double> grad) {
  std::size_t off = 0;
  for (std::size_t k = 0; k < nodes.weights.size(); ++k) {
    for (NodeId id : {nodes.weights[k], nodes.biases[k]}) {
      const auto a = tape.adjoint(id);
      for (std::size_t i = 0; i < a.size(); ++i) grad[off + i] += a[i];
      off += a.size();
    }
  }
}

/// Forward pass with the hidden pre-activations kept for Jacobian reuse.
struct MlpTrace {
  NodeId output = 0;
  std::vector<NodeId> pre_activations;  // one per hidden layer
};

inline MlpTrace mlp_trace(Tape& tape, const MlpNodes& net, NodeId input) {
  if (tape.shape(input) != Shape{net.spec->input_dim(), 1}) {
    throw std::invalid_argument("mlp_forward: input shape " + to_string(tape.shape(input)) + " for network " +
                                net.spec->to_string());
  }
  MlpTrace trace;
  NodeId h = input;
  const std::size_t layers = net.weights.size();
  for (std::size_t k = 0; k < layers; ++k) {
    const NodeId z = tape.add(tape.matvec(net.weights[k], h), net.biases[k]);
    if (k + 1 < layers) {
      trace.pre_activations.push_back(z);
      h = tape.softplus(z);
    } else {
      h = z;
    }
  }
  trace.output = h;
  return trace;
}

inline NodeId mlp_forward(Tape& tape, const MlpNodes& net, NodeId input) { return mlp_trace(tape, net, input).output; }

/// Input Jacobian stored by rows: rows[i] is d output_i / d input, a vector
/// of length `cols`.
struct Jacobian {
  std::vector<NodeId> rows;
  std::uint32_t cols = 0;

  NodeId entry(Tape& tape, std::uint32_t i, std::uint32_t j) const { return tape.element(rows.at(i), j); }
};

/// d output / d input through the layer chain
///   W_L diag(s_{L-1}) W_{L-1} ... diag(s_1) W_1,  s_k = logistic(z_k),
/// evaluated row by row from the output side. Every factor is a tape node,
/// so the result is differentiable with respect to the parameters.
inline Jacobian mlp_input_jacobian(Tape& tape, const MlpNodes& net, const MlpTrace& trace) {
  const std::size_t layers = net.weights.size();
  std::vector<NodeId> slopes;
  slopes.reserve(trace.pre_activations.size());
  for (NodeId z : trace.pre_activations) slopes.push_back(tape.logistic(z));

  Jacobian jac;
  jac.cols = net.spec->input_dim();
  const std::uint32_t out = net.spec->output_dim();
  std::vector<double> unit(out, 0.0);
  for (std::uint32_t i = 0; i < out; ++i) {
    unit[i] = 1.0;
    NodeId u = tape.matvec_transposed(net.weights[layers - 1], tape.variable(unit));
    unit[i] = 0.0;
    for (std::size_t k = layers - 1; k-- > 0;) {
      u = tape.matvec_transposed(net.weights[k], tape.multiply(slopes[k], u));
    }
    jac.rows.push_back(u);
  }
  return jac;
}

inline Jacobian mlp_input_jacobian(Tape& tape, const MlpNodes& net, NodeId input) {
  return mlp_input_jacobian(tape, net, mlp_trace(tape, net, input));
}

/// Curl of a field from its 3x3 Jacobian J[i][j] = d F_i / d x_j.
inline NodeId curl_from_jacobian(Tape& tape, const Jacobian& j) {
  if (j.rows.size() != 3 || j.cols != 3) throw std::invalid_argument("curl_from_jacobian: 3x3 Jacobian required");
  const NodeId c0 = tape.subtract(j.entry(tape, 2, 1), j.entry(tape, 1, 2));
  const NodeId c1 = tape.subtract(j.entry(tape, 0, 2), j.entry(tape, 2, 0));
  const NodeId c2 = tape.subtract(j.entry(tape, 1, 0), j.entry(tape, 0, 1));
  return tape.concat({c0, c1, c2});
}

inline NodeId divergence_from_jacobian(Tape& tape, const Jacobian& j) {
  if (j.rows.size() != j.cols) throw std::invalid_argument("divergence_from_jacobian: square Jacobian required");
  NodeId acc = j.entry(tape, 0, 0);
  for (std::uint32_t i = 1; i < j.cols; ++i) acc = tape.add(acc, j.entry(tape, i, i));
  return acc;
}

}  // namespace modnode
