#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace modnode {

using NodeId = std::uint32_t;

enum class OpKind : std::uint8_t {
  leaf,
  add,
  subtract,
  multiply,      // elementwise
  scale,         // scalar node times tensor
  scale_const,   // constant times tensor
  matvec,        // W x
  matvec_t,      // W^T y
  dot,
  cross,
  softplus,
  logistic,
  sum,
  mean,
  squared_norm,
  floor_mod,     // x mod a, a is treated as a constant
  negate,
  concat,
  slice,
};

struct Shape {
  std::uint32_t rows = 1;
  std::uint32_t cols = 1;

  [[nodiscard]] constexpr std::size_t size() const { return std::size_t{rows} * cols; }
  [[nodiscard]] constexpr bool is_scalar() const { return rows == 1 && cols == 1; }
  [[nodiscard]] constexpr bool is_vector() const { return cols == 1; }
  friend constexpr bool operator==(Shape, Shape) = default;
};

inline std::string to_string(Shape s) {
  return std::to_string(s.rows) + "x" + std::to_string(s.cols);
}

/// Numerically stable log(1 + e^z).
inline double softplus(double z) {
  return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)));
}

inline double logistic(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

/// Dot product with four interleaved partial sums (vectorizes without
/// reassociating compiler flags; the summation order is fixed).
inline double dot_product(const double* a, const double* b, std::size_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t j = 0;
  for (; j + 4 <= n; j += 4) {
    s0 += a[j] * b[j];
    s1 += a[j + 1] * b[j + 1];
    s2 += a[j + 2] * b[j + 2];
    s3 += a[j + 3] * b[j + 3];
  }
  for (; j < n; ++j) s0 += a[j] * b[j];
  return (s0 + s1) + (s2 + s3);
}

/// Reverse-mode differentiation record over small dense float64 tensors.
///
/// Nodes are appended in evaluation order, so every input id of node k is
/// smaller than k. Values and adjoints live in two flat arenas addressed by
/// per-node offsets; `rewind` truncates the tape back to an earlier mark and
/// keeps the allocated capacity, which makes repeated evaluation cheap.
/// Matrices are stored row-major. Shapes never broadcast.
class Tape {
 public:
  struct Mark {
    std::size_t nodes = 0;
    std::size_t values = 0;
    std::size_t inputs = 0;
  };

  Tape() = default;

  // -- leaves -------------------------------------------------------------

  NodeId variable(std::span<const double> values, Shape shape) {
    if (values.size() != shape.size()) {
      throw std::invalid_argument("Tape::variable: " + std::to_string(values.size()) +
                                  " values for shape " + to_string(shape));
    }
    const NodeId id = push(OpKind::leaf, shape, {});
    std::copy(values.begin(), values.end(), values_.begin() + static_cast<std::ptrdiff_t>(nodes_[id].offset));
    return id;
  }
  NodeId variable(std::span<const double> values) {
    return variable(values, Shape{static_cast<std::uint32_t>(values.size()), 1});
  }
  NodeId variable(std::initializer_list<double> values) {
    return variable(std::span<const double>(values.begin(), values.size()));
  }
  NodeId scalar(double value) { return variable(std::span<const double>(&value, 1)); }
  NodeId matrix(std::span<const double> row_major, std::uint32_t rows, std::uint32_t cols) {
    return variable(row_major, Shape{rows, cols});
  }

  // -- operations ---------------------------------------------------------

  NodeId add(NodeId a, NodeId b) { return elementwise(OpKind::add, a, b); }
  NodeId subtract(NodeId a, NodeId b) { return elementwise(OpKind::subtract, a, b); }
  NodeId multiply(NodeId a, NodeId b) { return elementwise(OpKind::multiply, a, b); }

  /// s * x where s is a scalar node.
  NodeId scale(NodeId s, NodeId x) {
    check(s);
    check(x);
    if (!shape(s).is_scalar()) throw std::invalid_argument("Tape::scale: factor must be scalar, got " + to_string(shape(s)));
    const NodeId id = push(OpKind::scale, shape(x), {s, x});
    const double f = val(s)[0];
    const double* in = val(x);
    double* out = val(id);
    for (std::size_t i = 0, n = size(id); i < n; ++i) out[i] = f * in[i];
    return id;
  }

  NodeId scale(double c, NodeId x) {
    check(x);
    const NodeId id = push(OpKind::scale_const, shape(x), {x});
    nodes_[id].aux = c;
    const double* in = val(x);
    double* out = val(id);
    for (std::size_t i = 0, n = size(id); i < n; ++i) out[i] = c * in[i];
    return id;
  }

  NodeId matvec(NodeId w, NodeId x) {
    check(w);
    check(x);
    const Shape ws = shape(w);
    const Shape xs = shape(x);
    if (!xs.is_vector() || xs.rows != ws.cols) {
      throw std::invalid_argument("Tape::matvec: matrix " + to_string(ws) + " times " + to_string(xs));
    }
    const NodeId id = push(OpKind::matvec, Shape{ws.rows, 1}, {w, x});
    const double* wv = val(w);
    const double* xv = val(x);
    double* out = val(id);
    for (std::uint32_t i = 0; i < ws.rows; ++i) out[i] = dot_product(wv + std::size_t{i} * ws.cols, xv, ws.cols);
    return id;
  }

  /// W^T y, the other association order of a matrix-vector product.
  NodeId matvec_transposed(NodeId w, NodeId y) {
    check(w);
    check(y);
    const Shape ws = shape(w);
    const Shape ys = shape(y);
    if (!ys.is_vector() || ys.rows != ws.rows) {
      throw std::invalid_argument("Tape::matvec_transposed: matrix " + to_string(ws) + "^T times " + to_string(ys));
    }
    const NodeId id = push(OpKind::matvec_t, Shape{ws.cols, 1}, {w, y});
    const double* wv = val(w);
    const double* yv = val(y);
    double* out = val(id);
    std::fill(out, out + ws.cols, 0.0);
    for (std::uint32_t i = 0; i < ws.rows; ++i) {
      const double* row = wv + std::size_t{i} * ws.cols;
      const double yi = yv[i];
      for (std::uint32_t j = 0; j < ws.cols; ++j) out[j] += row[j] * yi;
    }
    return id;
  }

  NodeId dot(NodeId a, NodeId b) {
    check_same(a, b, "dot");
    if (!shape(a).is_vector()) throw std::invalid_argument("Tape::dot: vectors required");
    const NodeId id = push(OpKind::dot, Shape{}, {a, b});
    const double* av = val(a);
    const double* bv = val(b);
    double acc = 0.0;
    for (std::size_t i = 0, n = size(a); i < n; ++i) acc += av[i] * bv[i];
    val(id)[0] = acc;
    return id;
  }

  NodeId cross(NodeId a, NodeId b) {
    check_same(a, b, "cross");
    if (shape(a) != Shape{3, 1}) throw std::invalid_argument("Tape::cross: length-3 vectors required, got " + to_string(shape(a)));
    const NodeId id = push(OpKind::cross, Shape{3, 1}, {a, b});
    const double* u = val(a);
    const double* v = val(b);
    double* out = val(id);
    out[0] = u[1] * v[2] - u[2] * v[1];
    out[1] = u[2] * v[0] - u[0] * v[2];
    out[2] = u[0] * v[1] - u[1] * v[0];
    return id;
  }

  NodeId softplus(NodeId x) { return unary(OpKind::softplus, x, [](double z) { return modnode::softplus(z); }); }
  NodeId logistic(NodeId x) { return unary(OpKind::logistic, x, [](double z) { return modnode::logistic(z); }); }
  NodeId negate(NodeId x) { return unary(OpKind::negate, x, [](double z) { return -z; }); }

  NodeId sum(NodeId x) { return reduce(OpKind::sum, x, 1.0); }
  NodeId mean(NodeId x) { return reduce(OpKind::mean, x, 1.0 / static_cast<double>(size(x))); }

  NodeId squared_norm(NodeId x) {
    check(x);
    const NodeId id = push(OpKind::squared_norm, Shape{}, {x});
    const double* xv = val(x);
    double acc = 0.0;
    for (std::size_t i = 0, n = size(x); i < n; ++i) acc += xv[i] * xv[i];
    val(id)[0] = acc;
    return id;
  }

  /// Floor modulus x - a*floor(x/a), result in [0, a). The divisor node is a
  /// constant: no adjoint flows into it, and d/dx is taken as exactly 1.
  NodeId floor_mod(NodeId x, NodeId divisor) {
    check_same(x, divisor, "floor_mod");
    const double* dv = val(divisor);
    for (std::size_t i = 0, n = size(x); i < n; ++i) {
      if (!(dv[i] > 0.0)) throw std::invalid_argument("Tape::floor_mod: divisor must be positive");
    }
    const NodeId id = push(OpKind::floor_mod, shape(x), {x, divisor});
    const double* xv = val(x);
    dv = val(divisor);
    double* out = val(id);
    for (std::size_t i = 0, n = size(x); i < n; ++i) {
      double r = xv[i] - dv[i] * std::floor(xv[i] / dv[i]);
      if (r >= dv[i]) r -= dv[i];  // roundoff can land exactly on a
      if (r < 0.0) r = 0.0;
      out[i] = r;
    }
    return id;
  }

  /// Concatenates vectors (or scalars) into one column vector.
  NodeId concat(std::span<const NodeId> parts) {
    if (parts.empty()) throw std::invalid_argument("Tape::concat: no inputs");
    std::uint32_t total = 0;
    for (NodeId p : parts) {
      check(p);
      if (!shape(p).is_vector()) throw std::invalid_argument("Tape::concat: vector inputs required");
      total += shape(p).rows;
    }
    const NodeId id = push(OpKind::concat, Shape{total, 1}, parts);
    double* out = val(id);
    for (NodeId p : parts) {
      const double* pv = val(p);
      out = std::copy(pv, pv + size(p), out);
    }
    return id;
  }
  NodeId concat(std::initializer_list<NodeId> parts) {
    return concat(std::span<const NodeId>(parts.begin(), parts.size()));
  }

  NodeId slice(NodeId x, std::uint32_t start, std::uint32_t length) {
    check(x);
    if (!shape(x).is_vector() || length == 0 || start + length > shape(x).rows) {
      throw std::invalid_argument("Tape::slice: [" + std::to_string(start) + ", +" + std::to_string(length) +
                                  ") out of range for " + to_string(shape(x)));
    }
    const NodeId id = push(OpKind::slice, Shape{length, 1}, {x});
    nodes_[id].aux = static_cast<double>(start);
    const double* xv = val(x) + start;
    std::copy(xv, xv + length, val(id));
    return id;
  }
  NodeId element(NodeId x, std::uint32_t index) { return slice(x, index, 1); }

  // -- reverse pass ---------------------------------------------------------

  /// Zeroes all adjoints, seeds the scalar root with 1 and propagates to every
  /// node with a smaller id. Afterwards `adjoint(id)` holds d root / d id.
  void backward(NodeId root) {
    check(root);
    if (!shape(root).is_scalar()) {
      throw std::invalid_argument("Tape::backward: root must be scalar, got " + to_string(shape(root)));
    }
    adjoints_.assign(values_.size(), 0.0);
    adj(root)[0] = 1.0;
    for (std::size_t k = root + 1; k-- > 0;) propagate(static_cast<NodeId>(k));
  }

  // -- inspection ---------------------------------------------------------

  [[nodiscard]] std::size_t node_count() const { return nodes_.size(); }
  [[nodiscard]] Shape shape(NodeId id) const { return nodes_[id].shape; }
  [[nodiscard]] std::size_t size(NodeId id) const { return nodes_[id].shape.size(); }
  [[nodiscard]] OpKind kind(NodeId id) const { return nodes_[id].kind; }
  [[nodiscard]] std::span<const NodeId> inputs(NodeId id) const {
    return {inputs_.data() + nodes_[id].in_begin, nodes_[id].in_count};
  }
  [[nodiscard]] std::span<const double> value(NodeId id) const {
    return {values_.data() + nodes_[id].offset, size(id)};
  }
  [[nodiscard]] double scalar_value(NodeId id) const { return values_[nodes_[id].offset]; }
  [[nodiscard]] std::span<const double> adjoint(NodeId id) const {
    if (adjoints_.size() < nodes_[id].offset + size(id)) {
      throw std::logic_error("Tape::adjoint: no backward pass covers this node");
    }
    return {adjoints_.data() + nodes_[id].offset, size(id)};
  }

  [[nodiscard]] Mark mark() const { return Mark{nodes_.size(), values_.size(), inputs_.size()}; }
  void rewind(Mark m) {
    nodes_.resize(m.nodes);
    values_.resize(m.values);
    inputs_.resize(m.inputs);
    adjoints_.clear();
  }
  void clear() { rewind(Mark{}); }

 private:
  struct Node {
    OpKind kind = OpKind::leaf;
    Shape shape;
    std::size_t offset = 0;
    std::uint32_t in_begin = 0;
    std::uint32_t in_count = 0;
    double aux = 0.0;
  };

  void check(NodeId id) const {
    if (id >= nodes_.size()) throw std::out_of_range("Tape: unknown node id " + std::to_string(id));
  }
  void check_same(NodeId a, NodeId b, const char* what) const {
    check(a);
    check(b);
    if (shape(a) != shape(b)) {
      throw std::invalid_argument(std::string("Tape::") + what + ": shape mismatch " + to_string(shape(a)) + " vs " +
                                  to_string(shape(b)));
    }
  }

  NodeId push(OpKind kind, Shape shape, std::span<const NodeId> in) {
    Node n;
    n.kind = kind;
    n.shape = shape;
    n.offset = values_.size();
    n.in_begin = static_cast<std::uint32_t>(inputs_.size());
    n.in_count = static_cast<std::uint32_t>(in.size());
    inputs_.insert(inputs_.end(), in.begin(), in.end());
    values_.resize(values_.size() + shape.size());
    nodes_.push_back(n);
    return static_cast<NodeId>(nodes_.size() - 1);
  }
  NodeId push(OpKind kind, Shape shape, std::initializer_list<NodeId> in) {
    return push(kind, shape, std::span<const NodeId>(in.begin(), in.size()));
  }

  double* val(NodeId id) { return values_.data() + nodes_[id].offset; }
  [[nodiscard]] const double* val(NodeId id) const { return values_.data() + nodes_[id].offset; }
  double* adj(NodeId id) { return adjoints_.data() + nodes_[id].offset; }

  NodeId elementwise(OpKind kind, NodeId a, NodeId b) {
    check_same(a, b, "elementwise");
    const NodeId id = push(kind, shape(a), {a, b});
    const double* av = val(a);
    const double* bv = val(b);
    double* out = val(id);
    const std::size_t n = size(id);
    switch (kind) {
      case OpKind::add:
        for (std::size_t i = 0; i < n; ++i) out[i] = av[i] + bv[i];
        break;
      case OpKind::subtract:
        for (std::size_t i = 0; i < n; ++i) out[i] = av[i] - bv[i];
        break;
      default:
        for (std::size_t i = 0; i < n; ++i) out[i] = av[i] * bv[i];
        break;
    }
    return id;
  }

  template <typename F>
  NodeId unary(OpKind kind, NodeId x, F f) {
    check(x);
    const NodeId id = push(kind, shape(x), {x});
    const double* in = val(x);
    double* out = val(id);
    for (std::size_t i = 0, n = size(id); i < n; ++i) out[i] = f(in[i]);
    return id;
  }

  NodeId reduce(OpKind kind, NodeId x, double factor) {
    check(x);
    const NodeId id = push(kind, Shape{}, {x});
    const double* xv = val(x);
    double acc = 0.0;
    for (std::size_t i = 0, n = size(x); i < n; ++i) acc += xv[i];
    val(id)[0] = acc * factor;
    return id;
  }

  void propagate(NodeId id) {
    const Node& node = nodes_[id];
    if (node.kind == OpKind::leaf) return;
    const double* g = adj(id);
    const NodeId* in = inputs_.data() + node.in_begin;
    const std::size_t n = node.shape.size();
    switch (node.kind) {
      case OpKind::leaf:
        break;
      case OpKind::add: {
        double* ga = adj(in[0]);
        double* gb = adj(in[1]);
        for (std::size_t i = 0; i < n; ++i) {
          ga[i] += g[i];
          gb[i] += g[i];
        }
        break;
      }
      case OpKind::subtract: {
        double* ga = adj(in[0]);
        double* gb = adj(in[1]);
        for (std::size_t i = 0; i < n; ++i) {
          ga[i] += g[i];
          gb[i] -= g[i];
        }
        break;
      }
      case OpKind::multiply: {
        const double* av = val(in[0]);
        const double* bv = val(in[1]);
        double* ga = adj(in[0]);
        double* gb = adj(in[1]);
        for (std::size_t i = 0; i < n; ++i) {
          ga[i] += g[i] * bv[i];
          gb[i] += g[i] * av[i];
        }
        break;
      }
      case OpKind::scale: {
        const double f = val(in[0])[0];
        const double* xv = val(in[1]);
        double* gx = adj(in[1]);
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          acc += g[i] * xv[i];
          gx[i] += f * g[i];
        }
        adj(in[0])[0] += acc;
        break;
      }
      case OpKind::scale_const: {
        double* gx = adj(in[0]);
        for (std::size_t i = 0; i < n; ++i) gx[i] += node.aux * g[i];
        break;
      }
      case OpKind::matvec: {
        const Shape ws = nodes_[in[0]].shape;
        const double* wv = val(in[0]);
        const double* xv = val(in[1]);
        double* gw = adj(in[0]);
        double* gx = adj(in[1]);
        for (std::uint32_t i = 0; i < ws.rows; ++i) {
          const double gi = g[i];
          const double* row = wv + std::size_t{i} * ws.cols;
          double* grow = gw + std::size_t{i} * ws.cols;
          for (std::uint32_t j = 0; j < ws.cols; ++j) {
            grow[j] += gi * xv[j];
            gx[j] += gi * row[j];
          }
        }
        break;
      }
      case OpKind::matvec_t: {
        const Shape ws = nodes_[in[0]].shape;
        const double* wv = val(in[0]);
        const double* yv = val(in[1]);
        double* gw = adj(in[0]);
        double* gy = adj(in[1]);
        for (std::uint32_t i = 0; i < ws.rows; ++i) {
          const double yi = yv[i];
          const double* row = wv + std::size_t{i} * ws.cols;
          double* grow = gw + std::size_t{i} * ws.cols;
          for (std::uint32_t j = 0; j < ws.cols; ++j) grow[j] += yi * g[j];
          gy[i] += dot_product(row, g, ws.cols);
        }
        break;
      }
      case OpKind::dot: {
        const std::size_t m = nodes_[in[0]].shape.size();
        const double* av = val(in[0]);
        const double* bv = val(in[1]);
        double* ga = adj(in[0]);
        double* gb = adj(in[1]);
        for (std::size_t i = 0; i < m; ++i) {
          ga[i] += g[0] * bv[i];
          gb[i] += g[0] * av[i];
        }
        break;
      }
      case OpKind::cross: {
        // d(u x v) contracted with g: gu = v x g, gv = g x u
        const double* u = val(in[0]);
        const double* v = val(in[1]);
        double* gu = adj(in[0]);
        double* gv = adj(in[1]);
        gu[0] += v[1] * g[2] - v[2] * g[1];
        gu[1] += v[2] * g[0] - v[0] * g[2];
        gu[2] += v[0] * g[1] - v[1] * g[0];
        gv[0] += g[1] * u[2] - g[2] * u[1];
        gv[1] += g[2] * u[0] - g[0] * u[2];
        gv[2] += g[0] * u[1] - g[1] * u[0];
        break;
      }
      case OpKind::softplus: {
        const double* xv = val(in[0]);
        double* gx = adj(in[0]);
        for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * modnode::logistic(xv[i]);
        break;
      }
      case OpKind::logistic: {
        const double* yv = val(id);
        double* gx = adj(in[0]);
        for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * yv[i] * (1.0 - yv[i]);
        break;
      }
      case OpKind::sum:
      case OpKind::mean: {
        const std::size_t m = nodes_[in[0]].shape.size();
        const double d = node.kind == OpKind::sum ? g[0] : g[0] / static_cast<double>(m);
        double* gx = adj(in[0]);
        for (std::size_t i = 0; i < m; ++i) gx[i] += d;
        break;
      }
      case OpKind::squared_norm: {
        const std::size_t m = nodes_[in[0]].shape.size();
        const double* xv = val(in[0]);
        double* gx = adj(in[0]);
        for (std::size_t i = 0; i < m; ++i) gx[i] += 2.0 * g[0] * xv[i];
        break;
      }
      case OpKind::floor_mod: {
        double* gx = adj(in[0]);
        for (std::size_t i = 0; i < n; ++i) gx[i] += g[i];
        break;
      }
      case OpKind::negate: {
        double* gx = adj(in[0]);
        for (std::size_t i = 0; i < n; ++i) gx[i] -= g[i];
        break;
      }
      case OpKind::concat: {
        const double* gp = g;
        for (std::uint32_t k = 0; k < node.in_count; ++k) {
          const std::size_t m = nodes_[in[k]].shape.size();
          double* gx = adj(in[k]);
          for (std::size_t i = 0; i < m; ++i) gx[i] += gp[i];
          gp += m;
        }
        break;
      }
      case OpKind::slice: {
        double* gx = adj(in[0]) + static_cast<std::size_t>(node.aux);
        for (std::size_t i = 0; i < n; ++i) gx[i] += g[i];
        break;
      }
    }
  }

  std::vector<Node> nodes_;
  std::vector<NodeId> inputs_;
  std::vector<double> values_;
  std::vector<double> adjoints_;
};

/// Relative discrepancy used by gradient checks: |a - b| / max(|a|, |b|, floor).
inline double relative_error(double a, double b, double floor = 1e-7) {
  const double scale = std::max({std::abs(a), std::abs(b), floor});
  return std::abs(a - b) / scale;
}

/// Compares the tape gradient of a scalar function against central finite
/// differences, coordinate by coordinate, and returns the worst relative error.
///
/// `f(tape, x)` records the function for input node `x` (a column vector) and
/// returns the scalar root.
template <typename F>
double grad_check(F&& f, std::span<const double> point, double epsilon) {
  if (!(epsilon > 0.0)) throw std::invalid_argument("grad_check: epsilon must be positive");
  Tape tape;
  const NodeId x = tape.variable(point);
  const NodeId root = f(tape, x);
  tape.backward(root);
  const std::vector<double> analytic(tape.adjoint(x).begin(), tape.adjoint(x).end());

  auto evaluate = [&](const std::vector<double>& p) {
    Tape t;
    const NodeId xi = t.variable(p);
    return t.scalar_value(f(t, xi));
  };

  std::vector<double> probe(point.begin(), point.end());
  double worst = 0.0;
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double saved = probe[i];
    probe[i] = saved + epsilon;
    const double up = evaluate(probe);
    probe[i] = saved - epsilon;
    const double down = evaluate(probe);
    probe[i] = saved;
    const double numeric = (up - down) / (2.0 * epsilon);
    worst = std::max(worst, relative_error(analytic[i], numeric));
  }
  return worst;
}

}  // namespace modnode
