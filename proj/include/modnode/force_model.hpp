#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "modnode/mlp.hpp"
#include "modnode/tape.hpp"
#include "modnode/vec3.hpp"

namespace modnode {

enum class ModelKind { magnetic, div_magnetic, vector, basic, periodic, sonode, sonode_x2, magnetic_lnn };

inline std::string_view to_string(ModelKind k) {
  switch (k) {
    case ModelKind::magnetic: return "magnetic";
    case ModelKind::div_magnetic: return "div-magnetic";
    case ModelKind::vector: return "vector";
    case ModelKind::basic: return "basic";
    case ModelKind::periodic: return "periodic";
    case ModelKind::sonode: return "sonode";
    case ModelKind::sonode_x2: return "sonode-x2";
    case ModelKind::magnetic_lnn: return "magnetic-lnn";
  }
  return "?";
}

inline ModelKind parse_model_kind(std::string_view name) {
  for (ModelKind k : {ModelKind::magnetic, ModelKind::div_magnetic, ModelKind::vector, ModelKind::basic,
                      ModelKind::periodic, ModelKind::sonode, ModelKind::sonode_x2, ModelKind::magnetic_lnn}) {
    if (to_string(k) == name) return k;
  }
  throw std::invalid_argument("unknown model kind '" + std::string(name) + "'");
}

enum class MagneticKind { none, direct, vector_potential };

/// A sum of force modules with unit mass and charge:
///   F = -grad V(x mod a) + v x B(x) - v D(v) + G(x, v)
/// where B is either learned directly or as the curl of a vector potential.
struct ForceModel {
  ModelKind kind = ModelKind::magnetic;
  std::optional<Mlp> potential;
  std::optional<Vec3> period;
  std::optional<Mlp> drag;
  MagneticKind magnetic_kind = MagneticKind::none;
  std::optional<Mlp> magnetic;
  std::optional<Mlp> generic;

  [[nodiscard]] bool empty() const { return !potential && !drag && !magnetic && !generic; }

  void validate() const {
    if (empty()) throw std::invalid_argument("ForceModel: no modules");
    auto expect = [](const std::optional<Mlp>& net, std::uint32_t in, std::uint32_t out, const char* what) {
      if (net && (net->spec().input_dim() != in || net->spec().output_dim() != out)) {
        throw std::invalid_argument(std::string("ForceModel: ") + what + " network must map " + std::to_string(in) +
                                    " -> " + std::to_string(out) + ", got " + net->spec().to_string());
      }
    };
    expect(potential, 3, 1, "potential");
    expect(drag, 3, 1, "drag");
    expect(magnetic, 3, 3, "magnetic");
    expect(generic, 6, 3, "generic");
    if (magnetic.has_value() != (magnetic_kind != MagneticKind::none)) {
      throw std::invalid_argument("ForceModel: magnetic kind and magnetic network disagree");
    }
    if (period) {
      if (!potential) throw std::invalid_argument("ForceModel: period without a potential");
      for (double a : *period) {
        if (!(a > 0.0)) throw std::invalid_argument("ForceModel: period components must be positive");
      }
    }
  }

  /// Networks in canonical order: potential, drag, magnetic, generic.
  [[nodiscard]] std::vector<const Mlp*> modules() const {
    std::vector<const Mlp*> out;
    for (const auto* m : {&potential, &drag, &magnetic, &generic}) {
      if (*m) out.push_back(&**m);
    }
    return out;
  }
  std::vector<Mlp*> modules() {
    std::vector<Mlp*> out;
    for (auto* m : {&potential, &drag, &magnetic, &generic}) {
      if (*m) out.push_back(&**m);
    }
    return out;
  }

  [[nodiscard]] std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const Mlp* m : modules()) n += m->spec().parameter_count();
    return n;
  }

  [[nodiscard]] std::vector<double> flat_parameters() const {
    std::vector<double> out;
    out.reserve(parameter_count());
    for (const Mlp* m : modules()) out.insert(out.end(), m->params().begin(), m->params().end());
    return out;
  }

  void set_flat_parameters(std::span<const double> flat) {
    if (flat.size() != parameter_count()) throw std::invalid_argument("ForceModel: parameter vector size mismatch");
    std::size_t off = 0;
    for (Mlp* m : modules()) {
      auto p = m->params();
      std::copy(flat.begin() + static_cast<std::ptrdiff_t>(off),
                flat.begin() + static_cast<std::ptrdiff_t>(off + p.size()), p.begin());
      off += p.size();
    }
  }
};

/// Per-kind default learning rates.
inline double default_learning_rate(ModelKind k) {
  switch (k) {
    case ModelKind::magnetic:
    case ModelKind::div_magnetic: return 15e-3;
    case ModelKind::vector:
    case ModelKind::magnetic_lnn: return 10e-3;
    case ModelKind::basic: return 5e-3;
    case ModelKind::periodic: return 8e-3;
    case ModelKind::sonode:
    case ModelKind::sonode_x2: return 1e-3;
  }
  return 1e-3;
}

namespace detail {
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}
}  // namespace detail

/// Fresh model of the given kind with the network shapes of the presets.
inline ForceModel make_model(ModelKind kind, std::uint64_t seed, Vec3 period = {2.0, 2.0, 2.0}) {
  const MlpSpec small_scalar = MlpSpec::parse("3-25-25-25-1");
  const MlpSpec small_vector = MlpSpec::parse("3-25-25-25-3");
  auto init = [&](const MlpSpec& spec, std::uint64_t slot) {
    return Mlp::initialized(spec, detail::splitmix64(seed * 8 + slot));
  };
  ForceModel m;
  m.kind = kind;
  switch (kind) {
    case ModelKind::magnetic:
    case ModelKind::div_magnetic:
    case ModelKind::periodic:
      m.potential = init(small_scalar, 0);
      m.drag = init(small_scalar, 1);
      m.magnetic_kind = MagneticKind::direct;
      m.magnetic = init(small_vector, 2);
      if (kind == ModelKind::periodic) m.period = period;
      break;
    case ModelKind::vector:
      m.potential = init(small_scalar, 0);
      m.drag = init(small_scalar, 1);
      m.magnetic_kind = MagneticKind::vector_potential;
      m.magnetic = init(small_vector, 2);
      break;
    case ModelKind::magnetic_lnn:
      m.potential = init(small_scalar, 0);
      m.magnetic_kind = MagneticKind::vector_potential;
      m.magnetic = init(small_vector, 2);
      break;
    case ModelKind::basic:
      m.potential = init(MlpSpec::parse("3-40-40-40-1"), 0);
      m.generic = init(MlpSpec::parse("6-40-40-40-3"), 3);
      break;
    case ModelKind::sonode:
    case ModelKind::sonode_x2:
      m.generic = init(MlpSpec::parse("6-120-120-120-3"), 3);
      break;
  }
  return m;
}

/// A model's parameters recorded as tape leaves.
struct BoundModel {
  const ForceModel* model = nullptr;
  std::optional<MlpNodes> potential;
  std::optional<MlpNodes> drag;
  std::optional<MlpNodes> magnetic;
  std::optional<MlpNodes> generic;
  std::optional<NodeId> period;
};

inline BoundModel bind(Tape& tape, const ForceModel& model) {
  BoundModel b;
  b.model = &model;
  if (model.potential) b.potential = bind(tape, *model.potential);
  if (model.drag) b.drag = bind(tape, *model.drag);
  if (model.magnetic) b.magnetic = bind(tape, *model.magnetic);
  if (model.generic) b.generic = bind(tape, *model.generic);
  if (model.period) b.period = tape.variable(std::span<const double>(*model.period));
  return b;
}

/// Gradient of the whole model, ordered like ForceModel::flat_parameters().
inline void accumulate_gradient(const Tape& tape, const BoundModel& b, std::span<double> grad) {
  std::size_t off = 0;
  for (const auto* nodes : {&b.potential, &b.drag, &b.magnetic, &b.generic}) {
    if (!*nodes) continue;
    const std::size_t n = (*nodes)->spec->parameter_count();
    accumulate_gradient(tape, **nodes, grad.subspan(off, n));
    off += n;
  }
}

/// x mod a per component; result in [0, a).
inline NodeId periodic_wrap(Tape& tape, NodeId x, NodeId period) { return tape.floor_mod(x, period); }

inline NodeId potential_force(Tape& tape, const BoundModel& b, NodeId x) {
  const NodeId at = b.period ? periodic_wrap(tape, x, *b.period) : x;
  const Jacobian grad = mlp_input_jacobian(tape, *b.potential, at);
  return tape.negate(grad.rows[0]);
}

/// -v D(v)
inline NodeId drag_force(Tape& tape, const MlpNodes& drag_net, NodeId v) {
  return tape.negate(tape.scale(mlp_forward(tape, drag_net, v), v));
}

/// v x B(x) with B read directly from the network.
inline NodeId magnetic_force_direct(Tape& tape, const MlpNodes& field_net, NodeId x, NodeId v) {
  return tape.cross(v, mlp_forward(tape, field_net, x));
}

/// curl A(x) for a vector-potential network.
inline NodeId field_from_vector_potential(Tape& tape, const MlpNodes& a_net, NodeId x) {
  return curl_from_jacobian(tape, mlp_input_jacobian(tape, a_net, x));
}

/// v x (curl A(x)).
inline NodeId magnetic_force_vector(Tape& tape, const MlpNodes& a_net, NodeId x, NodeId v) {
  return tape.cross(v, field_from_vector_potential(tape, a_net, x));
}

/// B(x) of whichever magnetic representation the model carries.
inline NodeId magnetic_field(Tape& tape, const BoundModel& b, NodeId x) {
  if (!b.magnetic) throw std::invalid_argument("magnetic_field: model has no magnetic module");
  if (b.model->magnetic_kind == MagneticKind::vector_potential) return field_from_vector_potential(tape, *b.magnetic, x);
  return mlp_forward(tape, *b.magnetic, x);
}

/// Total acceleration of all active modules at (x, v).
inline NodeId total_force(Tape& tape, const BoundModel& b, NodeId x, NodeId v) {
  std::optional<NodeId> acc;
  auto accumulate = [&](NodeId term) { acc = acc ? tape.add(*acc, term) : term; };
  if (b.potential) accumulate(potential_force(tape, b, x));
  if (b.magnetic) {
    accumulate(b.model->magnetic_kind == MagneticKind::vector_potential ? magnetic_force_vector(tape, *b.magnetic, x, v)
                                                                        : magnetic_force_direct(tape, *b.magnetic, x, v));
  }
  if (b.drag) accumulate(drag_force(tape, *b.drag, v));
  if (b.generic) accumulate(mlp_forward(tape, *b.generic, tape.concat({x, v})));
  if (!acc) throw std::invalid_argument("total_force: model has no modules");
  return *acc;
}

/// Evaluates a frozen model without gradients. Parameters are recorded once;
/// each query rewinds the tape to just after them.
class ForceEvaluator {
 public:
  explicit ForceEvaluator(ForceModel model) : state_(std::make_unique<State>()) {
    model.validate();
    state_->model = std::move(model);
    state_->bound = bind(state_->tape, state_->model);
    state_->after_params = state_->tape.mark();
  }

  [[nodiscard]] const ForceModel& model() const { return state_->model; }

  Vec3 operator()(const Vec3& x, const Vec3& v) {
    return query([&](Tape& t, NodeId xn, NodeId vn) { return total_force(t, state_->bound, xn, vn); }, x, v);
  }

  /// Learned potential value (at the wrapped position for periodic models).
  double potential(const Vec3& x) {
    require(state_->bound.potential, "potential");
    return query(
        [&](Tape& t, NodeId xn, NodeId) {
          const NodeId at = state_->bound.period ? periodic_wrap(t, xn, *state_->bound.period) : xn;
          return mlp_forward(t, *state_->bound.potential, at);
        },
        x, {})[0];
  }

  Vec3 magnetic_field(const Vec3& x) {
    require(state_->bound.magnetic, "magnetic");
    return query([&](Tape& t, NodeId xn, NodeId) { return modnode::magnetic_field(t, state_->bound, xn); }, x, {});
  }

  double drag_coefficient(const Vec3& v) {
    require(state_->bound.drag, "drag");
    return query([&](Tape& t, NodeId, NodeId vn) { return mlp_forward(t, *state_->bound.drag, vn); }, {}, v)[0];
  }

 private:
  struct State {
    ForceModel model;
    Tape tape;
    BoundModel bound;
    Tape::Mark after_params;
  };

  template <typename F>
  Vec3 query(F&& record, const Vec3& x, const Vec3& v) {
    Tape& t = state_->tape;
    t.rewind(state_->after_params);
    const NodeId xn = t.variable(std::span<const double>(x));
    const NodeId vn = t.variable(std::span<const double>(v));
    const NodeId out = record(t, xn, vn);
    const auto val = t.value(out);
    Vec3 r{0.0, 0.0, 0.0};
    std::copy(val.begin(), val.end(), r.begin());
    return r;
  }

  static void require(const std::optional<MlpNodes>& n, const char* what) {
    if (!n) throw std::invalid_argument(std::string("ForceEvaluator: model has no ") + what + " module");
  }

  std::unique_ptr<State> state_;
};

}  // namespace modnode
