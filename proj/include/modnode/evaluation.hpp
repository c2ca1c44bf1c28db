#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "modnode/force_model.hpp"
#include "modnode/ground_truth.hpp"
#include "modnode/ode.hpp"

namespace modnode {

// ---------------------------------------------------------------------------
// Statistics
// ---------------------------------------------------------------------------

/// Quantile by linear interpolation between order statistics
/// (position q * (n - 1) in the sorted list).
inline double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw std::invalid_argument("quantile: empty list");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

inline double median(std::vector<double> values) { return quantile(std::move(values), 0.5); }

struct Summary {
  double median = 0.0;
  double quartile = 0.0;  // median minus lower quartile
  double mean = 0.0;
  double standard_error = 0.0;
};

inline Summary summarize(const std::vector<double>& values) {
  Summary s;
  if (values.empty()) return s;
  s.median = median(values);
  s.quartile = s.median - quantile(values, 0.25);
  double sum = 0.0;
  for (double v : values) sum += v;
  s.mean = sum / static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.standard_error = std::sqrt(ss / static_cast<double>(values.size() - 1) / static_cast<double>(values.size()));
  }
  return s;
}

// ---------------------------------------------------------------------------
// Test-set MSE
// ---------------------------------------------------------------------------

struct TestOptions {
  std::size_t n_test = 16;
  std::uint64_t seed = 2024;
  double inner_box = 1.6;       // initial conditions drawn from [-inner, inner]^6
  double box = 2.0;             // true path must stay in [-box, box]^3
  double horizon = 7.0;
  std::size_t sequence_length = 70;
  std::size_t containment_checks = 700;
  double model_rtol = 3e-3;
  double atol = 1e-9;
  double reference_rtol = 3e-3;    // true trajectories, as for training targets
  double containment_rtol = 1e-9;  // rejection test for initial conditions
  std::size_t max_draws = 100000;
  std::size_t max_model_steps = 100000;  // a model trajectory needing more counts as failed
};

/// Test initial conditions whose true trajectory remains inside the box.
inline std::vector<State> test_initial_conditions(Setup setup, const TestOptions& opt = {}) {
  std::mt19937_64 rng(opt.seed);
  std::uniform_real_distribution<double> u(-opt.inner_box, opt.inner_box);
  const auto checks = uniform_times(opt.horizon, opt.containment_checks);
  auto force = [setup](const Vec3& x, const Vec3& v) { return truth_force(setup, x, v); };
  std::vector<State> out;
  std::size_t draws = 0;
  while (out.size() < opt.n_test) {
    if (++draws > opt.max_draws) throw std::runtime_error("test_initial_conditions: rejection sampling exhausted");
    State s0;
    for (double& c : s0.x) c = u(rng);
    for (double& c : s0.v) c = u(rng);
    try {
      const Trajectory tr = dopri5_integrate(force, s0, checks, Dopri5Options{opt.containment_rtol, opt.atol});
      const bool inside = std::all_of(tr.states.begin(), tr.states.end(), [&](const State& s) {
        return std::all_of(s.x.begin(), s.x.end(), [&](double c) { return std::abs(c) <= opt.box; });
      });
      if (inside) out.push_back(s0);
    } catch (const IntegrationError&) {
    }
  }
  return out;
}

struct EvalReport {
  std::string model;
  std::string setup;
  std::uint64_t seed = 0;
  std::vector<double> mse;  // per successfully integrated trajectory
  std::size_t failures = 0;
  Summary summary;
  double wall_seconds = 0.0;
};

/// Mean of |x_model(t_n) - x_true(t_n)|^2 over the sample times of one
/// trajectory. `times` excludes t = 0.
template <typename F>
double trajectory_mse(F&& force, Setup setup, const State& s0, std::span<const double> times, const TestOptions& opt) {
  auto truth = [setup](const Vec3& x, const Vec3& v) { return truth_force(setup, x, v); };
  const Trajectory ref = dopri5_integrate(truth, s0, times, Dopri5Options{opt.reference_rtol, opt.atol});
  Dopri5Options model_opt{opt.model_rtol, opt.atol};
  model_opt.max_steps = opt.max_model_steps;
  const Trajectory pred = dopri5_integrate(force, s0, times, model_opt);
  double acc = 0.0;
  for (std::size_t i = 1; i < ref.states.size(); ++i) acc += squared_norm(pred.states[i].x - ref.states[i].x);
  return acc / static_cast<double>(ref.states.size() - 1);
}

/// Scores a force (model or truth) on fixed test initial conditions.
template <typename F>
EvalReport test_mse(F&& force, Setup setup, std::span<const State> initial, const TestOptions& opt = {}) {
  const auto start = std::chrono::steady_clock::now();
  EvalReport rep;
  rep.setup = std::string(to_string(setup));
  rep.seed = opt.seed;
  const auto times = uniform_times(opt.horizon, opt.sequence_length);
  for (const State& s0 : initial) {
    try {
      const double m = trajectory_mse(force, setup, s0, times, opt);
      if (std::isfinite(m)) {
        rep.mse.push_back(m);
      } else {
        ++rep.failures;
      }
    } catch (const IntegrationError&) {
      ++rep.failures;
    }
  }
  rep.summary = summarize(rep.mse);
  rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return rep;
}

inline EvalReport test_mse(const ForceModel& model, Setup setup, const TestOptions& opt = {}) {
  const auto ics = test_initial_conditions(setup, opt);
  ForceEvaluator eval(model);
  EvalReport rep = test_mse(eval, setup, ics, opt);
  rep.model = std::string(to_string(model.kind));
  return rep;
}

// ---------------------------------------------------------------------------
// Energy
// ---------------------------------------------------------------------------

struct EnergyPoint {
  double t = 0.0;
  double energy = 0.0;
};

/// E(t) = 1/2 |v|^2 + V(x) along the trajectory of `force`, sampled at
/// n_points uniform times in [0, horizon] (t = 0 included).
template <typename F, typename P>
std::vector<EnergyPoint> energy_trace(F&& force, P&& potential, const State& s0, double horizon, std::size_t n_points,
                                      const Dopri5Options& opt = {}) {
  if (n_points < 2) throw std::invalid_argument("energy_trace: need at least two points");
  const auto times = uniform_times(horizon, n_points - 1);
  const Trajectory tr = dopri5_integrate(force, s0, times, opt);
  std::vector<EnergyPoint> out;
  out.reserve(tr.times.size());
  for (std::size_t i = 0; i < tr.times.size(); ++i) {
    out.push_back({tr.times[i], 0.5 * squared_norm(tr.states[i].v) + potential(tr.states[i].x)});
  }
  return out;
}

/// Energy relative to the true potential of `setup`, as used to compare
/// models that learn shifted potentials.
template <typename F>
std::vector<EnergyPoint> energy_trace(F&& force, Setup setup, const State& s0, double horizon, std::size_t n_points,
                                      const Dopri5Options& opt = {}) {
  return energy_trace(std::forward<F>(force), [setup](const Vec3& x) { return truth_potential(setup, x); }, s0,
                      horizon, n_points, opt);
}

inline double max_energy_drift(const std::vector<EnergyPoint>& trace) {
  double worst = 0.0;
  for (const auto& p : trace) worst = std::max(worst, std::abs(p.energy - trace.front().energy));
  return worst;
}

// ---------------------------------------------------------------------------
// Field grids
// ---------------------------------------------------------------------------

enum class Field { potential, magnetic, drag };

inline std::string_view to_string(Field f) {
  switch (f) {
    case Field::potential: return "V";
    case Field::magnetic: return "B";
    case Field::drag: return "D";
  }
  return "?";
}

inline Field parse_field(std::string_view s) {
  if (s == "V" || s == "potential") return Field::potential;
  if (s == "B" || s == "magnetic") return Field::magnetic;
  if (s == "D" || s == "drag") return Field::drag;
  throw std::invalid_argument("unknown field '" + std::string(s) + "'");
}

/// Pointwise field accessors of a model or of a ground-truth setup. Drag is a
/// function of velocity; the grid then spans velocity space.
struct FieldSource {
  std::function<double(const Vec3&)> potential;
  std::function<Vec3(const Vec3&)> magnetic;
  std::function<double(const Vec3&)> drag;

  static FieldSource of(Setup s) {
    FieldSource f;
    f.potential = [s](const Vec3& x) { return truth_potential(s, x); };
    f.magnetic = [s](const Vec3& x) { return truth_B(s, x); };
    if (has_drag(s)) f.drag = [s](const Vec3& v) { return truth_drag_scalar(s, v); };
    return f;
  }

  /// The evaluator must outlive the returned source.
  static FieldSource of(ForceEvaluator& e) {
    FieldSource f;
    if (e.model().potential) f.potential = [&e](const Vec3& x) { return e.potential(x); };
    if (e.model().magnetic) f.magnetic = [&e](const Vec3& x) { return e.magnetic_field(x); };
    if (e.model().drag) f.drag = [&e](const Vec3& v) { return e.drag_coefficient(v); };
    return f;
  }
};

struct Region {
  Vec3 lo{-1.0, -1.0, -1.0};
  Vec3 hi{1.0, 1.0, 1.0};
};

struct FieldGrid {
  Field field = Field::potential;
  std::size_t resolution = 0;
  std::vector<Vec3> points;                // x-major order: index = (i * n + j) * n + k
  std::vector<std::vector<double>> values;  // 1 or 3 components per point
};

/// Regular resolution^3 grid over the region including its corners; a
/// resolution of 1 samples the region's center.
inline FieldGrid field_grid(const FieldSource& src, Field field, const Region& region, std::size_t resolution) {
  if (resolution == 0) throw std::invalid_argument("field_grid: resolution must be >= 1");
  const bool present = (field == Field::potential && src.potential) || (field == Field::magnetic && src.magnetic) ||
                       (field == Field::drag && src.drag);
  if (!present) throw std::invalid_argument("field_grid: field " + std::string(to_string(field)) + " not available");
  FieldGrid g;
  g.field = field;
  g.resolution = resolution;
  auto coord = [&](int axis, std::size_t i) {
    if (resolution == 1) return 0.5 * (region.lo[axis] + region.hi[axis]);
    return region.lo[axis] +
           (region.hi[axis] - region.lo[axis]) * static_cast<double>(i) / static_cast<double>(resolution - 1);
  };
  for (std::size_t i = 0; i < resolution; ++i) {
    for (std::size_t j = 0; j < resolution; ++j) {
      for (std::size_t k = 0; k < resolution; ++k) {
        const Vec3 p{coord(0, i), coord(1, j), coord(2, k)};
        g.points.push_back(p);
        switch (field) {
          case Field::potential: g.values.push_back({src.potential(p)}); break;
          case Field::drag: g.values.push_back({src.drag(p)}); break;
          case Field::magnetic: {
            const Vec3 b = src.magnetic(p);
            g.values.push_back({b[0], b[1], b[2]});
            break;
          }
        }
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Module recombination
// ---------------------------------------------------------------------------

/// New model with the potential (and its period) of one source and the
/// magnetic and drag modules of others; no retraining.
inline ForceModel combine_modules(const ForceModel& potential_src, const ForceModel& magnetic_src,
                                  const ForceModel& drag_src) {
  if (!potential_src.potential) throw std::invalid_argument("combine_modules: potential source has no potential");
  if (!magnetic_src.magnetic) throw std::invalid_argument("combine_modules: magnetic source has no magnetic module");
  if (!drag_src.drag) throw std::invalid_argument("combine_modules: drag source has no drag module");
  ForceModel m;
  m.kind = magnetic_src.kind;
  m.potential = potential_src.potential;
  m.period = potential_src.period;
  m.magnetic_kind = magnetic_src.magnetic_kind;
  m.magnetic = magnetic_src.magnetic;
  m.drag = drag_src.drag;
  m.validate();
  return m;
}

}  // namespace modnode
