#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "modnode/tape.hpp"
#include "modnode/vec3.hpp"

namespace modnode {

struct State {
  Vec3 x{};
  Vec3 v{};
};

/// Sample times (starting at 0) with one state per time.
struct Trajectory {
  std::vector<double> times;
  std::vector<State> states;
};

/// Raised when the adaptive solver cannot make progress.
class IntegrationError : public std::runtime_error {
 public:
  IntegrationError(double t, const std::string& why)
      : std::runtime_error("integration failed at t=" + std::to_string(t) + ": " + why), t_(t) {}
  [[nodiscard]] double time() const { return t_; }

 private:
  double t_;
};

struct Dopri5Options {
  double rtol = 3e-3;
  double atol = 1e-9;
  double min_step = 1e-12;
  std::size_t max_steps = 1'000'000;
};

struct Dopri5Stats {
  std::size_t accepted = 0;
  std::size_t rejected = 0;
  std::size_t evaluations = 0;
};

namespace detail {

using Y = std::array<double, 6>;

inline Y pack(const State& s) { return {s.x[0], s.x[1], s.x[2], s.v[0], s.v[1], s.v[2]}; }
inline State unpack(const Y& y) { return {{y[0], y[1], y[2]}, {y[3], y[4], y[5]}}; }

template <typename F>
Y derivative(F& force, const Y& y) {
  const Vec3 a = force(Vec3{y[0], y[1], y[2]}, Vec3{y[3], y[4], y[5]});
  return {y[3], y[4], y[5], a[0], a[1], a[2]};
}

// Dormand-Prince 5(4) tableau.
struct DP {
  static constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
  static constexpr double a21 = 1.0 / 5;
  static constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
  static constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
  static constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561, a54 = -212.0 / 729;
  static constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247, a64 = 49.0 / 176,
                          a65 = -5103.0 / 18656;
  static constexpr double a71 = 35.0 / 384, a73 = 500.0 / 1113, a74 = 125.0 / 192, a75 = -2187.0 / 6784,
                          a76 = 11.0 / 84;
  // y5 - y4
  static constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920, e5 = -17253.0 / 339200,
                          e6 = 22.0 / 525, e7 = -1.0 / 40;
  // continuous extension
  static constexpr double d1 = -12715105075.0 / 11282082432, d3 = 87487479700.0 / 32700410799,
                          d4 = -10690763975.0 / 1880347072, d5 = 701980252875.0 / 199316789632,
                          d6 = -1453857185.0 / 822651844, d7 = 69997945.0 / 29380423;
};

struct DpStep {
  Y y1{};
  Y k7{};
  Y err{};
  std::array<Y, 7> k{};
};

/// One Dormand-Prince step from (y0, k1 = f(y0)).
template <typename F>
DpStep dp_step(F& force, const Y& y0, const Y& k1, double h) {
  DpStep s;
  auto& k = s.k;
  k[0] = k1;
  Y t{};
  for (int i = 0; i < 6; ++i) t[i] = y0[i] + h * DP::a21 * k[0][i];
  k[1] = derivative(force, t);
  for (int i = 0; i < 6; ++i) t[i] = y0[i] + h * (DP::a31 * k[0][i] + DP::a32 * k[1][i]);
  k[2] = derivative(force, t);
  for (int i = 0; i < 6; ++i) t[i] = y0[i] + h * (DP::a41 * k[0][i] + DP::a42 * k[1][i] + DP::a43 * k[2][i]);
  k[3] = derivative(force, t);
  for (int i = 0; i < 6; ++i)
    t[i] = y0[i] + h * (DP::a51 * k[0][i] + DP::a52 * k[1][i] + DP::a53 * k[2][i] + DP::a54 * k[3][i]);
  k[4] = derivative(force, t);
  for (int i = 0; i < 6; ++i)
    t[i] = y0[i] + h * (DP::a61 * k[0][i] + DP::a62 * k[1][i] + DP::a63 * k[2][i] + DP::a64 * k[3][i] +
                        DP::a65 * k[4][i]);
  k[5] = derivative(force, t);
  for (int i = 0; i < 6; ++i)
    s.y1[i] = y0[i] + h * (DP::a71 * k[0][i] + DP::a73 * k[2][i] + DP::a74 * k[3][i] + DP::a75 * k[4][i] +
                           DP::a76 * k[5][i]);
  k[6] = derivative(force, s.y1);
  s.k7 = k[6];
  for (int i = 0; i < 6; ++i)
    s.err[i] = h * (DP::e1 * k[0][i] + DP::e3 * k[2][i] + DP::e4 * k[3][i] + DP::e5 * k[4][i] + DP::e6 * k[5][i] +
                    DP::e7 * k[6][i]);
  return s;
}

inline double rms_norm(const Y& e, const Y& y0, const Y& y1, double rtol, double atol) {
  double acc = 0.0;
  for (int i = 0; i < 6; ++i) {
    const double sk = atol + rtol * std::max(std::abs(y0[i]), std::abs(y1[i]));
    acc += (e[i] / sk) * (e[i] / sk);
  }
  return std::sqrt(acc / 6.0);
}

inline bool finite(const Y& y) {
  return std::all_of(y.begin(), y.end(), [](double v) { return std::isfinite(v); });
}

}  // namespace detail

/// Adaptive Dormand-Prince 5(4) with PI step-size control and the quartic
/// dense output; the returned trajectory holds t = 0 followed by every
/// requested sample time (sample times never force step endpoints, except
/// that the last step ends on the final sample).
///
/// `force(x, v)` returns the acceleration.
template <typename F>
Trajectory dopri5_integrate(F&& force, const State& s0, std::span<const double> sample_times,
                            const Dopri5Options& opt = {}, Dopri5Stats* stats = nullptr) {
  using detail::Y;
  if (!(opt.rtol > 0.0) || !(opt.atol > 0.0)) throw std::invalid_argument("dopri5: tolerances must be positive");
  for (std::size_t i = 0; i < sample_times.size(); ++i) {
    if (sample_times[i] < 0.0 || (i > 0 && !(sample_times[i] > sample_times[i - 1]))) {
      throw std::invalid_argument("dopri5: sample times must be non-negative and strictly increasing");
    }
  }

  Trajectory out;
  out.times.push_back(0.0);
  out.states.push_back(s0);
  std::size_t next = 0;
  if (!sample_times.empty() && sample_times[0] == 0.0) next = 1;
  if (next >= sample_times.size()) return out;
  const double t_end = sample_times.back();

  Dopri5Stats local;
  Dopri5Stats& st = stats ? *stats : local;
  Y y = detail::pack(s0);
  Y k1 = detail::derivative(force, y);
  ++st.evaluations;

  // Initial step guess (Hairer, Norsett & Wanner).
  double h = 0.0;
  {
    double d0 = 0.0, d1 = 0.0;
    for (int i = 0; i < 6; ++i) {
      const double sk = opt.atol + opt.rtol * std::abs(y[i]);
      d0 += (y[i] / sk) * (y[i] / sk);
      d1 += (k1[i] / sk) * (k1[i] / sk);
    }
    d0 = std::sqrt(d0 / 6.0);
    d1 = std::sqrt(d1 / 6.0);
    double h0 = (d0 < 1e-5 || d1 < 1e-5) ? 1e-6 : 0.01 * d0 / d1;
    h0 = std::min(h0, t_end);
    Y y1{};
    for (int i = 0; i < 6; ++i) y1[i] = y[i] + h0 * k1[i];
    const Y f1 = detail::derivative(force, y1);
    ++st.evaluations;
    double d2 = 0.0;
    for (int i = 0; i < 6; ++i) {
      const double sk = opt.atol + opt.rtol * std::abs(y[i]);
      d2 += ((f1[i] - k1[i]) / sk) * ((f1[i] - k1[i]) / sk);
    }
    d2 = std::sqrt(d2 / 6.0) / h0;
    const double dm = std::max(d1, d2);
    const double h1 = dm <= 1e-15 ? std::max(1e-6, h0 * 1e-3) : std::pow(0.01 / dm, 0.2);
    h = std::min(100.0 * h0, h1);
  }

  constexpr double safety = 0.9, beta = 0.04, fac_min = 0.2, fac_max = 10.0;
  const double expo = 0.2 - beta * 0.75;
  double err_old = 1e-4;
  bool last_rejected = false;
  double t = 0.0;

  while (next < sample_times.size()) {
    if (st.accepted + st.rejected >= opt.max_steps) throw IntegrationError(t, "step limit reached");
    if (h < opt.min_step) throw IntegrationError(t, "step size underflow");
    h = std::min(h, t_end - t);

    const detail::DpStep s = detail::dp_step(force, y, k1, h);
    st.evaluations += 6;
    const double err = detail::rms_norm(s.err, y, s.y1, opt.rtol, opt.atol);
    if (!std::isfinite(err) || !detail::finite(s.y1)) {
      ++st.rejected;
      last_rejected = true;
      h *= fac_min;
      continue;
    }

    const double fac11 = std::pow(err, expo);
    if (err <= 1.0) {
      double fac = fac11 / std::pow(err_old, beta);
      fac = std::clamp(fac / safety, 1.0 / fac_max, 1.0 / fac_min);
      double h_new = h / fac;
      if (last_rejected) h_new = std::min(h_new, h);
      err_old = std::max(err, 1e-4);
      ++st.accepted;
      last_rejected = false;

      const double t1 = (t_end - (t + h) <= 1e-14 * std::max(1.0, t_end)) ? t_end : t + h;
      // dense output coefficients
      std::array<Y, 5> rc{};
      for (int i = 0; i < 6; ++i) {
        const double dy = s.y1[i] - y[i];
        const double bspl = h * s.k[0][i] - dy;
        rc[0][i] = y[i];
        rc[1][i] = dy;
        rc[2][i] = bspl;
        rc[3][i] = dy - h * s.k7[i] - bspl;
        rc[4][i] = h * (detail::DP::d1 * s.k[0][i] + detail::DP::d3 * s.k[2][i] + detail::DP::d4 * s.k[3][i] +
                        detail::DP::d5 * s.k[4][i] + detail::DP::d6 * s.k[5][i] + detail::DP::d7 * s.k7[i]);
      }
      while (next < sample_times.size() && sample_times[next] <= t1) {
        const double ts = sample_times[next];
        Y ys{};
        if (ts == t1) {
          ys = s.y1;
        } else {
          const double th = (ts - t) / h;
          const double th1 = 1.0 - th;
          for (int i = 0; i < 6; ++i) {
            ys[i] = rc[0][i] + th * (rc[1][i] + th1 * (rc[2][i] + th * (rc[3][i] + th1 * rc[4][i])));
          }
        }
        out.times.push_back(ts);
        out.states.push_back(detail::unpack(ys));
        ++next;
      }
      y = s.y1;
      k1 = s.k7;
      t = t1;
      h = h_new;
    } else {
      h /= std::min(1.0 / fac_min, fac11 / safety);
      ++st.rejected;
      last_rejected = true;
    }
  }
  return out;
}

template <typename F>
Trajectory dopri5_integrate(F&& force, const State& s0, std::initializer_list<double> sample_times,
                            const Dopri5Options& opt = {}) {
  return dopri5_integrate(std::forward<F>(force), s0, std::span<const double>(sample_times.begin(), sample_times.size()),
                          opt);
}

/// Uniform grid {T/n, 2T/n, ..., T}.
inline std::vector<double> uniform_times(double horizon, std::size_t n) {
  std::vector<double> t(n);
  for (std::size_t i = 0; i < n; ++i) t[i] = horizon * static_cast<double>(i + 1) / static_cast<double>(n);
  return t;
}

/// Fixed-step Dormand-Prince (fifth-order solution, no error control).
template <typename F>
State dopri5_fixed(F&& force, const State& s0, double horizon, std::size_t n_steps) {
  if (n_steps == 0) throw std::invalid_argument("dopri5_fixed: n_steps must be positive");
  const double h = horizon / static_cast<double>(n_steps);
  detail::Y y = detail::pack(s0);
  detail::Y k1 = detail::derivative(force, y);
  for (std::size_t n = 0; n < n_steps; ++n) {
    const auto s = detail::dp_step(force, y, k1, h);
    y = s.y1;
    k1 = s.k7;
  }
  return detail::unpack(y);
}

/// Classical RK4 on plain values.
template <typename F>
State rk4_integrate(F&& force, const State& s0, double horizon, std::size_t n_steps) {
  if (n_steps == 0) throw std::invalid_argument("rk4_integrate: n_steps must be positive");
  const double h = horizon / static_cast<double>(n_steps);
  detail::Y y = detail::pack(s0);
  for (std::size_t n = 0; n < n_steps; ++n) {
    const auto k1 = detail::derivative(force, y);
    detail::Y t{};
    for (int i = 0; i < 6; ++i) t[i] = y[i] + 0.5 * h * k1[i];
    const auto k2 = detail::derivative(force, t);
    for (int i = 0; i < 6; ++i) t[i] = y[i] + 0.5 * h * k2[i];
    const auto k3 = detail::derivative(force, t);
    for (int i = 0; i < 6; ++i) t[i] = y[i] + h * k3[i];
    const auto k4 = detail::derivative(force, t);
    for (int i = 0; i < 6; ++i) y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
  }
  return detail::unpack(y);
}

/// Trajectory whose states are tape nodes (position and velocity vectors).
struct TapeTrajectory {
  std::vector<double> times;
  std::vector<NodeId> x;
  std::vector<NodeId> v;
};

/// Classical RK4 with step horizon / n_steps recorded on the tape, so that a
/// loss on the returned nodes can be differentiated through every stage.
/// `force(tape, x, v)` records the acceleration and returns its node.
template <typename F>
TapeTrajectory rk4_rollout(Tape& tape, F&& force, NodeId x0, NodeId v0, double horizon, std::size_t n_steps) {
  if (n_steps == 0) throw std::invalid_argument("rk4_rollout: n_steps must be positive");
  const double h = horizon / static_cast<double>(n_steps);
  TapeTrajectory traj;
  traj.times.push_back(0.0);
  traj.x.push_back(x0);
  traj.v.push_back(v0);
  NodeId x = x0;
  NodeId v = v0;
  for (std::size_t n = 0; n < n_steps; ++n) {
    const NodeId a1 = force(tape, x, v);
    const NodeId x2 = tape.add(x, tape.scale(0.5 * h, v));
    const NodeId v2 = tape.add(v, tape.scale(0.5 * h, a1));
    const NodeId a2 = force(tape, x2, v2);
    const NodeId x3 = tape.add(x, tape.scale(0.5 * h, v2));
    const NodeId v3 = tape.add(v, tape.scale(0.5 * h, a2));
    const NodeId a3 = force(tape, x3, v3);
    const NodeId x4 = tape.add(x, tape.scale(h, v3));
    const NodeId v4 = tape.add(v, tape.scale(h, a3));
    const NodeId a4 = force(tape, x4, v4);
    // x += h/6 (v + 2 v2 + 2 v3 + v4), v += h/6 (a1 + 2 a2 + 2 a3 + a4)
    const NodeId dx = tape.add(tape.add(v, v4), tape.scale(2.0, tape.add(v2, v3)));
    const NodeId dv = tape.add(tape.add(a1, a4), tape.scale(2.0, tape.add(a2, a3)));
    x = tape.add(x, tape.scale(h / 6.0, dx));
    v = tape.add(v, tape.scale(h / 6.0, dv));
    traj.times.push_back(horizon * static_cast<double>(n + 1) / static_cast<double>(n_steps));
    traj.x.push_back(x);
    traj.v.push_back(v);
  }
  return traj;
}

}  // namespace modnode
