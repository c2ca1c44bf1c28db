#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <string_view>

#include "modnode/vec3.hpp"

namespace modnode {

/// Closed-form force fields used to generate data and to score models.
///
/// standard          complex potential, simple magnetic field, drag
/// standard_no_drag  standard without drag
/// magnetic          V = r^2, complex magnetic field, standard drag
/// periodic          period-2 lattice potential, standard field and drag
/// combined          standard potential with the complex magnetic field and drag
/// free, linear      debug setups (no force; constant-gradient fields)
enum class Setup { standard, standard_no_drag, magnetic, periodic, combined, free, linear };

inline std::string_view to_string(Setup s) {
  switch (s) {
    case Setup::standard: return "standard";
    case Setup::standard_no_drag: return "standard-no-drag";
    case Setup::magnetic: return "magnetic";
    case Setup::periodic: return "periodic";
    case Setup::combined: return "combined";
    case Setup::free: return "free";
    case Setup::linear: return "linear";
  }
  return "?";
}

inline Setup parse_setup(std::string_view name) {
  for (Setup s : {Setup::standard, Setup::standard_no_drag, Setup::magnetic, Setup::periodic, Setup::combined,
                  Setup::free, Setup::linear}) {
    if (to_string(s) == name) return s;
  }
  throw std::invalid_argument("unknown setup '" + std::string(name) + "'");
}

/// Constants of the `linear` debug setup: V = c.x, B constant, drag constant.
struct LinearDebugFields {
  static constexpr Vec3 potential_slope{0.3, -0.2, 0.1};
  static constexpr Vec3 field{0.0, 0.0, 0.5};
  static constexpr double drag = 0.2;
};

namespace truth {

inline constexpr double pi = std::numbers::pi;

inline double standard_potential(const Vec3& p) {
  const auto [x, y, z] = p;
  const double r2 = squared_norm(p);
  const double r = std::sqrt(r2);
  return (4.0 * std::sin(z) * y + x) * r * std::exp(-1.5 * r2) + std::exp(-3.0 * r2) +
         1.0 / (1.0 + std::exp(-4.0 * r + 8.0));
}

/// Hand-differentiated gradient of standard_potential. The radial terms have
/// a cusp at the origin, where the gradient is reported as zero.
inline Vec3 standard_potential_gradient(const Vec3& p) {
  const auto [x, y, z] = p;
  const double r2 = squared_norm(p);
  const double r = std::sqrt(r2);
  const double poly = 4.0 * std::sin(z) * y + x;
  const Vec3 dpoly{1.0, 4.0 * std::sin(z), 4.0 * y * std::cos(z)};
  const double g = r * std::exp(-1.5 * r2);
  Vec3 grad = g * dpoly;
  grad += (-6.0 * std::exp(-3.0 * r2)) * p;
  if (r > 0.0) {
    const double dg_dr = std::exp(-1.5 * r2) * (1.0 - 3.0 * r2);
    const double s = 1.0 / (1.0 + std::exp(-4.0 * r + 8.0));
    const double ds_dr = 4.0 * s * (1.0 - s);
    grad += ((poly * dg_dr + ds_dr) / r) * p;
  }
  return grad;
}

inline Vec3 standard_field(const Vec3& p) {
  const auto [x, y, z] = p;
  return {x * z, x * std::cos(z), -0.5 * z * z + std::sin(y)};
}

inline double magnetic_potential(const Vec3& p) { return squared_norm(p); }
inline Vec3 magnetic_potential_gradient(const Vec3& p) { return 2.0 * p; }

inline Vec3 magnetic_field(const Vec3& p) {
  const auto [x, y, z] = p;
  return {x * z + std::cos(0.5 * y), x * std::cos(z) + 0.5 * x * std::cos(y), -0.5 * z * z + 0.5 * x * z * std::sin(y)};
}

inline double periodic_potential(const Vec3& p) {
  const auto [x, y, z] = p;
  return std::cos(pi * x) - std::sin(pi * (x + y)) + std::cos(pi * (x + z)) + 0.9 * std::cos(pi * y) +
         0.7 * std::cos(pi * (y + z)) - std::sin(pi * z) - std::cos(pi * (x - y + z)) - std::sin(pi * (-x + z));
}

inline Vec3 periodic_potential_gradient(const Vec3& p) {
  const auto [x, y, z] = p;
  const double sxyz = std::sin(pi * (x - y + z));
  const double cxy = std::cos(pi * (x + y));
  const double sxz = std::sin(pi * (x + z));
  const double syz = std::sin(pi * (y + z));
  const double czx = std::cos(pi * (-x + z));
  return {pi * (-std::sin(pi * x) - cxy - sxz + sxyz + czx),
          pi * (-cxy - 0.9 * std::sin(pi * y) - 0.7 * syz - sxyz),
          pi * (-sxz - 0.7 * syz - std::cos(pi * z) + sxyz - czx)};
}

/// Drag coefficient gamma(v) with drag force -v * gamma(v):
///   gamma = 1 - 1/2 v_r^2 exp(-v_r / 3) sin(theta) cos(theta) sin(phi)
/// phi from the two-argument arctangent, theta = acos(v_z / (v_r + 0.01)).
/// gamma is close to 1 at low speed, i.e. the drag removes energy.
inline double standard_drag(const Vec3& v) {
  const double vr = norm(v);
  const double phi = std::atan2(v[1], v[0]);
  const double theta = std::acos(std::clamp(v[2] / (vr + 0.01), -1.0, 1.0));
  return 1.0 - 0.5 * vr * vr * std::exp(-vr / 3.0) * std::sin(theta) * std::cos(theta) * std::sin(phi);
}

}  // namespace truth

inline bool has_drag(Setup s) {
  return s == Setup::standard || s == Setup::magnetic || s == Setup::periodic || s == Setup::combined ||
         s == Setup::linear;
}

inline double truth_potential(Setup s, const Vec3& x) {
  switch (s) {
    case Setup::standard:
    case Setup::standard_no_drag:
    case Setup::combined: return truth::standard_potential(x);
    case Setup::magnetic: return truth::magnetic_potential(x);
    case Setup::periodic: return truth::periodic_potential(x);
    case Setup::free: return 0.0;
    case Setup::linear: return dot(LinearDebugFields::potential_slope, x);
  }
  return 0.0;
}

inline Vec3 truth_potential_gradient(Setup s, const Vec3& x) {
  switch (s) {
    case Setup::standard:
    case Setup::standard_no_drag:
    case Setup::combined: return truth::standard_potential_gradient(x);
    case Setup::magnetic: return truth::magnetic_potential_gradient(x);
    case Setup::periodic: return truth::periodic_potential_gradient(x);
    case Setup::free: return {0.0, 0.0, 0.0};
    case Setup::linear: return LinearDebugFields::potential_slope;
  }
  return {0.0, 0.0, 0.0};
}

inline Vec3 truth_B(Setup s, const Vec3& x) {
  switch (s) {
    case Setup::standard:
    case Setup::standard_no_drag:
    case Setup::periodic: return truth::standard_field(x);
    case Setup::magnetic:
    case Setup::combined: return truth::magnetic_field(x);
    case Setup::free: return {0.0, 0.0, 0.0};
    case Setup::linear: return LinearDebugFields::field;
  }
  return {0.0, 0.0, 0.0};
}

/// Drag coefficient D in the force term -v D(v); zero for drag-free setups.
inline double truth_drag_scalar(Setup s, const Vec3& v) {
  if (!has_drag(s)) return 0.0;
  if (s == Setup::linear) return LinearDebugFields::drag;
  return truth::standard_drag(v);
}

/// Acceleration (unit mass and charge): -grad V + v x B - v D(v).
inline Vec3 truth_force(Setup s, const Vec3& x, const Vec3& v) {
  Vec3 a = -truth_potential_gradient(s, x);
  a += cross(v, truth_B(s, x));
  if (has_drag(s)) a += (-truth_drag_scalar(s, v)) * v;
  return a;
}

/// Lattice period of the setup's potential, if it has one.
inline double truth_period(Setup s) { return s == Setup::periodic ? 2.0 : 0.0; }

}  // namespace modnode
