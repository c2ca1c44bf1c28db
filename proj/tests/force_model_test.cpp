#include "modnode/force_model.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "modnode/ground_truth.hpp"
#include "modnode/ode.hpp"

using namespace modnode;

namespace {

Vec3 random_point(std::mt19937_64& rng, double half = 2.0) {
  std::uniform_real_distribution<double> u(-half, half);
  return {u(rng), u(rng), u(rng)};
}

void expect_vec_near(const Vec3& a, const Vec3& b, double tol) {
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(a[i], b[i], tol) << "component " << i;
}

ForceModel zero_model(ModelKind kind) {
  ForceModel m = make_model(kind, 0);
  for (Mlp* net : m.modules()) std::ranges::fill(net->params(), 0.0);
  return m;
}

// 3 -> 1 linear net computing c . x
Mlp linear_scalar(const Vec3& c, double bias = 0.0) { return Mlp(MlpSpec::parse("3-1"), {c[0], c[1], c[2], bias}); }

}  // namespace

TEST(GroundTruth, ClosedFormValues) {
  EXPECT_NEAR(truth_potential(modnode::Setup::standard, {0, 0, 0}), 1.0 + 1.0 / (1.0 + std::exp(8.0)), 1e-15);
  EXPECT_NEAR(truth_potential(modnode::Setup::standard, {0, 0, 0}), 1.000335, 1e-6);
  EXPECT_NEAR(truth_potential(modnode::Setup::standard, {1, 0, 0}), 0.2909, 1e-4);
  expect_vec_near(truth_B(modnode::Setup::standard, {1, 1, 1}), {1.0, 0.5403, 0.3415}, 1e-4);
  EXPECT_DOUBLE_EQ(truth_potential(modnode::Setup::magnetic, {1, 1, 1}), 3.0);
  EXPECT_NEAR(truth_potential(modnode::Setup::periodic, {0, 0, 0}), 2.6, 1e-14);
  EXPECT_EQ(truth_potential(modnode::Setup::free, {1, 2, 3}), 0.0);
}

TEST(GroundTruth, DragIsDissipativeAtLowSpeed) {
  EXPECT_DOUBLE_EQ(truth_drag_scalar(modnode::Setup::standard, {1, 0, 0}), 1.0);
  expect_vec_near(truth_force(modnode::Setup::standard_no_drag, {0.3, 0.1, 0.2}, {1, 0, 0}) + Vec3{-1, 0, 0},
                  truth_force(modnode::Setup::standard, {0.3, 0.1, 0.2}, {1, 0, 0}), 1e-15);
  EXPECT_EQ(truth_drag_scalar(modnode::Setup::standard_no_drag, {1, 2, 3}), 0.0);
  // x-axis velocity never feels the angular term, v=0 keeps the formula finite
  EXPECT_TRUE(std::isfinite(truth_drag_scalar(modnode::Setup::standard, {0, 0, 0})));
  EXPECT_TRUE(std::isfinite(truth_drag_scalar(modnode::Setup::standard, {0, 0, 2})));
}

TEST(GroundTruth, SetupNamesRoundTrip) {
  for (modnode::Setup s : {modnode::Setup::standard, modnode::Setup::standard_no_drag, modnode::Setup::magnetic, modnode::Setup::periodic, modnode::Setup::combined,
                  modnode::Setup::free, modnode::Setup::linear}) {
    EXPECT_EQ(parse_setup(to_string(s)), s);
  }
  EXPECT_THROW(parse_setup("standrad"), std::invalid_argument);
}

TEST(GroundTruth, SymbolicGradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(21);
  const double eps = 1e-6;
  for (modnode::Setup s : {modnode::Setup::standard, modnode::Setup::magnetic, modnode::Setup::periodic}) {
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      const Vec3 p = random_point(rng);
      const Vec3 g = truth_potential_gradient(s, p);
      for (int k = 0; k < 3; ++k) {
        Vec3 up = p, down = p;
        up[k] += eps;
        down[k] -= eps;
        const double fd = (truth_potential(s, up) - truth_potential(s, down)) / (2 * eps);
        worst = std::max(worst, relative_error(g[k], fd, 1e-6));
      }
    }
    EXPECT_LT(worst, 1e-6) << to_string(s);
  }
}

TEST(GroundTruth, MagneticFieldsAreDivergenceFree) {
  std::mt19937_64 rng(4);
  const double eps = 1e-5;
  for (modnode::Setup s : {modnode::Setup::standard, modnode::Setup::magnetic}) {
    double worst = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
      const Vec3 p = random_point(rng);
      double div = 0.0;
      for (int k = 0; k < 3; ++k) {
        Vec3 up = p, down = p;
        up[k] += eps;
        down[k] -= eps;
        div += (truth_B(s, up)[k] - truth_B(s, down)[k]) / (2 * eps);
      }
      worst = std::max(worst, std::abs(div));
    }
    EXPECT_LT(worst, 1e-6) << to_string(s);
  }
}

TEST(GroundTruth, PeriodicPotentialHasPeriodTwo) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const Vec3 p = random_point(rng);
    for (int k = 0; k < 3; ++k) {
      Vec3 q = p;
      q[k] += 2.0;
      EXPECT_LT(std::abs(truth_potential(modnode::Setup::periodic, q) - truth_potential(modnode::Setup::periodic, p)), 1e-12);
    }
  }
  EXPECT_EQ(truth_period(modnode::Setup::periodic), 2.0);
}

// Along exact solutions of a drag-free system the energy 1/2|v|^2 + V is
// constant; the solver error at rtol 1e-6 must stay well below 1e-3.
TEST(GroundTruth, ConservativeSystemKeepsEnergy) {
  const modnode::Setup s = modnode::Setup::standard_no_drag;
  std::mt19937_64 rng(77);
  const Dopri5Options opt{.rtol = 1e-6, .atol = 1e-9};
  const auto times = uniform_times(7.0, 70);
  for (int trial = 0; trial < 5; ++trial) {
    const State s0{random_point(rng, 1.5), random_point(rng, 1.5)};
    const Trajectory tr = dopri5_integrate([&](const Vec3& x, const Vec3& v) { return truth_force(s, x, v); }, s0,
                                           std::span<const double>(times), opt);
    const double e0 = 0.5 * squared_norm(s0.v) + truth_potential(s, s0.x);
    double drift = 0.0;
    for (const State& st : tr.states) {
      drift = std::max(drift, std::abs(0.5 * squared_norm(st.v) + truth_potential(s, st.x) - e0));
    }
    EXPECT_LT(drift, 1e-3) << "trial " << trial;
  }
}

TEST(ForceModel, PresetStructure) {
  for (ModelKind k : {ModelKind::magnetic, ModelKind::div_magnetic, ModelKind::vector, ModelKind::periodic}) {
    const ForceModel m = make_model(k, 1);
    EXPECT_TRUE(m.potential && m.drag && m.magnetic) << to_string(k);
    EXPECT_FALSE(m.generic);
    EXPECT_EQ(m.period.has_value(), k == ModelKind::periodic);
  }
  EXPECT_EQ(make_model(ModelKind::vector, 1).magnetic_kind, MagneticKind::vector_potential);
  EXPECT_EQ(make_model(ModelKind::magnetic, 1).magnetic_kind, MagneticKind::direct);
  const ForceModel basic = make_model(ModelKind::basic, 1);
  EXPECT_TRUE(basic.potential && basic.generic && !basic.drag && !basic.magnetic);
  const ForceModel sonode = make_model(ModelKind::sonode, 1);
  EXPECT_TRUE(sonode.generic && !sonode.potential && !sonode.drag && !sonode.magnetic);
  const ForceModel lnn = make_model(ModelKind::magnetic_lnn, 1);
  EXPECT_TRUE(lnn.potential && lnn.magnetic && !lnn.drag);
  EXPECT_EQ(lnn.magnetic_kind, MagneticKind::vector_potential);

  ForceModel empty;
  EXPECT_THROW(empty.validate(), std::invalid_argument);
  ForceModel bad = make_model(ModelKind::magnetic, 1);
  bad.period = Vec3{2.0, -1.0, 2.0};
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(ForceModel, KindNamesRoundTrip) {
  for (ModelKind k : {ModelKind::magnetic, ModelKind::div_magnetic, ModelKind::vector, ModelKind::basic,
                      ModelKind::periodic, ModelKind::sonode, ModelKind::sonode_x2, ModelKind::magnetic_lnn}) {
    EXPECT_EQ(parse_model_kind(to_string(k)), k);
  }
  EXPECT_THROW(parse_model_kind("magnetc"), std::invalid_argument);
}

TEST(ForceModel, FlatParametersRoundTrip) {
  ForceModel m = make_model(ModelKind::magnetic, 3);
  std::vector<double> flat = m.flat_parameters();
  ASSERT_EQ(flat.size(), m.parameter_count());
  for (double& p : flat) p *= 2.0;
  m.set_flat_parameters(flat);
  EXPECT_EQ(m.flat_parameters(), flat);
  EXPECT_THROW(m.set_flat_parameters(std::vector<double>(3, 0.0)), std::invalid_argument);
}

TEST(TotalForce, ZeroNetworksGiveZeroForce) {
  std::mt19937_64 rng(1);
  for (ModelKind k : {ModelKind::magnetic, ModelKind::vector, ModelKind::basic, ModelKind::periodic,
                      ModelKind::sonode}) {
    ForceEvaluator f(zero_model(k));
    expect_vec_near(f(random_point(rng), random_point(rng)), {0, 0, 0}, 0.0);
  }
}

TEST(TotalForce, LinearPotentialGivesConstantForce) {
  ForceModel m;
  m.kind = ModelKind::magnetic;
  m.potential = linear_scalar({0.3, -0.2, 0.1});
  ForceEvaluator f(m);
  std::mt19937_64 rng(2);
  for (int i = 0; i < 10; ++i) expect_vec_near(f(random_point(rng), random_point(rng)), {-0.3, 0.2, -0.1}, 1e-15);
}

TEST(TotalForce, MagneticTermExamples) {
  Tape t;
  // B-net returning the constant (0,1,0)
  const Mlp b_net(MlpSpec::parse("3-3"), {0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 0});
  const MlpNodes nodes = bind(t, b_net);
  const NodeId x = t.variable({0.5, 0.5, 0.5});
  auto direct = [&](Vec3 v) {
    const NodeId f = magnetic_force_direct(t, nodes, x, t.variable(std::span<const double>(v)));
    return Vec3{t.value(f)[0], t.value(f)[1], t.value(f)[2]};
  };
  expect_vec_near(direct({1, 0, 0}), {0, 0, 1}, 0.0);
  expect_vec_near(direct({0, 0, 0}), {0, 0, 0}, 0.0);
  expect_vec_near(direct({0, 2, 0}), {0, 0, 0}, 0.0);  // v parallel to B

  // A = (0, 0, x) as an exact linear net: curl A = (0, -1, 0)
  const Mlp a_net(MlpSpec::parse("3-3"), {0, 0, 0, 0, 0, 0, 1, 0, 0, 0, 0, 0});
  const MlpNodes a_nodes = bind(t, a_net);
  const NodeId f = magnetic_force_vector(t, a_nodes, x, t.variable({1.0, 0.0, 0.0}));
  expect_vec_near({t.value(f)[0], t.value(f)[1], t.value(f)[2]}, {0, 0, -1}, 0.0);
}

TEST(TotalForce, DragExamples) {
  Tape t;
  auto drag_with = [&](double constant, Vec3 v) {
    const Mlp d(MlpSpec::parse("3-1"), {0, 0, 0, constant});
    const MlpNodes n = bind(t, d);
    const NodeId f = drag_force(t, n, t.variable(std::span<const double>(v)));
    return Vec3{t.value(f)[0], t.value(f)[1], t.value(f)[2]};
  };
  expect_vec_near(drag_with(1.0, {2, 0, 0}), {-2, 0, 0}, 0.0);
  expect_vec_near(drag_with(-1.0, {1, 1, 1}), {1, 1, 1}, 0.0);
  expect_vec_near(drag_with(0.7, {0, 0, 0}), {0, 0, 0}, 0.0);
}

TEST(TotalForce, MagneticTermDoesNoWork) {
  std::mt19937_64 rng(9);
  for (ModelKind k : {ModelKind::magnetic, ModelKind::vector}) {
    ForceModel m = make_model(k, 4);
    m.potential.reset();
    m.drag.reset();
    ForceEvaluator f(m);
    for (int i = 0; i < 100; ++i) {
      const Vec3 v = random_point(rng);
      const Vec3 a = f(random_point(rng), v);
      EXPECT_LT(std::abs(dot(a, v)), 1e-14 * (1.0 + norm(a) * norm(v))) << to_string(k);
    }
  }
}

TEST(PeriodicWrap, FloorModExamples) {
  Tape t;
  const NodeId a = t.variable({2.0, 2.0, 2.0});
  const NodeId w = periodic_wrap(t, t.variable({-0.5, 3.1, 2.0}), a);
  EXPECT_NEAR(t.value(w)[0], 1.5, 1e-15);
  EXPECT_NEAR(t.value(w)[1], 1.1, 1e-12);
  EXPECT_EQ(t.value(w)[2], 0.0);
  const NodeId inside = periodic_wrap(t, t.variable({0.25, 1.5, 1.999}), a);
  EXPECT_EQ(t.value(inside)[0], 0.25);
  EXPECT_EQ(t.value(inside)[1], 1.5);
  EXPECT_EQ(t.value(inside)[2], 1.999);
  EXPECT_THROW(periodic_wrap(t, t.variable({1.0, 1.0, 1.0}), t.variable({2.0, 0.0, 2.0})), std::invalid_argument);
}

TEST(PeriodicWrap, LearnedPotentialIsExactlyPeriodic) {
  ForceEvaluator f(make_model(ModelKind::periodic, 6));
  std::mt19937_64 rng(6);
  for (int i = 0; i < 50; ++i) {
    const Vec3 x = random_point(rng);
    EXPECT_NEAR(f.potential(x + Vec3{2.0, -2.0, 4.0}), f.potential(x), 1e-12);
    EXPECT_NEAR(f.potential(x + Vec3{-6.0, 0.0, 2.0}), f.potential(x), 1e-12);
  }
}

// The Euler-Lagrange equation of L = 1/2|v|^2 - V(x) + A(x).v, evaluated with
// finite-difference derivatives of the plain networks, must reproduce the
// vector-potential model without drag.
TEST(MagneticLagrangian, EulerLagrangeMatchesVectorPotentialModel) {
  const ForceModel m = make_model(ModelKind::magnetic_lnn, 12);
  ForceEvaluator f(m);
  const Mlp& V = *m.potential;
  const Mlp& A = *m.magnetic;
  const double h = 1e-5;
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    const Vec3 x = random_point(rng), v = random_point(rng);
    // dL/dv = v + A(x); d/dt dL/dv = a + J_A v; dL/dx = -grad V + J_A^T v
    std::array<Vec3, 3> jac{};  // jac[i][k] = dA_i/dx_k
    Vec3 grad_v{};
    for (int k = 0; k < 3; ++k) {
      Vec3 up = x, down = x;
      up[k] += h;
      down[k] -= h;
      const auto au = A.evaluate(up), ad = A.evaluate(down);
      for (int i = 0; i < 3; ++i) jac[i][k] = (au[i] - ad[i]) / (2 * h);
      grad_v[k] = (V.evaluate(up)[0] - V.evaluate(down)[0]) / (2 * h);
    }
    Vec3 a_el{};
    for (int i = 0; i < 3; ++i) {
      a_el[i] = -grad_v[i];
      for (int k = 0; k < 3; ++k) a_el[i] += (jac[k][i] - jac[i][k]) * v[k];
    }
    const Vec3 a_model = f(x, v);
    for (int i = 0; i < 3; ++i) EXPECT_LT(relative_error(a_model[i], a_el[i], 1e-6), 1e-6);
  }
}

TEST(ForceEvaluator, ExposesFieldsAndRejectsMissingModules) {
  ForceModel m;
  m.kind = ModelKind::magnetic;
  m.potential = linear_scalar({1.0, 2.0, 3.0}, 0.5);
  m.drag = Mlp(MlpSpec::parse("3-1"), {0, 0, 0, 0.25});
  ForceEvaluator f(m);
  EXPECT_DOUBLE_EQ(f.potential({1, 1, 1}), 6.5);
  EXPECT_DOUBLE_EQ(f.drag_coefficient({3, 2, 1}), 0.25);
  EXPECT_THROW(f.magnetic_field({0, 0, 0}), std::invalid_argument);
  expect_vec_near(f({0, 0, 0}, {4, 0, 0}), {-1.0 - 1.0, -2.0, -3.0}, 1e-15);
}
