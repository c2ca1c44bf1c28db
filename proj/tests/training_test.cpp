#include "modnode/training.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>

#include "modnode/evaluation.hpp"
#include "test_support.hpp"

using namespace modnode;

namespace {

// Exact encoding of the linear debug setup as a magnetic-family model.
ForceModel linear_truth_model() {
  const Vec3 c = LinearDebugFields::potential_slope;
  const Vec3 b = LinearDebugFields::field;
  ForceModel m;
  m.kind = ModelKind::magnetic;
  m.potential = Mlp(MlpSpec::parse("3-1"), {c[0], c[1], c[2], 0.0});
  m.magnetic_kind = MagneticKind::direct;
  m.magnetic = Mlp(MlpSpec::parse("3-3"), {0, 0, 0, 0, 0, 0, 0, 0, 0, b[0], b[1], b[2]});
  m.drag = Mlp(MlpSpec::parse("3-1"), {0, 0, 0, LinearDebugFields::drag});
  return m;
}

// Linear B-net B(x) = M x
ForceModel linear_field_model(std::initializer_list<double> m_row_major) {
  ForceModel m;
  m.kind = ModelKind::div_magnetic;
  m.magnetic_kind = MagneticKind::direct;
  std::vector<double> p(m_row_major);
  p.insert(p.end(), {0.0, 0.0, 0.0});
  m.magnetic = Mlp(MlpSpec::parse("3-3"), p);
  return m;
}

double penalty_at(const ForceModel& m, const Vec3& p) {
  Tape t;
  const BoundModel b = bind(t, m);
  return t.scalar_value(divergence_penalty(t, b, p));
}

double loss_of(const ForceModel& m, std::span<const Sample> batch) {
  Tape t;
  const BoundModel b = bind(t, m);
  return t.scalar_value(pred_loss(t, b, batch, 8));
}

TrainConfig smoke_config(ModelKind kind, std::size_t steps) {
  TrainConfig c = TrainConfig::preset(kind, modnode::Setup::standard, Profile::desk, 3);
  c.steps = steps;
  c.dataset_size = 256;
  c.log_every = 20;
  return c;
}

}  // namespace

TEST(Dataset, ZeroForceTargetsAreFreeMotion) {
  const Dataset d = generate_dataset(modnode::Setup::free, 1, 7);
  ASSERT_EQ(d.samples.size(), 1u);
  const Sample& s = d.samples[0];
  ASSERT_EQ(s.times, (std::vector<double>{0.1, 0.2}));
  for (std::size_t n = 0; n < 2; ++n) {
    for (int k = 0; k < 3; ++k) EXPECT_NEAR(s.targets[n][k], s.initial.x[k] + s.initial.v[k] * s.times[n], 1e-14);
  }
}

TEST(Dataset, DeterministicPerSeedAndInsideTheBox) {
  const Dataset a = generate_dataset(modnode::Setup::standard, 200, 11);
  const Dataset b = generate_dataset(modnode::Setup::standard, 200, 11);
  const Dataset c = generate_dataset(modnode::Setup::standard, 200, 12);
  ASSERT_EQ(a.samples.size(), 200u);
  bool differs = false;
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    EXPECT_EQ(a.samples[i].initial.x, b.samples[i].initial.x);
    EXPECT_EQ(a.samples[i].initial.v, b.samples[i].initial.v);
    EXPECT_EQ(a.samples[i].targets, b.samples[i].targets);
    differs = differs || a.samples[i].initial.x != c.samples[i].initial.x;
    for (double x : a.samples[i].initial.x) EXPECT_LE(std::abs(x), 2.0);
    for (double v : a.samples[i].initial.v) EXPECT_LE(std::abs(v), 2.0);
  }
  EXPECT_TRUE(differs);
  EXPECT_THROW(generate_dataset(modnode::Setup::standard, 0, 1), std::invalid_argument);
}

TEST(PredLoss, ExactModelHasNearZeroLoss) {
  const Dataset d = generate_dataset(modnode::Setup::linear, 64, 3);
  EXPECT_LT(loss_of(linear_truth_model(), d.samples), 1e-8);
}

TEST(PredLoss, ConstantOffsetGivesThreeDSquared) {
  Dataset d = generate_dataset(modnode::Setup::free, 8, 4);
  const double offset = 0.05;
  for (Sample& s : d.samples) {
    for (Vec3& target : s.targets) target = target - Vec3{offset, offset, offset};
  }
  ForceModel zero = make_model(ModelKind::magnetic, 0);
  for (Mlp* net : zero.modules()) std::ranges::fill(net->params(), 0.0);
  EXPECT_NEAR(loss_of(zero, d.samples), 3.0 * offset * offset, 1e-12);
}

TEST(PredLoss, RejectsEmptyBatchAndIncompatibleSteps) {
  const ForceModel m = make_model(ModelKind::magnetic, 0);
  Tape t;
  const BoundModel b = bind(t, m);
  EXPECT_THROW(pred_loss(t, b, std::span<const Sample>{}, 8), std::invalid_argument);
  const Dataset d = generate_dataset(modnode::Setup::free, 1, 1);
  EXPECT_THROW(pred_loss(t, b, d.samples, 7), std::invalid_argument);
}

TEST(DivergencePenalty, LinearFieldExamples) {
  EXPECT_EQ(penalty_at(linear_field_model({0, 0, 0, 0, 0, 0, 0, 0, 0}), {0.3, 0.2, 0.1}), 0.0);
  for (const Vec3& p : {Vec3{0, 0, 0}, Vec3{1.5, -0.7, 0.2}}) {
    EXPECT_DOUBLE_EQ(penalty_at(linear_field_model({1, 0, 0, 0, 1, 0, 0, 0, 1}), p), 9.0);  // B = (x, y, z)
    EXPECT_EQ(penalty_at(linear_field_model({0, 1, 0, 0, 0, 1, 1, 0, 0}), p), 0.0);         // B = (y, z, x)
  }
  Tape t;
  const ForceModel vec = make_model(ModelKind::vector, 0);
  const BoundModel b = bind(t, vec);
  EXPECT_THROW(divergence_penalty(t, b, Vec3{0, 0, 0}), std::invalid_argument);
}

TEST(DivergencePenalty, RandomPointStaysInBox) {
  const ForceModel m = make_model(ModelKind::div_magnetic, 2);
  std::mt19937_64 rng(1);
  Tape t;
  const BoundModel b = bind(t, m);
  const NodeId pen = divergence_penalty(t, b, rng);
  EXPECT_TRUE(std::isfinite(t.scalar_value(pen)));
  EXPECT_GE(t.scalar_value(pen), 0.0);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  AdamState s;
  std::vector<double> p{0.0};
  adam_step(s, p, std::vector<double>{1.0}, 0.01);
  EXPECT_NEAR(p[0], -0.01 / (1.0 + 1e-8), 1e-15);
  EXPECT_EQ(s.step, 1u);
}

TEST(Adam, ZeroGradientIsAFixedPoint) {
  AdamState s;
  std::vector<double> p{1.0, -2.0, 3.0};
  for (int i = 0; i < 50; ++i) adam_step(s, p, std::vector<double>(3, 0.0), 0.1);
  EXPECT_EQ(p, (std::vector<double>{1.0, -2.0, 3.0}));
}

TEST(Adam, ConstantGradientStepIsScaleFree) {
  for (double g : {1e-3, 1.0, 1e3}) {
    AdamState s;
    std::vector<double> p{0.0};
    double prev = 0.0;
    for (int i = 0; i < 100; ++i) {
      adam_step(s, p, std::vector<double>{g}, 0.01);
      EXPECT_NEAR(prev - p[0], 0.01, 1e-6) << "gradient " << g;
      prev = p[0];
    }
  }
  AdamState s;
  std::vector<double> p(2, 0.0);
  EXPECT_THROW(adam_step(s, p, std::vector<double>(3, 0.0), 0.1), std::invalid_argument);
}

TEST(PlateauScheduler, DecaysOnlyAfterPatienceRunsOut) {
  {
    PlateauScheduler s(1.0);
    for (int i = 0; i < 3000; ++i) s.update(1.0 / (1.0 + i));
    EXPECT_EQ(s.decays(), 0u);
    EXPECT_EQ(s.lr(), 1.0);
  }
  {
    PlateauScheduler s(1.0);
    for (int i = 0; i < 961; ++i) s.update(0.5);
    EXPECT_EQ(s.decays(), 1u);
    EXPECT_DOUBLE_EQ(s.lr(), 0.8);
  }
  {
    PlateauScheduler s(1.0);
    for (int i = 0; i < 1921; ++i) s.update(0.5);
    EXPECT_EQ(s.decays(), 2u);
    EXPECT_DOUBLE_EQ(s.lr(), 0.64);
  }
  PlateauScheduler s(1.0);
  EXPECT_THROW(s.update(std::numeric_limits<double>::quiet_NaN()), std::invalid_argument);
}

TEST(TrainConfig, PresetsFollowTheReplicationTable) {
  using P = Profile;
  const auto lr = [](ModelKind k) { return TrainConfig::preset(k, modnode::Setup::standard, P::paper, 0).learning_rate; };
  EXPECT_EQ(lr(ModelKind::magnetic), 15e-3);
  EXPECT_EQ(lr(ModelKind::div_magnetic), 15e-3);
  EXPECT_EQ(lr(ModelKind::vector), 10e-3);
  EXPECT_EQ(lr(ModelKind::basic), 5e-3);
  EXPECT_EQ(lr(ModelKind::periodic), 8e-3);
  EXPECT_EQ(lr(ModelKind::magnetic_lnn), 10e-3);
  EXPECT_EQ(lr(ModelKind::sonode), 1e-3);
  const TrainConfig paper = TrainConfig::preset(ModelKind::sonode_x2, modnode::Setup::standard, P::paper, 0);
  EXPECT_EQ(paper.steps, 32000u);
  EXPECT_EQ(paper.patience, 960u);
  EXPECT_EQ(TrainConfig::preset(ModelKind::magnetic, modnode::Setup::standard, P::paper, 0).steps, 16000u);
  const TrainConfig desk = TrainConfig::preset(ModelKind::div_magnetic, modnode::Setup::standard, P::desk, 0);
  EXPECT_EQ(desk.steps, 2000u);
  EXPECT_EQ(desk.dataset_size, 1024u);
  EXPECT_EQ(desk.divergence_weight, 2e-7);
  EXPECT_EQ(desk.horizon, 0.2);
  EXPECT_EQ(desk.sequence_length, 2u);

  TrainConfig bad = desk;
  bad.sequence_length = 0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = desk;
  bad.horizon = 0.0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = desk;
  bad.rk4_steps = 5;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(LossGradient, FreshModelLossIsFinitePositive) {
  const Dataset d = generate_dataset(modnode::Setup::standard, 32, 5);
  Tape t;
  const LossGradient lg = loss_and_gradient(t, make_model(ModelKind::magnetic, 5), d.samples, 8, 0.0, std::nullopt);
  EXPECT_TRUE(std::isfinite(lg.loss));
  EXPECT_GT(lg.loss, 0.0);
}

// d(L_pred + w L_div) = dL_pred + w dL_div on a fixed model.
TEST(LossGradient, TotalGradientIsSumOfComponents) {
  const Dataset d = generate_dataset(modnode::Setup::standard, 4, 6);
  const ForceModel m = make_model(ModelKind::div_magnetic, 6);
  const Vec3 point{0.4, -1.1, 0.9};
  const double w = 0.37;
  Tape t;
  const LossGradient total = loss_and_gradient(t, m, d.samples, 8, w, point);
  const LossGradient pred = loss_and_gradient(t, m, d.samples, 8, 0.0, std::nullopt);
  t.clear();
  const BoundModel b = bind(t, m);
  t.backward(divergence_penalty(t, b, point));
  std::vector<double> div_grad(m.parameter_count(), 0.0);
  accumulate_gradient(t, b, div_grad);
  for (std::size_t i = 0; i < total.grad.size(); ++i) {
    EXPECT_NEAR(total.grad[i], pred.grad[i] + w * div_grad[i], 1e-12 * (1.0 + std::abs(total.grad[i])));
  }
  EXPECT_NEAR(total.loss, pred.loss + w * *total.div_penalty, 1e-15);
}

TEST(LossGradient, MatchesFiniteDifferencesOfTheBatchLoss) {
  const Dataset d = generate_dataset(modnode::Setup::standard, 3, 8);
  const ForceModel m = make_model(ModelKind::vector, 8);
  Tape t;
  const LossGradient lg = loss_and_gradient(t, m, d.samples, 8, 0.0, std::nullopt);
  auto value = [&](const std::vector<double>& p) {
    ForceModel probe = m;
    probe.set_flat_parameters(p);
    return loss_of(probe, d.samples);
  };
  const std::vector<double> p0 = m.flat_parameters();
  std::mt19937_64 rng(8);
  std::uniform_int_distribution<std::size_t> pick(0, p0.size() - 1);
  for (int probe = 0; probe < 5; ++probe) {
    const std::size_t i = pick(rng);
    EXPECT_LT(relative_error(lg.grad[i], test::central_difference(value, p0, i, 1e-6), 1e-9), 1e-4) << "param " << i;
  }
}

TEST(Train, SmokeRunReducesLoss) {
  const TrainConfig c = smoke_config(ModelKind::magnetic, 200);
  const Dataset d = generate_dataset(c.setup, c.dataset_size, c.seed);
  std::size_t rows = 0;
  const TrainResult r = train(c, d, [&](const LogRow&) { ++rows; });
  ASSERT_EQ(r.log.size(), 10u);
  EXPECT_EQ(rows, 10u);
  EXPECT_EQ(r.log.back().step, 200u);
  EXPECT_LT(r.log.back().loss, r.log.front().loss);
  EXPECT_GT(r.initial_loss, 0.0);
  EXPECT_FALSE(r.log.front().div_penalty);
}

TEST(Train, SeedFixedRunsAreBitIdentical) {
  const TrainConfig c = smoke_config(ModelKind::div_magnetic, 40);
  const Dataset d1 = generate_dataset(c.setup, c.dataset_size, c.seed);
  const Dataset d2 = generate_dataset(c.setup, c.dataset_size, c.seed);
  const TrainResult a = train(c, d1);
  const TrainResult b = train(c, d2);
  EXPECT_EQ(a.model.flat_parameters(), b.model.flat_parameters());
  EXPECT_EQ(a.final_loss, b.final_loss);
  TrainConfig other = c;
  other.seed = c.seed + 1;
  EXPECT_NE(train(other, d1).model.flat_parameters(), a.model.flat_parameters());
}

TEST(Train, DivergenceModelLogsPenalty) {
  const TrainConfig c = smoke_config(ModelKind::div_magnetic, 40);
  const Dataset d = generate_dataset(c.setup, c.dataset_size, c.seed);
  const TrainResult r = train(c, d);
  for (const LogRow& row : r.log) {
    ASSERT_TRUE(row.div_penalty);
    EXPECT_GE(*row.div_penalty, 0.0);
  }
}

TEST(Train, DragCanBeSwitchedOff) {
  TrainConfig c = smoke_config(ModelKind::magnetic, 5);
  c.drag = false;
  const Dataset d = generate_dataset(modnode::Setup::standard_no_drag, 64, 1);
  const TrainResult r = train(c, d);
  EXPECT_FALSE(r.model.drag);
  EXPECT_EQ(r.model.parameter_count(), 4330u - 1426u);
}

TEST(Train, NonFiniteLossAborts) {
  const TrainConfig c = smoke_config(ModelKind::magnetic, 10);
  Dataset d = generate_dataset(c.setup, 64, 1);
  for (Sample& s : d.samples) s.targets[0][0] = std::numeric_limits<double>::quiet_NaN();
  try {
    train(c, d);
    FAIL() << "expected TrainingDiverged";
  } catch (const TrainingDiverged& e) {
    EXPECT_NE(std::string(e.what()).find("step 1"), std::string::npos) << e.what();
  }
}
