#pragma once

#include <algorithm>
#include <chrono>
#include <concepts>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "modnode/force_model.hpp"
#include "modnode/ground_truth.hpp"
#include "modnode/ode.hpp"
#include "modnode/tape.hpp"

namespace modnode {

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

/// Initial state plus true positions at times {nT/l : n = 1..l}.
struct Sample {
  State initial;
  std::vector<double> times;
  std::vector<Vec3> targets;
};

struct Dataset {
  Setup setup = Setup::standard;
  std::uint64_t seed = 0;
  double horizon = 0.2;
  std::size_t sequence_length = 2;
  double rtol = 3e-3;
  std::size_t resampled = 0;  // initial conditions redrawn after integration failure
  std::vector<Sample> samples;
};

struct DatasetOptions {
  double horizon = 0.2;
  std::size_t sequence_length = 2;
  double box = 2.0;
  double rtol = 3e-3;
  double atol = 1e-9;
};

/// Uniform initial conditions in [-box, box]^3 x [-box, box]^3, targets from
/// the true equations of motion integrated with dopri5.
inline Dataset generate_dataset(Setup setup, std::size_t n_samples, std::uint64_t seed,
                                const DatasetOptions& opt = {}) {
  if (n_samples == 0) throw std::invalid_argument("generate_dataset: n_samples must be >= 1");
  if (opt.sequence_length == 0 || !(opt.horizon > 0.0)) {
    throw std::invalid_argument("generate_dataset: sequence length and horizon must be positive");
  }
  Dataset ds;
  ds.setup = setup;
  ds.seed = seed;
  ds.horizon = opt.horizon;
  ds.sequence_length = opt.sequence_length;
  ds.rtol = opt.rtol;
  ds.samples.reserve(n_samples);

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> box(-opt.box, opt.box);
  const auto times = uniform_times(opt.horizon, opt.sequence_length);
  auto force = [setup](const Vec3& x, const Vec3& v) { return truth_force(setup, x, v); };
  const Dopri5Options dopt{opt.rtol, opt.atol};

  while (ds.samples.size() < n_samples) {
    State s0;
    for (double& c : s0.x) c = box(rng);
    for (double& c : s0.v) c = box(rng);
    try {
      const Trajectory tr = dopri5_integrate(force, s0, times, dopt);
      Sample smp{s0, times, {}};
      for (std::size_t i = 1; i < tr.states.size(); ++i) smp.targets.push_back(tr.states[i].x);
      ds.samples.push_back(std::move(smp));
    } catch (const IntegrationError&) {
      ++ds.resampled;
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Batch mean of (1/l) sum_n |x_pred(nT/l) - x_true(nT/l)|^2 with x_pred from
/// an RK4 rollout of `rk4_steps` steps (a multiple of l).
inline NodeId pred_loss(Tape& tape, const BoundModel& model, std::span<const Sample> batch, std::size_t rk4_steps) {
  if (batch.empty()) throw std::invalid_argument("pred_loss: empty batch");
  auto force = [&model](Tape& t, NodeId x, NodeId v) { return total_force(t, model, x, v); };
  std::optional<NodeId> total;
  for (const Sample& s : batch) {
    const std::size_t l = s.targets.size();
    if (l == 0 || rk4_steps % l != 0) {
      throw std::invalid_argument("pred_loss: rk4 steps must be a positive multiple of the sequence length");
    }
    const double horizon = s.times.back();
    const NodeId x0 = tape.variable(std::span<const double>(s.initial.x));
    const NodeId v0 = tape.variable(std::span<const double>(s.initial.v));
    const TapeTrajectory tr = rk4_rollout(tape, force, x0, v0, horizon, rk4_steps);
    const std::size_t stride = rk4_steps / l;
    std::optional<NodeId> err;
    for (std::size_t n = 0; n < l; ++n) {
      const NodeId target = tape.variable(std::span<const double>(s.targets[n]));
      const NodeId e = tape.squared_norm(tape.subtract(tr.x[(n + 1) * stride], target));
      err = err ? tape.add(*err, e) : e;
    }
    const NodeId per_sample = tape.scale(1.0 / static_cast<double>(l), *err);
    total = total ? tape.add(*total, per_sample) : per_sample;
  }
  return tape.scale(1.0 / static_cast<double>(batch.size()), *total);
}

/// |div B(point)|^2 for a model whose magnetic field is learned directly.
inline NodeId divergence_penalty(Tape& tape, const BoundModel& model, const Vec3& point) {
  if (!model.magnetic || model.model->magnetic_kind != MagneticKind::direct) {
    throw std::invalid_argument("divergence_penalty: model has no directly learned magnetic field");
  }
  const NodeId x = tape.variable(std::span<const double>(point));
  const NodeId div = divergence_from_jacobian(tape, mlp_input_jacobian(tape, *model.magnetic, x));
  return tape.multiply(div, div);
}

template <std::uniform_random_bit_generator Rng>
NodeId divergence_penalty(Tape& tape, const BoundModel& model, Rng& rng, double box = 2.0) {
  std::uniform_real_distribution<double> u(-box, box);
  Vec3 p{};
  for (double& c : p) c = u(rng);
  return divergence_penalty(tape, model, p);
}

// ---------------------------------------------------------------------------
// Optimisation
// ---------------------------------------------------------------------------

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t step = 0;
  std::vector<double> m;
  std::vector<double> v;
};

/// Adam with bias-corrected moments.
inline void adam_step(AdamState& s, std::span<double> params, std::span<const double> grads, double lr) {
  if (params.size() != grads.size()) throw std::invalid_argument("adam_step: gradient size mismatch");
  if (s.m.empty()) {
    s.m.assign(params.size(), 0.0);
    s.v.assign(params.size(), 0.0);
  }
  if (s.m.size() != params.size()) throw std::invalid_argument("adam_step: state size mismatch");
  ++s.step;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    s.m[i] = s.beta1 * s.m[i] + (1.0 - s.beta1) * grads[i];
    s.v[i] = s.beta2 * s.v[i] + (1.0 - s.beta2) * grads[i] * grads[i];
    const double mhat = s.m[i] / c1;
    const double vhat = s.v[i] / c2;
    params[i] -= lr * mhat / (std::sqrt(vhat) + s.epsilon);
  }
}

/// Multiplies the learning rate by `factor` whenever the best exponential
/// moving average of the loss has not improved for `patience` updates.
class PlateauScheduler {
 public:
  PlateauScheduler(double lr, double factor = 0.8, std::size_t patience = 960, double smoothing = 0.99)
      : lr_(lr), factor_(factor), patience_(patience), smoothing_(smoothing) {}

  double update(double loss) {
    if (!std::isfinite(loss)) throw std::invalid_argument("PlateauScheduler: non-finite loss");
    ema_ = steps_++ == 0 ? loss : smoothing_ * ema_ + (1.0 - smoothing_) * loss;
    if (ema_ < best_) {
      best_ = ema_;
      stale_ = 0;
    } else if (++stale_ >= patience_) {
      lr_ *= factor_;
      stale_ = 0;
      ++decays_;
    }
    return lr_;
  }

  [[nodiscard]] double lr() const { return lr_; }
  [[nodiscard]] std::size_t decays() const { return decays_; }
  [[nodiscard]] double smoothed_loss() const { return steps_ ? ema_ : std::numeric_limits<double>::quiet_NaN(); }

 private:
  double lr_;
  double factor_;
  std::size_t patience_;
  double smoothing_;
  double ema_ = 0.0;
  std::size_t steps_ = 0;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t stale_ = 0;
  std::size_t decays_ = 0;
};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

enum class Profile { desk, paper };

inline std::string_view to_string(Profile p) { return p == Profile::desk ? "desk" : "paper"; }
inline Profile parse_profile(std::string_view s) {
  if (s == "desk") return Profile::desk;
  if (s == "paper") return Profile::paper;
  throw std::invalid_argument("unknown profile '" + std::string(s) + "'");
}

struct TrainConfig {
  ModelKind model = ModelKind::magnetic;
  Setup setup = Setup::standard;
  Profile profile = Profile::desk;
  std::size_t steps = 2000;
  double horizon = 0.2;
  std::size_t sequence_length = 2;
  std::size_t rk4_steps = 8;
  double learning_rate = 15e-3;
  double divergence_weight = 0.0;
  double decay_factor = 0.8;
  std::size_t patience = 960;
  double loss_smoothing = 0.99;
  std::size_t batch = 32;
  std::size_t dataset_size = 1024;
  std::uint64_t seed = 0;
  double box = 2.0;
  std::size_t log_every = 100;
  bool drag = true;    // false removes the drag module from models that have one
  double rtol = 3e-3;  // dopri5 tolerance for data generation and evaluation

  /// Defaults for a model kind: its learning rate and divergence weight;
  /// steps and dataset size by profile.
  static TrainConfig preset(ModelKind model, Setup setup, Profile profile, std::uint64_t seed) {
    TrainConfig c;
    c.model = model;
    c.setup = setup;
    c.profile = profile;
    c.seed = seed;
    c.learning_rate = default_learning_rate(model);
    c.divergence_weight = model == ModelKind::div_magnetic ? 2e-7 : 0.0;
    if (profile == Profile::paper) {
      c.steps = model == ModelKind::sonode_x2 ? 32000 : 16000;
      c.dataset_size = 4096;
    } else {
      c.steps = model == ModelKind::sonode_x2 ? 4000 : 2000;
      c.dataset_size = 1024;
    }
    return c;
  }

  void validate() const {
    if (sequence_length == 0) throw std::invalid_argument("TrainConfig: sequence length must be >= 1");
    if (!(horizon > 0.0)) throw std::invalid_argument("TrainConfig: horizon must be positive");
    if (rk4_steps == 0 || rk4_steps % sequence_length != 0) {
      throw std::invalid_argument("TrainConfig: rk4 steps must be a positive multiple of the sequence length");
    }
    if (batch == 0 || dataset_size == 0) throw std::invalid_argument("TrainConfig: batch and dataset size must be >= 1");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("TrainConfig: learning rate must be positive");
    if (log_every == 0) throw std::invalid_argument("TrainConfig: log interval must be >= 1");
    if (!(rtol > 0.0)) throw std::invalid_argument("TrainConfig: rtol must be positive");
  }
};

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// Window means over the `log_every` steps ending at `step`.
struct LogRow {
  std::size_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  std::optional<double> div_penalty;
};

struct TrainResult {
  ForceModel model;
  std::vector<LogRow> log;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  double wall_seconds = 0.0;
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Loss and parameter gradient for one batch.
struct LossGradient {
  double loss = 0.0;  // total
  double pred = 0.0;
  std::optional<double> div_penalty;
  std::vector<double> grad;
};

inline LossGradient loss_and_gradient(Tape& tape, const ForceModel& model, std::span<const Sample> batch,
                                      std::size_t rk4_steps, double divergence_weight,
                                      std::optional<Vec3> divergence_point) {
  tape.clear();
  const BoundModel bound = bind(tape, model);
  const NodeId pred = pred_loss(tape, bound, batch, rk4_steps);
  NodeId total = pred;
  LossGradient out;
  if (divergence_point) {
    const NodeId pen = divergence_penalty(tape, bound, *divergence_point);
    out.div_penalty = tape.scalar_value(pen);
    total = tape.add(pred, tape.scale(divergence_weight, pen));
  }
  tape.backward(total);
  out.loss = tape.scalar_value(total);
  out.pred = tape.scalar_value(pred);
  out.grad.assign(model.parameter_count(), 0.0);
  accumulate_gradient(tape, bound, out.grad);
  return out;
}

/// Trains a fresh model of `config.model` on `data`. Deterministic per seed.
/// `progress` (optional) receives every log row as it is produced.
inline TrainResult train(const TrainConfig& config, const Dataset& data,
                         const std::function<void(const LogRow&)>& progress = {},
                         std::optional<ForceModel> initial = std::nullopt) {
  config.validate();
  if (data.samples.empty()) throw std::invalid_argument("train: empty dataset");
  const auto start = std::chrono::steady_clock::now();

  TrainResult result;
  result.model = initial ? std::move(*initial) : make_model(config.model, config.seed);
  if (!config.drag) result.model.drag.reset();
  result.model.validate();
  const bool use_div = config.divergence_weight > 0.0;
  if (use_div && result.model.magnetic_kind != MagneticKind::direct) {
    throw std::invalid_argument("train: divergence penalty requires a directly learned magnetic field");
  }

  std::mt19937_64 rng(detail::splitmix64(config.seed ^ 0x7261696eULL));
  std::uniform_real_distribution<double> box(-config.box, config.box);
  std::vector<std::size_t> order(data.samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t cursor = order.size();

  AdamState adam;
  PlateauScheduler sched(config.learning_rate, config.decay_factor, config.patience, config.loss_smoothing);
  std::vector<double> params = result.model.flat_parameters();
  std::vector<Sample> batch;
  Tape tape;

  double win_loss = 0.0, win_div = 0.0, win_lr = 0.0;
  std::size_t win_n = 0;
  for (std::size_t step = 1; step <= config.steps; ++step) {
    batch.clear();
    const std::size_t bsize = std::min(config.batch, data.samples.size());
    while (batch.size() < bsize) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      batch.push_back(data.samples[order[cursor++]]);
    }
    std::optional<Vec3> div_point;
    if (use_div) div_point = Vec3{box(rng), box(rng), box(rng)};

    const double lr = sched.lr();
    const LossGradient lg =
        loss_and_gradient(tape, result.model, batch, config.rk4_steps, config.divergence_weight, div_point);
    const bool finite_grad = std::all_of(lg.grad.begin(), lg.grad.end(), [](double g) { return std::isfinite(g); });
    if (!std::isfinite(lg.loss) || !finite_grad) {
      std::ostringstream msg;
      msg << "non-finite loss at step " << step << " (lr " << lr << ", loss " << lg.loss << ")";
      throw TrainingDiverged(msg.str());
    }
    if (step == 1) result.initial_loss = lg.loss;
    result.final_loss = lg.loss;

    adam_step(adam, params, lg.grad, lr);
    result.model.set_flat_parameters(params);
    sched.update(lg.loss);

    win_loss += lg.loss;
    win_lr += lr;
    if (lg.div_penalty) win_div += *lg.div_penalty;
    ++win_n;
    if (step % config.log_every == 0 || step == config.steps) {
      LogRow row{step, win_loss / static_cast<double>(win_n), win_lr / static_cast<double>(win_n), std::nullopt};
      if (use_div) row.div_penalty = win_div / static_cast<double>(win_n);
      result.log.push_back(row);
      if (progress) progress(row);
      win_loss = win_div = win_lr = 0.0;
      win_n = 0;
    }
  }
  result.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

}  // namespace modnode
