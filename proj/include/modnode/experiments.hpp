#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "modnode/serialization.hpp"

namespace modnode {

// ---------------------------------------------------------------------------
// Single runs
// ---------------------------------------------------------------------------

inline Dataset dataset_for(const TrainConfig& c) {
  DatasetOptions opt;
  opt.horizon = c.horizon;
  opt.sequence_length = c.sequence_length;
  opt.box = c.box;
  opt.rtol = c.rtol;
  return generate_dataset(c.setup, c.dataset_size, c.seed, opt);
}

inline TestOptions test_options_for(const TrainConfig& c) {
  TestOptions t;
  t.model_rtol = c.rtol;
  t.reference_rtol = c.rtol;
  return t;
}

/// Median test MSE over the trajectories the model could integrate;
/// infinite when there were none.
inline double score(const EvalReport& r) {
  return r.mse.empty() ? std::numeric_limits<double>::infinity() : r.summary.median;
}

struct RunResult {
  TrainConfig config;
  std::filesystem::path dir;
  ForceModel model;
  double final_loss = 0.0;
  EvalReport report;
  bool reused = false;
  bool diverged = false;
  std::string error;
};

inline std::string run_label(const TrainConfig& c) {
  std::string s = std::string(to_string(c.model)) + "-s" + std::to_string(c.seed);
  if (!c.drag) s += "-nodrag";
  return s;
}

/// Trains (or reloads, when `reuse` and an identical config was trained into
/// `dir` before) and scores on the run's own setup. Writes checkpoint.json,
/// training_log.csv and report.json into `dir`.
inline RunResult run_training(const TrainConfig& config, const std::filesystem::path& dir, bool reuse,
                              const std::function<void(const std::string&)>& log = {}) {
  RunResult r;
  r.config = config;
  r.dir = dir;
  std::filesystem::create_directories(dir);
  const auto ckpt_path = dir / "checkpoint.json";
  const json config_json = to_json(config);

  if (reuse && std::filesystem::exists(ckpt_path)) {
    try {
      Checkpoint c = load_checkpoint(ckpt_path.string());
      if (c.config == config_json) {
        r.model = std::move(c.model);
        r.final_loss = c.final_loss;
        r.reused = true;
      }
    } catch (const std::exception&) {
      // unreadable leftovers are retrained
    }
  }

  if (!r.reused) {
    if (log) log("train " + std::string(to_string(config.setup)) + "/" + run_label(config));
    try {
      const TrainResult tr = train(config, dataset_for(config));
      write_file((dir / "training_log.csv").string(), training_log_csv(tr.log));
      Checkpoint c;
      c.model = tr.model;
      c.config = config_json;
      c.seed = config.seed;
      c.created = utc_timestamp();
      c.final_loss = tr.final_loss;
      save_checkpoint(c, ckpt_path.string());
      r.model = tr.model;
      r.final_loss = tr.final_loss;
    } catch (const TrainingDiverged& e) {
      r.diverged = true;
      r.error = e.what();
      r.report.model = std::string(to_string(config.model));
      r.report.setup = std::string(to_string(config.setup));
      r.report.failures = test_options_for(config).n_test;
      write_file((dir / "report.json").string(),
                 json{{"model", r.report.model}, {"diverged", r.error}, {"config", config_json}}.dump(1) + "\n");
      if (log) log("diverged " + run_label(config) + ": " + r.error);
      return r;
    }
  }

  r.report = test_mse(r.model, config.setup, test_options_for(config));
  json rep = to_json(r.report, config_json);
  rep["score"] = score(r.report);
  rep["final_loss"] = r.final_loss;
  write_file((dir / "report.json").string(), rep.dump(1) + "\n");
  if (log) {
    log((r.reused ? "reuse " : "done  ") + std::string(to_string(config.setup)) + "/" + run_label(config) +
        " median test MSE " + detail::num(score(r.report)));
  }
  return r;
}

/// Runs independent trainings on up to `jobs` worker threads. Results keep
/// the order of `configs`.
inline std::vector<RunResult> run_all(const std::vector<TrainConfig>& configs, const std::filesystem::path& runs_root,
                                      std::size_t jobs, bool reuse,
                                      const std::function<void(const std::string&)>& log = {}) {
  std::vector<RunResult> results(configs.size());
  std::vector<std::exception_ptr> errors(configs.size());
  std::atomic<std::size_t> next{0};
  std::mutex log_mutex;
  auto safe_log = [&](const std::string& s) {
    if (!log) return;
    std::lock_guard lock(log_mutex);
    log(s);
  };
  auto worker = [&] {
    for (std::size_t i = next++; i < configs.size(); i = next++) {
      try {
        const TrainConfig& c = configs[i];
        results[i] = run_training(c, runs_root / std::string(to_string(c.setup)) / run_label(c), reuse, safe_log);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t n = std::clamp<std::size_t>(jobs, 1, std::max<std::size_t>(configs.size(), 1));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return results;
}

// ---------------------------------------------------------------------------
// Field recovery
// ---------------------------------------------------------------------------

struct FieldRecovery {
  double magnetic_median_error = std::numeric_limits<double>::quiet_NaN();  // componentwise, over the grid
  double potential_offset_std = std::numeric_limits<double>::quiet_NaN();   // std of V_learned - V_true
};

/// Compares learned and true fields on a resolution^3 grid over [-1, 1]^3.
inline FieldRecovery field_recovery(const ForceModel& model, Setup setup, std::size_t resolution = 5) {
  ForceEvaluator eval(model);
  const FieldSource learned = FieldSource::of(eval);
  const FieldSource truth = FieldSource::of(setup);
  FieldRecovery out;
  if (learned.magnetic) {
    const FieldGrid a = field_grid(learned, Field::magnetic, {}, resolution);
    const FieldGrid b = field_grid(truth, Field::magnetic, {}, resolution);
    std::vector<double> err;
    for (std::size_t i = 0; i < a.values.size(); ++i) {
      for (int k = 0; k < 3; ++k) err.push_back(std::abs(a.values[i][k] - b.values[i][k]));
    }
    out.magnetic_median_error = median(err);
  }
  if (learned.potential) {
    const FieldGrid a = field_grid(learned, Field::potential, {}, resolution);
    const FieldGrid b = field_grid(truth, Field::potential, {}, resolution);
    std::vector<double> diff;
    for (std::size_t i = 0; i < a.values.size(); ++i) diff.push_back(a.values[i][0] - b.values[i][0]);
    double mean = 0.0;
    for (double d : diff) mean += d;
    mean /= static_cast<double>(diff.size());
    double var = 0.0;
    for (double d : diff) var += (d - mean) * (d - mean);
    out.potential_offset_std = std::sqrt(var / static_cast<double>(diff.size()));
  }
  return out;
}

/// Writes V, B and drag grids of a model (and of the truth) as CSV files.
inline void export_fields(const ForceModel& model, Setup setup, const std::filesystem::path& dir,
                          const std::string& prefix, std::size_t resolution = 5) {
  std::filesystem::create_directories(dir);
  ForceEvaluator eval(model);
  const FieldSource learned = FieldSource::of(eval);
  const FieldSource truth = FieldSource::of(setup);
  for (Field f : {Field::potential, Field::magnetic, Field::drag}) {
    const std::string name(to_string(f));
    const bool has = f == Field::potential ? bool(learned.potential)
                     : f == Field::magnetic ? bool(learned.magnetic)
                                            : bool(learned.drag);
    if (has) write_file((dir / (prefix + "-" + name + ".csv")).string(), field_grid_csv(field_grid(learned, f, {}, resolution)));
    const bool truth_has = f != Field::drag || truth.drag;
    const auto truth_path = dir / ("truth-" + name + ".csv");
    if (truth_has && !std::filesystem::exists(truth_path)) {
      write_file(truth_path.string(), field_grid_csv(field_grid(truth, f, {}, resolution)));
    }
  }
}

// ---------------------------------------------------------------------------
// Energy
// ---------------------------------------------------------------------------

struct EnergyStats {
  std::vector<double> drift;           // max |E(t) - E(0)| per integrable test trajectory, true potential
  std::vector<double> relative_drift;  // the same divided by |E(0)|
  std::size_t failures = 0;
};

inline constexpr double kEnergyHorizon = 7.0;
inline constexpr std::size_t kEnergyPoints = 701;

inline Dopri5Options model_solver(const TestOptions& opt, double rtol) {
  Dopri5Options o{rtol, opt.atol};
  o.max_steps = opt.max_model_steps;
  return o;
}

/// Energy relative to the true potential along model trajectories from the
/// test initial conditions. Trajectories the model cannot integrate are
/// counted and left out, as for the test MSE.
inline EnergyStats energy_stats(const ForceModel& model, Setup setup, const TestOptions& opt) {
  ForceEvaluator eval(model);
  EnergyStats s;
  for (const State& s0 : test_initial_conditions(setup, opt)) {
    try {
      const auto trace = energy_trace(eval, setup, s0, kEnergyHorizon, kEnergyPoints, model_solver(opt, opt.model_rtol));
      const double d = max_energy_drift(trace);
      s.drift.push_back(d);
      s.relative_drift.push_back(d / std::abs(trace.front().energy));
    } catch (const IntegrationError&) {
      ++s.failures;
    }
  }
  return s;
}

/// Median over test trajectories of drift(rtol) / drift(rtol / 10), energy
/// measured with the model's own potential. Only meaningful for models
/// without drag or generic terms.
inline double conservation_ratio(const ForceModel& model, Setup setup, const TestOptions& opt) {
  ForceEvaluator eval(model);
  ForceEvaluator pot(model);
  auto own_potential = [&pot](const Vec3& x) { return pot.potential(x); };
  std::vector<double> ratios;
  for (const State& s0 : test_initial_conditions(setup, opt)) {
    try {
      const double loose = max_energy_drift(
          energy_trace(eval, own_potential, s0, kEnergyHorizon, kEnergyPoints, model_solver(opt, opt.model_rtol)));
      const double tight = max_energy_drift(
          energy_trace(eval, own_potential, s0, kEnergyHorizon, kEnergyPoints, model_solver(opt, opt.model_rtol / 10.0)));
      ratios.push_back(loose / std::max(tight, std::numeric_limits<double>::min()));
    } catch (const IntegrationError&) {
    }
  }
  return ratios.empty() ? std::numeric_limits<double>::quiet_NaN() : median(ratios);
}

/// Largest |v . (v x B(x))| relative to |v|^2 |B| over random probes.
inline double magnetic_power(const ForceModel& model, std::uint64_t seed, std::size_t probes = 1000) {
  ForceEvaluator eval(model);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  double worst = 0.0;
  for (std::size_t i = 0; i < probes; ++i) {
    const Vec3 x{u(rng), u(rng), u(rng)}, v{u(rng), u(rng), u(rng)};
    const Vec3 b = eval.magnetic_field(x);
    const double scale = squared_norm(v) * std::sqrt(squared_norm(b));
    if (scale > 0.0) worst = std::max(worst, std::abs(dot(v, cross(v, b))) / scale);
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Experiment presets
// ---------------------------------------------------------------------------

enum class Experiment { exp1a, exp1b, exp2, exp3, exp4 };

inline std::string_view to_string(Experiment e) {
  switch (e) {
    case Experiment::exp1a: return "exp1a";
    case Experiment::exp1b: return "exp1b";
    case Experiment::exp2: return "exp2";
    case Experiment::exp3: return "exp3";
    case Experiment::exp4: return "exp4";
  }
  return "?";
}

inline Experiment parse_experiment(std::string_view s) {
  for (Experiment e : {Experiment::exp1a, Experiment::exp1b, Experiment::exp2, Experiment::exp3, Experiment::exp4}) {
    if (to_string(e) == s) return e;
  }
  throw std::invalid_argument("unknown experiment '" + std::string(s) + "'");
}

inline Setup experiment_setup(Experiment e) {
  switch (e) {
    case Experiment::exp1a: return Setup::standard;
    case Experiment::exp1b: return Setup::standard_no_drag;
    case Experiment::exp2: return Setup::magnetic;
    case Experiment::exp3: return Setup::periodic;
    case Experiment::exp4: return Setup::combined;
  }
  return Setup::standard;
}

inline std::vector<ModelKind> experiment_models(Experiment e) {
  using enum ModelKind;
  switch (e) {
    case Experiment::exp1a: return {magnetic, div_magnetic, vector, basic, sonode, sonode_x2};
    case Experiment::exp1b: return {sonode, magnetic, magnetic_lnn};
    case Experiment::exp2: return {magnetic, div_magnetic, vector};
    case Experiment::exp3: return {periodic, magnetic};
    case Experiment::exp4: return {magnetic};
  }
  return {};
}

struct ExperimentOptions {
  Profile profile = Profile::desk;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4};
  json overrides = json::object();            // config keys applied over every preset
  std::optional<std::vector<ModelKind>> models;  // replaces the preset's model list
  std::filesystem::path out = "experiments";
  std::size_t jobs = 1;
  bool reuse = true;
  std::function<void(const std::string&)> log;
};

/// Preset, then overrides, then the fields the experiment fixes.
inline TrainConfig experiment_config(ModelKind kind, Setup setup, std::uint64_t seed, const ExperimentOptions& opt) {
  TrainConfig c = TrainConfig::preset(kind, setup, opt.profile, seed);
  apply_json(c, opt.overrides);
  c.model = kind;
  c.setup = setup;
  c.seed = seed;
  c.profile = opt.profile;
  if (setup == Setup::standard_no_drag) c.drag = false;
  return c;
}

struct ExperimentResult {
  Experiment experiment = Experiment::exp1a;
  json summary;                          // also written to <out>/<exp>/summary.json
  std::map<std::string, double> median;  // label -> median over seeds of each run's median test MSE
  std::vector<RunResult> runs;
};

namespace detail {

inline double median_of(const std::vector<double>& v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  return median(v);
}

inline json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

inline json list_json(const std::vector<double>& v) {
  json a = json::array();
  for (double x : v) a.push_back(finite_or_null(x));
  return a;
}

}  // namespace detail

inline ExperimentResult run_experiment(Experiment exp, const ExperimentOptions& opt) {
  if (opt.seeds.empty()) throw std::invalid_argument("experiment: need at least one seed");
  ExperimentResult res;
  res.experiment = exp;
  const auto exp_dir = opt.out / std::string(to_string(exp));
  const auto runs_root = opt.out / "runs";
  std::filesystem::create_directories(exp_dir);

  json summary{{"experiment", to_string(exp)},
               {"profile", to_string(opt.profile)},
               {"seeds", opt.seeds},
               {"overrides", opt.overrides},
               {"score", "median over seeds of each run's median test MSE; trajectories a model fails to integrate are excluded and counted"}};

  if (exp == Experiment::exp4) {
    // M_A: complex field, simple potential; M_B: simple field, complex potential.
    std::vector<TrainConfig> configs;
    for (auto seed : opt.seeds) {
      configs.push_back(experiment_config(ModelKind::magnetic, Setup::magnetic, seed, opt));
      configs.push_back(experiment_config(ModelKind::magnetic, Setup::standard, seed, opt));
    }
    res.runs = run_all(configs, runs_root, opt.jobs, opt.reuse, opt.log);
    std::map<std::string, std::vector<double>> scores;
    std::map<std::string, std::vector<std::size_t>> failures;
    json per_seed = json::array();
    for (std::size_t s = 0; s < opt.seeds.size(); ++s) {
      const RunResult& a = res.runs[2 * s];
      const RunResult& b = res.runs[2 * s + 1];
      if (a.diverged || b.diverged) {
        for (const char* k : {"A", "B", "C"}) {
          scores[k].push_back(std::numeric_limits<double>::infinity());
          failures[k].push_back(test_options_for(a.config).n_test);
        }
        continue;
      }
      const ForceModel c = combine_modules(b.model, a.model, a.model);
      Checkpoint ck;
      ck.model = c;
      ck.config = json{{"potential_from", b.dir.string()}, {"magnetic_from", a.dir.string()},
                       {"drag_from", a.dir.string()}, {"seed", opt.seeds[s]}};
      ck.seed = opt.seeds[s];
      ck.created = utc_timestamp();
      save_checkpoint(ck, (exp_dir / ("combined-s" + std::to_string(opt.seeds[s]) + ".json")).string());

      const TestOptions topt = test_options_for(a.config);
      const EvalReport ra = test_mse(a.model, Setup::combined, topt);
      const EvalReport rb = test_mse(b.model, Setup::combined, topt);
      const EvalReport rc = test_mse(c, Setup::combined, topt);
      for (const auto& [label, rep] : {std::pair{"A", &ra}, std::pair{"B", &rb}, std::pair{"C", &rc}}) {
        scores[label].push_back(score(*rep));
        failures[label].push_back(rep->failures);
      }
      per_seed.push_back(json{{"seed", opt.seeds[s]},
                              {"A", to_json(ra)},
                              {"B", to_json(rb)},
                              {"C", to_json(rc)}});

      if (s == 0) {
        const State s0 = test_initial_conditions(Setup::combined, topt).front();
        const auto times = uniform_times(topt.horizon, topt.sequence_length);
        auto truth = [](const Vec3& x, const Vec3& v) { return truth_force(Setup::combined, x, v); };
        write_file((exp_dir / "trajectory-truth.csv").string(),
                   trajectory_csv(dopri5_integrate(truth, s0, times, {topt.reference_rtol, topt.atol})));
        const std::pair<const char*, const ForceModel*> models[] = {{"A", &a.model}, {"B", &b.model}, {"C", &c}};
        for (const auto& [label, m] : models) {
          try {
            ForceEvaluator f(*m);
            write_file((exp_dir / ("trajectory-" + std::string(label) + ".csv")).string(),
                       trajectory_csv(dopri5_integrate(f, s0, times, model_solver(topt, topt.model_rtol))));
          } catch (const IntegrationError&) {
          }
        }
      }
    }
    json models = json::object();
    for (const auto& [k, v] : scores) {
      res.median[k] = detail::median_of(v);
      models[k] = json{{"per_seed", detail::list_json(v)},
                       {"failures_per_seed", failures[k]},
                       {"median", detail::finite_or_null(res.median[k])}};
    }
    summary["models"] = models;
    summary["runs"] = per_seed;
    summary["legend"] = json{{"A", "magnetic model trained on the magnetic setup"},
                             {"B", "magnetic model trained on the standard setup"},
                             {"C", "potential of B with magnetic field and drag of A"},
                             {"evaluated_on", "combined"}};
  } else {
    const Setup setup = experiment_setup(exp);
    const auto kinds = opt.models.value_or(experiment_models(exp));
    std::vector<TrainConfig> configs;
    for (ModelKind k : kinds) {
      for (auto seed : opt.seeds) configs.push_back(experiment_config(k, setup, seed, opt));
    }
    res.runs = run_all(configs, runs_root, opt.jobs, opt.reuse, opt.log);

    json models = json::object();
    json fields = json::object();
    json energy = json::object();
    for (std::size_t m = 0; m < kinds.size(); ++m) {
      const std::string name(to_string(kinds[m]));
      std::vector<double> scores, b_err, v_std, drift, rel_drift, cons;
      std::vector<double> power;
      std::vector<std::size_t> failures, energy_failures;
      for (std::size_t s = 0; s < opt.seeds.size(); ++s) {
        const RunResult& r = res.runs[m * opt.seeds.size() + s];
        scores.push_back(r.diverged ? std::numeric_limits<double>::infinity() : score(r.report));
        failures.push_back(r.report.failures);
        if (r.diverged) continue;
        const std::string prefix = name + "-s" + std::to_string(opt.seeds[s]);
        if (r.model.magnetic || r.model.potential) {
          const FieldRecovery fr = field_recovery(r.model, setup);
          if (r.model.magnetic) b_err.push_back(fr.magnetic_median_error);
          if (r.model.potential) v_std.push_back(fr.potential_offset_std);
          export_fields(r.model, setup, exp_dir / "fields", prefix);
        }
        if (exp == Experiment::exp1b) {
          const TestOptions topt = test_options_for(r.config);
          const EnergyStats es = energy_stats(r.model, setup, topt);
          drift.push_back(es.drift.empty() ? std::numeric_limits<double>::infinity() : median(es.drift));
          rel_drift.push_back(es.relative_drift.empty() ? std::numeric_limits<double>::infinity()
                                                        : median(es.relative_drift));
          energy_failures.push_back(es.failures);
          ForceEvaluator f(r.model);
          const State s0 = test_initial_conditions(setup, topt).front();
          try {
            write_file((exp_dir / ("energy-" + prefix + ".csv")).string(),
                       energy_trace_csv(energy_trace(f, setup, s0, kEnergyHorizon, kEnergyPoints,
                                                     model_solver(topt, topt.model_rtol))));
          } catch (const IntegrationError&) {
          }
          if (s == 0) {
            auto truth = [setup](const Vec3& x, const Vec3& v) { return truth_force(setup, x, v); };
            write_file((exp_dir / "energy-truth.csv").string(),
                       energy_trace_csv(energy_trace(truth, setup, s0, kEnergyHorizon, kEnergyPoints,
                                                     {topt.reference_rtol, topt.atol})));
          }
          if (r.model.potential && !r.model.drag && !r.model.generic) {
            cons.push_back(conservation_ratio(r.model, setup, topt));
            if (r.model.magnetic) power.push_back(magnetic_power(r.model, opt.seeds[s]));
          }
        }
      }
      res.median[name] = detail::median_of(scores);
      models[name] = json{{"per_seed", detail::list_json(scores)},
                          {"failures_per_seed", failures},
                          {"median", detail::finite_or_null(res.median[name])}};
      if (!b_err.empty() || !v_std.empty()) {
        fields[name] = json{{"grid", "5^3 over [-1,1]^3"},
                            {"magnetic_median_error", detail::list_json(b_err)},
                            {"potential_offset_std", detail::list_json(v_std)}};
      }
      if (exp == Experiment::exp1b) {
        json e{{"median_max_drift", detail::list_json(drift)},
               {"median_relative_drift", detail::list_json(rel_drift)},
               {"failures_per_seed", energy_failures}};
        if (!cons.empty()) {
          e["conservation_ratio"] = detail::list_json(cons);
          if (!power.empty()) e["magnetic_power"] = detail::list_json(power);
        }
        energy[name] = e;
      }
    }
    summary["setup"] = to_string(setup);
    summary["models"] = models;
    if (!fields.empty()) summary["field_recovery"] = fields;
    if (exp == Experiment::exp1b) {
      energy["definition"] =
          "per seed: median over test trajectories of max |E(t)-E(0)| on t in [0,7], true potential; "
          "conservation_ratio: median drift(rtol)/drift(rtol/10) with the model's own potential";
      summary["energy"] = energy;
    }
  }

  json run_list = json::array();
  for (const auto& r : res.runs) {
    run_list.push_back(json{{"dir", r.dir.string()}, {"reused", r.reused}, {"diverged", r.diverged}});
  }
  summary["run_dirs"] = run_list;
  res.summary = summary;
  write_file((exp_dir / "summary.json").string(), summary.dump(1) + "\n");
  return res;
}

}  // namespace modnode
