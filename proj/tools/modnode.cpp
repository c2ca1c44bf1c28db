// modnode command-line interface: datasets, training, evaluation, module
// recombination, exports and the experiment presets.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "modnode/experiments.hpp"

using namespace modnode;

namespace {

// Flags shared by every subcommand that builds a training configuration.
// Precedence: flags > --config file > profile defaults.
struct CommonFlags {
  std::string config_path;
  std::string profile;
  std::uint64_t seed = 0;
  std::size_t steps = 0;
  double lr = 0.0;
  std::size_t batch = 0;
  double rtol = 0.0;
  CLI::Option* profile_opt = nullptr;
  CLI::Option* seed_opt = nullptr;
  CLI::Option* steps_opt = nullptr;
  CLI::Option* lr_opt = nullptr;
  CLI::Option* batch_opt = nullptr;
  CLI::Option* rtol_opt = nullptr;

  void add_to(CLI::App* app, bool with_training = true) {
    app->add_option("--config", config_path, "JSON file of config keys (overridden by flags)")->check(CLI::ExistingFile);
    profile_opt = app->add_option("--profile", profile, "desk (default) or paper")->check(CLI::IsMember({"desk", "paper"}));
    seed_opt = app->add_option("--seed", seed, "random seed (default 1)");
    rtol_opt = app->add_option("--rtol", rtol, "dopri5 relative tolerance (default 3e-3)")->check(CLI::PositiveNumber);
    if (with_training) {
      steps_opt = app->add_option("--steps", steps, "training steps (profile default)")->check(CLI::PositiveNumber);
      lr_opt = app->add_option("--lr", lr, "initial learning rate (per-model default)")->check(CLI::PositiveNumber);
      batch_opt = app->add_option("--batch", batch, "batch size (default 32)")->check(CLI::PositiveNumber);
    }
  }

  [[nodiscard]] json file() const {
    if (config_path.empty()) return json::object();
    json j = parse_json_text(read_file(config_path), config_path);
    if (!j.is_object()) throw FormatError(config_path + ": expected a JSON object");
    return j;
  }

  [[nodiscard]] json flags() const {
    json j = json::object();
    if (steps_opt && steps_opt->count()) j["steps"] = steps;
    if (lr_opt && lr_opt->count()) j["lr"] = lr;
    if (batch_opt && batch_opt->count()) j["batch"] = batch;
    if (rtol_opt && rtol_opt->count()) j["rtol"] = rtol;
    return j;
  }

  [[nodiscard]] Profile resolve_profile(const json& file) const {
    if (profile_opt->count()) return parse_profile(profile);
    if (file.contains("profile")) return parse_profile(file["profile"].get<std::string>());
    return Profile::desk;
  }

  [[nodiscard]] std::uint64_t resolve_seed(const json& file) const {
    if (seed_opt->count()) return seed;
    if (file.contains("seed")) return file["seed"].get<std::uint64_t>();
    return 1;
  }

  [[nodiscard]] double resolve_rtol(const json& file) const {
    if (rtol_opt->count()) return rtol;
    if (file.contains("rtol")) return file["rtol"].get<double>();
    return 3e-3;
  }
};

json without(json j, std::initializer_list<const char*> keys) {
  for (const char* k : keys) j.erase(k);
  return j;
}

std::string resolve_name(const CLI::Option* opt, const std::string& flag_value, const json& file, const char* key,
                         const std::string& fallback) {
  if (opt->count()) return flag_value;
  if (file.contains(key)) return file[key].get<std::string>();
  return fallback;
}

Vec3 parse_vec3(const std::string& s) {
  std::vector<double> v;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) v.push_back(std::stod(item));
  if (v.size() != 3) throw std::invalid_argument("expected three comma-separated numbers, got '" + s + "'");
  return {v[0], v[1], v[2]};
}

void note(const std::string& s) { std::cerr << s << "\n"; }

// Either a checkpoint or a ground-truth setup, for export commands.
struct ForceSource {
  std::string ckpt;
  std::string truth;

  void add_to(CLI::App* app) {
    auto* c = app->add_option("--ckpt", ckpt, "model checkpoint")->check(CLI::ExistingFile);
    auto* t = app->add_option("--truth", truth, "ground-truth setup instead of a model");
    c->excludes(t);
  }

  void require() const {
    if (ckpt.empty() == truth.empty()) throw std::invalid_argument("give exactly one of --ckpt or --truth");
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Modular neural ODEs: learn potential, magnetic and drag forces from trajectories"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Expand all help");

  // gen --------------------------------------------------------------------
  CommonFlags gen_flags;
  std::string gen_setup, gen_out;
  std::size_t gen_n = 0;
  auto* gen = app.add_subcommand("gen", "Generate a training dataset from a ground-truth setup");
  gen_flags.add_to(gen, false);
  auto* gen_setup_opt = gen->add_option("--setup", gen_setup, "ground-truth setup");
  auto* gen_n_opt = gen->add_option("--n", gen_n, "number of samples (profile default)")->check(CLI::PositiveNumber);
  gen->add_option("--out", gen_out, "dataset JSON")->required();

  // train ------------------------------------------------------------------
  CommonFlags train_flags;
  std::string train_model, train_setup, train_data, train_out, train_log;
  bool train_no_drag = false;
  auto* train_cmd = app.add_subcommand("train", "Train a force model");
  train_flags.add_to(train_cmd);
  auto* train_model_opt = train_cmd->add_option("--model", train_model, "model kind (default magnetic)");
  auto* train_setup_opt = train_cmd->add_option("--setup", train_setup, "ground-truth setup (default standard)");
  train_cmd->add_option("--data", train_data, "dataset JSON (generated from the config when absent)")
      ->check(CLI::ExistingFile);
  train_cmd->add_option("--out", train_out, "checkpoint JSON")->required();
  train_cmd->add_option("--log", train_log, "training log CSV");
  train_cmd->add_flag("--no-drag", train_no_drag, "leave out the drag module");

  // eval -------------------------------------------------------------------
  CommonFlags eval_flags;
  std::string eval_ckpt, eval_setup, eval_out;
  std::size_t eval_n = 16;
  auto* eval_cmd = app.add_subcommand("eval", "Score a checkpoint on test trajectories");
  eval_flags.add_to(eval_cmd, false);
  eval_cmd->add_option("--ckpt", eval_ckpt, "checkpoint JSON")->required()->check(CLI::ExistingFile);
  auto* eval_setup_opt = eval_cmd->add_option("--setup", eval_setup, "setup to test on (default: training setup)");
  eval_cmd->add_option("--n-test", eval_n, "number of test trajectories")->check(CLI::PositiveNumber);
  eval_cmd->add_option("--out", eval_out, "report JSON (stdout when absent)");

  // combine ----------------------------------------------------------------
  std::string comb_pot, comb_mag, comb_drag, comb_out;
  auto* comb = app.add_subcommand("combine", "Build a model from modules of other checkpoints");
  comb->add_option("--potential-from", comb_pot, "checkpoint providing the potential")->required()->check(CLI::ExistingFile);
  comb->add_option("--magnetic-from", comb_mag, "checkpoint providing the magnetic module")->required()->check(CLI::ExistingFile);
  comb->add_option("--drag-from", comb_drag, "checkpoint providing the drag module")->required()->check(CLI::ExistingFile);
  comb->add_option("--out", comb_out, "checkpoint JSON")->required();

  // export -----------------------------------------------------------------
  auto* exp_cmd = app.add_subcommand("export", "Write field grids, trajectories or energy traces as CSV");
  exp_cmd->require_subcommand(1);

  ForceSource grid_src;
  std::string grid_field = "B", grid_out;
  std::size_t grid_res = 5;
  double grid_lo = -1.0, grid_hi = 1.0;
  auto* grid_cmd = exp_cmd->add_subcommand("field-grid", "Sample V, B or drag on a regular grid");
  grid_src.add_to(grid_cmd);
  grid_cmd->add_option("--field", grid_field, "V, B or D")->check(CLI::IsMember({"V", "B", "D"}));
  grid_cmd->add_option("--resolution", grid_res, "points per axis")->check(CLI::PositiveNumber);
  grid_cmd->add_option("--lo", grid_lo, "lower corner of the cube");
  grid_cmd->add_option("--hi", grid_hi, "upper corner of the cube");
  grid_cmd->add_option("--out", grid_out, "CSV file")->required();

  struct PathFlags {
    ForceSource src;
    std::string setup, x0, v0, out;
    std::size_t test_index = 0;
    double horizon = 7.0;
    std::size_t samples = 70;
    double rtol = 3e-3;
    CLI::Option* x0_opt = nullptr;
  };
  auto add_path_flags = [](CLI::App* cmd, PathFlags& f, const char* samples_help) {
    f.src.add_to(cmd);
    cmd->add_option("--setup", f.setup, "setup for test initial conditions and the true potential");
    f.x0_opt = cmd->add_option("--x0", f.x0, "initial position x,y,z");
    auto* v0 = cmd->add_option("--v0", f.v0, "initial velocity x,y,z");
    f.x0_opt->needs(v0);
    v0->needs(f.x0_opt);
    cmd->add_option("--test-index", f.test_index, "use this test initial condition (default 0)");
    cmd->add_option("--horizon", f.horizon, "end time")->check(CLI::PositiveNumber);
    cmd->add_option("--samples", f.samples, samples_help)->check(CLI::PositiveNumber);
    cmd->add_option("--rtol", f.rtol, "dopri5 relative tolerance")->check(CLI::PositiveNumber);
    cmd->add_option("--out", f.out, "CSV file")->required();
  };
  PathFlags traj, energy;
  auto* traj_cmd = exp_cmd->add_subcommand("trajectory", "Integrate one trajectory");
  add_path_flags(traj_cmd, traj, "output samples after t = 0");
  auto* energy_cmd = exp_cmd->add_subcommand("energy", "Energy relative to the true potential along a trajectory");
  energy.samples = 700;
  add_path_flags(energy_cmd, energy, "output samples after t = 0");

  // experiment -------------------------------------------------------------
  CommonFlags xp_flags;
  std::string xp_name, xp_out = "experiments";
  std::vector<std::uint64_t> xp_seeds;
  std::vector<std::string> xp_models;
  std::size_t xp_jobs = std::max(1u, std::thread::hardware_concurrency());
  bool xp_fresh = false;
  auto* xp = app.add_subcommand("experiment", "Run an experiment preset end to end");
  xp_flags.add_to(xp);
  xp->add_option("name", xp_name, "exp1a, exp1b, exp2, exp3 or exp4")
      ->required()
      ->check(CLI::IsMember({"exp1a", "exp1b", "exp2", "exp3", "exp4"}));
  xp->add_option("--seeds", xp_seeds, "seed list (default: --seed and the three following, or 1 2 3 4)");
  xp->add_option("--models", xp_models, "model kinds replacing the preset's list");
  xp->add_option("--out", xp_out, "output directory");
  xp->add_option("--jobs", xp_jobs, "parallel training workers")->check(CLI::PositiveNumber);
  xp->add_flag("--fresh", xp_fresh, "retrain even when an identical run exists under --out");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*gen) {
      const json file = gen_flags.file();
      TrainConfig c = TrainConfig::preset(ModelKind::magnetic,
                                          parse_setup(resolve_name(gen_setup_opt, gen_setup, file, "setup", "standard")),
                                          gen_flags.resolve_profile(file), gen_flags.resolve_seed(file));
      apply_json(c, without(file, {"model", "setup", "profile", "seed"}));
      apply_json(c, gen_flags.flags());
      if (gen_n_opt->count()) c.dataset_size = gen_n;
      c.validate();
      json out = to_json(dataset_for(c));
      out["config"] = json{{"setup", to_string(c.setup)},   {"n", c.dataset_size}, {"seed", c.seed},
                           {"horizon", c.horizon},           {"sequence_length", c.sequence_length},
                           {"box", c.box},                   {"rtol", c.rtol},
                           {"profile", to_string(c.profile)}};
      write_file(gen_out, out.dump() + "\n");
      note("wrote " + std::to_string(c.dataset_size) + " samples to " + gen_out);
    } else if (*train_cmd) {
      const json file = train_flags.file();
      std::optional<Dataset> data;
      if (!train_data.empty()) data = load_dataset(train_data);
      const std::string fallback_setup = data ? std::string(to_string(data->setup)) : "standard";
      const Setup setup = parse_setup(resolve_name(train_setup_opt, train_setup, file, "setup", fallback_setup));
      const ModelKind kind = parse_model_kind(resolve_name(train_model_opt, train_model, file, "model", "magnetic"));
      TrainConfig c = TrainConfig::preset(kind, setup, train_flags.resolve_profile(file), train_flags.resolve_seed(file));
      apply_json(c, without(file, {"model", "setup", "profile", "seed"}));
      apply_json(c, train_flags.flags());
      if (train_no_drag) c.drag = false;
      c.validate();
      if (data) {
        if (data->setup != c.setup) {
          throw std::invalid_argument("dataset " + train_data + " was generated for setup '" +
                                      std::string(to_string(data->setup)) + "', not '" +
                                      std::string(to_string(c.setup)) + "'");
        }
        c.dataset_size = data->samples.size();
      } else {
        data = dataset_for(c);
      }
      note("training " + std::string(to_string(c.model)) + " on " + std::string(to_string(c.setup)) + " for " +
           std::to_string(c.steps) + " steps");
      const TrainResult r = train(c, *data, [](const LogRow& row) {
        std::fprintf(stderr, "step %zu loss %.4g lr %.3g\n", row.step, row.loss, row.lr);
      });
      Checkpoint ck;
      ck.model = r.model;
      ck.config = to_json(c);
      if (!train_data.empty()) ck.config["data"] = train_data;
      ck.seed = c.seed;
      ck.created = utc_timestamp();
      ck.final_loss = r.final_loss;
      save_checkpoint(ck, train_out);
      if (!train_log.empty()) write_file(train_log, training_log_csv(r.log));
      note("final loss " + detail::num(r.final_loss) + ", " + std::to_string(r.wall_seconds) + " s; wrote " + train_out);
    } else if (*eval_cmd) {
      const json file = eval_flags.file();
      const Checkpoint ck = load_checkpoint(eval_ckpt);
      std::string default_setup = "standard";
      if (ck.config.contains("setup")) default_setup = ck.config["setup"].get<std::string>();
      const Setup setup = parse_setup(resolve_name(eval_setup_opt, eval_setup, file, "setup", default_setup));
      TestOptions opt;
      opt.n_test = eval_n;
      opt.model_rtol = opt.reference_rtol = eval_flags.resolve_rtol(file);
      const EvalReport rep = test_mse(ck.model, setup, opt);
      json config{{"checkpoint", eval_ckpt}, {"setup", to_string(setup)}, {"n_test", opt.n_test},
                  {"rtol", opt.model_rtol},  {"test_seed", opt.seed},     {"horizon", opt.horizon},
                  {"training", ck.config}};
      json out = to_json(rep, config);
      out["score"] = score(rep);
      const std::string text = out.dump(1) + "\n";
      if (eval_out.empty()) {
        std::cout << text;
      } else {
        write_file(eval_out, text);
      }
      note("median test MSE " + detail::num(rep.summary.median) + " (" + std::to_string(rep.failures) + " failures)");
    } else if (*comb) {
      const Checkpoint p = load_checkpoint(comb_pot);
      const Checkpoint m = load_checkpoint(comb_mag);
      const Checkpoint d = load_checkpoint(comb_drag);
      Checkpoint out;
      out.model = combine_modules(p.model, m.model, d.model);
      out.config = json{{"potential_from", comb_pot}, {"magnetic_from", comb_mag}, {"drag_from", comb_drag}};
      out.seed = m.seed;
      out.created = utc_timestamp();
      save_checkpoint(out, comb_out);
      note("wrote " + comb_out);
    } else if (*exp_cmd) {
      if (*grid_cmd) {
        grid_src.require();
        std::optional<ForceEvaluator> eval;
        FieldSource src;
        if (!grid_src.ckpt.empty()) {
          eval.emplace(load_checkpoint(grid_src.ckpt).model);
          src = FieldSource::of(*eval);
        } else {
          src = FieldSource::of(parse_setup(grid_src.truth));
        }
        const Region region{{grid_lo, grid_lo, grid_lo}, {grid_hi, grid_hi, grid_hi}};
        write_file(grid_out, field_grid_csv(field_grid(src, parse_field(grid_field), region, grid_res)));
      } else {
        const bool is_energy = bool(*energy_cmd);
        const PathFlags& f = is_energy ? energy : traj;
        f.src.require();
        std::string setup_name = f.setup.empty() ? f.src.truth : f.setup;
        if (setup_name.empty()) {
          const Checkpoint ck = load_checkpoint(f.src.ckpt);
          setup_name = ck.config.value("setup", std::string("standard"));
        }
        const Setup setup = parse_setup(setup_name);
        State s0;
        if (f.x0_opt->count()) {
          s0 = State{parse_vec3(f.x0), parse_vec3(f.v0)};
        } else {
          TestOptions topt;
          topt.n_test = f.test_index + 1;
          s0 = test_initial_conditions(setup, topt).at(f.test_index);
        }
        const Dopri5Options dopt{f.rtol, 1e-9};
        auto write = [&](auto&& force) {
          if (is_energy) {
            write_file(f.out, energy_trace_csv(energy_trace(force, setup, s0, f.horizon, f.samples + 1, dopt)));
          } else {
            const auto times = uniform_times(f.horizon, f.samples);
            write_file(f.out, trajectory_csv(dopri5_integrate(force, s0, times, dopt)));
          }
        };
        if (!f.src.ckpt.empty()) {
          ForceEvaluator eval(load_checkpoint(f.src.ckpt).model);
          write(eval);
        } else {
          const Setup truth = parse_setup(f.src.truth);
          write([truth](const Vec3& x, const Vec3& v) { return truth_force(truth, x, v); });
        }
      }
    } else if (*xp) {
      const json file = xp_flags.file();
      ExperimentOptions opt;
      opt.profile = xp_flags.resolve_profile(file);
      if (!xp_seeds.empty()) {
        opt.seeds = xp_seeds;
      } else if (xp_flags.seed_opt->count() || file.contains("seed")) {
        const std::uint64_t base = xp_flags.resolve_seed(file);
        opt.seeds = {base, base + 1, base + 2, base + 3};
      }
      opt.overrides = without(file, {"model", "setup", "profile", "seed"});
      opt.overrides.update(xp_flags.flags());
      if (!xp_models.empty()) {
        std::vector<ModelKind> kinds;
        for (const auto& m : xp_models) kinds.push_back(parse_model_kind(m));
        opt.models = kinds;
      }
      opt.out = xp_out;
      opt.jobs = xp_jobs;
      opt.reuse = !xp_fresh;
      opt.log = note;
      const Experiment e = parse_experiment(xp_name);
      const ExperimentResult r = run_experiment(e, opt);
      for (const auto& [label, m] : r.median) std::printf("%-14s median test MSE %.4g\n", label.c_str(), m);
      note("wrote " + (opt.out / std::string(to_string(e)) / "summary.json").string());
    }
  } catch (const std::exception& e) {
    std::cerr << "modnode: error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
