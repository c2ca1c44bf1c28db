#pragma once

#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <limits>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "modnode/evaluation.hpp"
#include "modnode/force_model.hpp"
#include "modnode/training.hpp"

namespace modnode {

using json = nlohmann::json;

inline constexpr int kSchemaVersion = 1;

/// Learned parameters plus provenance.
struct Checkpoint {
  int schema_version = kSchemaVersion;
  ForceModel model;
  json config = json::object();
  std::uint64_t seed = 0;
  std::string created;
  double final_loss = 0.0;
};

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// UTC timestamp; honours SOURCE_DATE_EPOCH for reproducible artifacts.
inline std::string utc_timestamp() {
  std::time_t t = std::time(nullptr);
  if (const char* sde = std::getenv("SOURCE_DATE_EPOCH")) t = static_cast<std::time_t>(std::stoll(sde));
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

// -- config -----------------------------------------------------------------

inline json to_json(const TrainConfig& c) {
  return json{{"model", to_string(c.model)},
              {"setup", to_string(c.setup)},
              {"profile", to_string(c.profile)},
              {"steps", c.steps},
              {"horizon", c.horizon},
              {"sequence_length", c.sequence_length},
              {"rk4_steps", c.rk4_steps},
              {"lr", c.learning_rate},
              {"divergence_weight", c.divergence_weight},
              {"decay_factor", c.decay_factor},
              {"patience", c.patience},
              {"loss_smoothing", c.loss_smoothing},
              {"batch", c.batch},
              {"dataset_size", c.dataset_size},
              {"seed", c.seed},
              {"box", c.box},
              {"log_every", c.log_every},
              {"drag", c.drag},
              {"rtol", c.rtol}};
}

/// Overlays the keys present in `j` onto `c`.
inline void apply_json(TrainConfig& c, const json& j) {
  if (!j.is_object()) throw FormatError("config: expected a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (key == "model") c.model = parse_model_kind(value.get<std::string>());
    else if (key == "setup") c.setup = parse_setup(value.get<std::string>());
    else if (key == "profile") c.profile = parse_profile(value.get<std::string>());
    else if (key == "steps") c.steps = value.get<std::size_t>();
    else if (key == "horizon") c.horizon = value.get<double>();
    else if (key == "sequence_length") c.sequence_length = value.get<std::size_t>();
    else if (key == "rk4_steps") c.rk4_steps = value.get<std::size_t>();
    else if (key == "lr") c.learning_rate = value.get<double>();
    else if (key == "divergence_weight") c.divergence_weight = value.get<double>();
    else if (key == "decay_factor") c.decay_factor = value.get<double>();
    else if (key == "patience") c.patience = value.get<std::size_t>();
    else if (key == "loss_smoothing") c.loss_smoothing = value.get<double>();
    else if (key == "batch") c.batch = value.get<std::size_t>();
    else if (key == "dataset_size") c.dataset_size = value.get<std::size_t>();
    else if (key == "seed") c.seed = value.get<std::uint64_t>();
    else if (key == "box") c.box = value.get<double>();
    else if (key == "log_every") c.log_every = value.get<std::size_t>();
    else if (key == "drag") c.drag = value.get<bool>();
    else if (key == "rtol") c.rtol = value.get<double>();
    else throw FormatError("config: unknown key '" + key + "'");
  }
}

// -- networks -----------------------------------------------------------------

inline json to_json(const Mlp& net) {
  json layers = json::array();
  const auto& w = net.spec().widths;
  for (std::size_t k = 0; k < net.spec().layer_count(); ++k) {
    const auto weights = net.weights(k);
    json rows = json::array();
    for (std::size_t i = 0; i < w[k + 1]; ++i) {
      rows.push_back(std::vector<double>(weights.begin() + static_cast<std::ptrdiff_t>(i * w[k]),
                                         weights.begin() + static_cast<std::ptrdiff_t>((i + 1) * w[k])));
    }
    const auto b = net.biases(k);
    layers.push_back(json{{"weights", rows}, {"biases", std::vector<double>(b.begin(), b.end())}});
  }
  return json{{"spec", net.spec().to_string()}, {"layers", layers}};
}

inline Mlp mlp_from_json(const json& j, const std::string& where) {
  const MlpSpec spec = MlpSpec::parse(j.at("spec").get<std::string>());
  const json& layers = j.at("layers");
  if (!layers.is_array() || layers.size() != spec.layer_count()) {
    throw FormatError(where + ": expected " + std::to_string(spec.layer_count()) + " layers for " + spec.to_string());
  }
  Mlp net(spec);
  for (std::size_t k = 0; k < spec.layer_count(); ++k) {
    const std::size_t in = spec.widths[k], out = spec.widths[k + 1];
    const json& rows = layers[k].at("weights");
    if (!rows.is_array() || rows.size() != out) {
      throw FormatError(where + ": layer " + std::to_string(k) + " needs " + std::to_string(out) + " weight rows");
    }
    auto w = net.weights(k);
    for (std::size_t i = 0; i < out; ++i) {
      const auto row = rows[i].get<std::vector<double>>();
      if (row.size() != in) {
        throw FormatError(where + ": layer " + std::to_string(k) + " row " + std::to_string(i) + " has " +
                          std::to_string(row.size()) + " entries, expected " + std::to_string(in));
      }
      std::copy(row.begin(), row.end(), w.begin() + static_cast<std::ptrdiff_t>(i * in));
    }
    const auto b = layers[k].at("biases").get<std::vector<double>>();
    if (b.size() != out) throw FormatError(where + ": layer " + std::to_string(k) + " bias length mismatch");
    std::copy(b.begin(), b.end(), net.biases(k).begin());
  }
  return net;
}

inline std::string_view to_string(MagneticKind k) {
  switch (k) {
    case MagneticKind::none: return "none";
    case MagneticKind::direct: return "direct";
    case MagneticKind::vector_potential: return "vector-potential";
  }
  return "?";
}

inline MagneticKind parse_magnetic_kind(std::string_view s) {
  if (s == "none") return MagneticKind::none;
  if (s == "direct") return MagneticKind::direct;
  if (s == "vector-potential") return MagneticKind::vector_potential;
  throw FormatError("unknown magnetic kind '" + std::string(s) + "'");
}

inline json to_json(const ForceModel& m) {
  json modules = json::object();
  if (m.potential) modules["potential"] = to_json(*m.potential);
  if (m.drag) modules["drag"] = to_json(*m.drag);
  if (m.magnetic) modules["magnetic"] = to_json(*m.magnetic);
  if (m.generic) modules["generic"] = to_json(*m.generic);
  json j{{"model_kind", to_string(m.kind)}, {"magnetic_kind", to_string(m.magnetic_kind)}, {"modules", modules}};
  j["period"] = m.period ? json(std::vector<double>(m.period->begin(), m.period->end())) : json(nullptr);
  return j;
}

inline ForceModel model_from_json(const json& j) {
  ForceModel m;
  m.kind = parse_model_kind(j.at("model_kind").get<std::string>());
  m.magnetic_kind = parse_magnetic_kind(j.at("magnetic_kind").get<std::string>());
  const json& mods = j.at("modules");
  if (mods.contains("potential")) m.potential = mlp_from_json(mods["potential"], "potential");
  if (mods.contains("drag")) m.drag = mlp_from_json(mods["drag"], "drag");
  if (mods.contains("magnetic")) m.magnetic = mlp_from_json(mods["magnetic"], "magnetic");
  if (mods.contains("generic")) m.generic = mlp_from_json(mods["generic"], "generic");
  if (j.contains("period") && !j["period"].is_null()) {
    const auto p = j["period"].get<std::vector<double>>();
    if (p.size() != 3) throw FormatError("period must have three components");
    m.period = Vec3{p[0], p[1], p[2]};
  }
  try {
    m.validate();
  } catch (const std::invalid_argument& e) {
    throw FormatError(e.what());
  }
  return m;
}

// -- checkpoints ----------------------------------------------------------------

inline std::string checkpoint_to_string(const Checkpoint& c) {
  json j = to_json(c.model);
  j["schema_version"] = c.schema_version;
  j["config"] = c.config;
  j["seed"] = c.seed;
  j["created"] = c.created;
  j["final_loss"] = c.final_loss;
  return j.dump(1) + "\n";
}

inline json parse_json_text(const std::string& text, const std::string& what) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(what + ": parse error at byte " + std::to_string(e.byte) + ": " + e.what());
  }
}

inline Checkpoint checkpoint_from_string(const std::string& text, const std::string& what = "checkpoint") {
  const json j = parse_json_text(text, what);
  try {
    Checkpoint c;
    c.schema_version = j.at("schema_version").get<int>();
    if (c.schema_version > kSchemaVersion) {
      throw FormatError(what + ": schema_version " + std::to_string(c.schema_version) +
                        " is newer than this build supports (" + std::to_string(kSchemaVersion) +
                        "); upgrade modnode to read it");
    }
    if (c.schema_version < 1) throw FormatError(what + ": invalid schema_version");
    c.model = model_from_json(j);
    c.config = j.at("config");
    c.seed = j.at("seed").get<std::uint64_t>();
    c.created = j.at("created").get<std::string>();
    c.final_loss = j.at("final_loss").get<double>();
    return c;
  } catch (const json::exception& e) {
    throw FormatError(what + ": " + e.what());
  }
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  out << content;
  if (!out) throw std::runtime_error("write to '" + path + "' failed");
}

inline void save_checkpoint(const Checkpoint& c, const std::string& path) { write_file(path, checkpoint_to_string(c)); }
inline Checkpoint load_checkpoint(const std::string& path) { return checkpoint_from_string(read_file(path), path); }

// -- datasets -------------------------------------------------------------------

inline json to_json(const Dataset& d) {
  json samples = json::array();
  for (const auto& s : d.samples) {
    json targets = json::array();
    for (const auto& t : s.targets) targets.push_back(std::vector<double>(t.begin(), t.end()));
    samples.push_back(json{{"x0", std::vector<double>(s.initial.x.begin(), s.initial.x.end())},
                           {"v0", std::vector<double>(s.initial.v.begin(), s.initial.v.end())},
                           {"times", s.times},
                           {"targets", targets}});
  }
  return json{{"setup", to_string(d.setup)},
              {"seed", d.seed},
              {"horizon", d.horizon},
              {"sequence_length", d.sequence_length},
              {"rtol", d.rtol},
              {"resampled", d.resampled},
              {"samples", samples}};
}

inline Vec3 vec3_from_json(const json& j) {
  const auto v = j.get<std::vector<double>>();
  if (v.size() != 3) throw FormatError("expected a 3-vector");
  return {v[0], v[1], v[2]};
}

inline Dataset dataset_from_json(const json& j) {
  try {
    Dataset d;
    d.setup = parse_setup(j.at("setup").get<std::string>());
    d.seed = j.at("seed").get<std::uint64_t>();
    d.horizon = j.value("horizon", 0.2);
    d.sequence_length = j.value("sequence_length", std::size_t{2});
    d.rtol = j.value("rtol", 3e-3);
    d.resampled = j.value("resampled", std::size_t{0});
    for (const auto& s : j.at("samples")) {
      Sample smp;
      smp.initial.x = vec3_from_json(s.at("x0"));
      smp.initial.v = vec3_from_json(s.at("v0"));
      smp.times = s.at("times").get<std::vector<double>>();
      for (const auto& t : s.at("targets")) smp.targets.push_back(vec3_from_json(t));
      if (smp.times.size() != smp.targets.size() || smp.times.empty()) {
        throw FormatError("dataset sample: times and targets differ in length");
      }
      d.samples.push_back(std::move(smp));
    }
    return d;
  } catch (const json::exception& e) {
    throw FormatError(std::string("dataset: ") + e.what());
  }
}

inline void save_dataset(const Dataset& d, const std::string& path) { write_file(path, to_json(d).dump() + "\n"); }
inline Dataset load_dataset(const std::string& path) {
  return dataset_from_json(parse_json_text(read_file(path), path));
}

// -- reports and CSV --------------------------------------------------------------

inline json to_json(const EvalReport& r, const json& config = json::object()) {
  return json{{"model", r.model},
              {"setup", r.setup},
              {"seed", r.seed},
              {"mse", r.mse},
              {"failures", r.failures},
              {"median", r.summary.median},
              {"quartile", r.summary.quartile},
              {"quartile_definition", "median minus lower quartile"},
              {"mean", r.summary.mean},
              {"standard_error", r.summary.standard_error},
              {"wall_seconds", r.wall_seconds},
              {"config", config}};
}

namespace detail {
inline std::string num(double v) {
  std::ostringstream os;
  os << std::setprecision(std::numeric_limits<double>::max_digits10) << v;
  return os.str();
}
}  // namespace detail

/// step,loss,lr,div_penalty
inline std::string training_log_csv(const std::vector<LogRow>& log) {
  std::string s = "step,loss,lr,div_penalty\n";
  for (const auto& r : log) {
    s += std::to_string(r.step) + "," + detail::num(r.loss) + "," + detail::num(r.lr) + "," +
         (r.div_penalty ? detail::num(*r.div_penalty) : std::string()) + "\n";
  }
  return s;
}

/// x,y,z,value (scalar fields) or x,y,z,bx,by,bz (magnetic field).
inline std::string field_grid_csv(const FieldGrid& g) {
  std::string s = g.field == Field::magnetic ? "x,y,z,bx,by,bz\n" : "x,y,z,value\n";
  for (std::size_t i = 0; i < g.points.size(); ++i) {
    const auto& p = g.points[i];
    s += detail::num(p[0]) + "," + detail::num(p[1]) + "," + detail::num(p[2]);
    for (double v : g.values[i]) s += "," + detail::num(v);
    s += "\n";
  }
  return s;
}

/// t,energy
inline std::string energy_trace_csv(const std::vector<EnergyPoint>& trace) {
  std::string s = "t,energy\n";
  for (const auto& p : trace) s += detail::num(p.t) + "," + detail::num(p.energy) + "\n";
  return s;
}

/// t,x,y,z,vx,vy,vz
inline std::string trajectory_csv(const Trajectory& tr) {
  std::string s = "t,x,y,z,vx,vy,vz\n";
  for (std::size_t i = 0; i < tr.times.size(); ++i) {
    const auto& st = tr.states[i];
    s += detail::num(tr.times[i]);
    for (double c : st.x) s += "," + detail::num(c);
    for (double c : st.v) s += "," + detail::num(c);
    s += "\n";
  }
  return s;
}

}  // namespace modnode
