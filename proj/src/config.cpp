#include "deepvlf/config.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#ifndef DEEPVLF_VERSION
#define DEEPVLF_VERSION "0.1.0"
#endif

namespace deepvlf {

std::string code_version() { return DEEPVLF_VERSION; }

ProtocolConfig RunConfig::protocol() const {
  ProtocolConfig p;
  p.variant = variant;
  p.gamma = variant == Variant::kT ? std::nullopt : gamma;
  p.gamma_t = variant == Variant::kR ? std::nullopt : gamma_t;
  p.tau_max = shape.tau_max;
  p.channel.eta_f_db = eta_f_db;
  p.channel.eta_b_db = eta_b_db;
  if (decode_from_round) {
    p.decode_from_round = *decode_from_round;
  } else if (variant != Variant::kT && gamma) {
    p.decode_from_round = std::min(
        shape.tau_max, decode_from_round_for(variant, eta_f_db, *gamma, shape.m, train.mu, train.tau_plus_db_reading));
  }
  if (!trajectory.empty()) {
    p.channel.fading = std::make_shared<const FadingTrajectory>(load_fading_trajectory(trajectory));
  }
  return p;
}

TrainConfig RunConfig::train_config() const {
  TrainConfig t = train;
  t.variant = variant;
  t.shape = shape;
  t.seed = seed;
  t.target_eta_f_db = eta_f_db;
  t.eta_b_db = eta_b_db;
  if (gamma) t.target_gamma = *gamma;
  t.target_gamma_t = gamma_t.value_or(0.0);
  if (!trajectory.empty()) {
    t.fading = std::make_shared<const FadingTrajectory>(load_fading_trajectory(trajectory));
  }
  return t;
}

void RunConfig::validate() const {
  shape.validate();
  protocol().validate(shape.m);
  if (sessions < 1) throw ConfigError("eval.sessions must be >= 1");
  if (eval_batch < 1) throw ConfigError("eval.batch must be >= 1");
  if (dynamics_trials < 1) throw ConfigError("dynamics.trials must be >= 1");
  if (dynamics_rounds < 1 || dynamics_rounds > shape.tau_max) {
    throw ConfigError("dynamics.rounds must lie in [1, model.tau_max]");
  }
  if (kde_points < 2) throw ConfigError("dynamics.kde_points must be >= 2");
  if (phase1_steps < 0 || phase2_steps < 0) throw ConfigError("training step counts must be >= 0");
  if (gradcheck_draws < 1 || gradcheck_sessions < 1) throw ConfigError("gradcheck draws/sessions must be >= 1");
  if (!(gradcheck_step > 0.0)) throw ConfigError("gradcheck.step must be > 0");
  train_config().validate();
}

// ---- presets ------------------------------------------------------------------

std::vector<std::string> preset_names() { return {"paper-R", "paper-T", "desk-R", "desk-T", "tiny"}; }

RunConfig make_preset(const std::string& name) {
  RunConfig c;
  c.preset = name;
  if (name == "paper-R" || name == "desk-R") {
    c.variant = Variant::kR;
    c.shape.tau_max = 10;
    c.gamma = 1.0 - 1e-3;
    c.train.theta = 10.0;
    c.train.offset = 9.0;
    c.train.threshold_exponent = {-7.0, -3.0};
  } else if (name == "paper-T" || name == "desk-T") {
    c.variant = Variant::kT;
    c.shape.tau_max = 20;
    c.gamma.reset();
    c.gamma_t = 0.0;
    c.train.theta = std::pow(10.0, 0.25);
    c.train.offset = 16.0;
    c.train.gamma_t_range = {0.0, 0.5};
  } else if (name == "tiny") {
    c.shape = tiny_shape();
    c.variant = Variant::kR;
    c.gamma = 0.9;
    c.train.offset = 3.0;
    c.train.batch_size = 16;
    c.phase1_steps = 50;
    c.phase2_steps = 0;
    c.sessions = 1000;
    c.dynamics_trials = 200;
    c.dynamics_rounds = 3;
    c.train.calibration_sessions = 256;
  } else {
    std::string known;
    for (const auto& n : preset_names()) known += (known.empty() ? "" : ", ") + n;
    throw ConfigError("unknown preset '" + name + "' (known: " + known + ")");
  }

  if (name.starts_with("paper")) {
    c.train.batch_size = c.variant == Variant::kR ? 8192 : 2048;
    c.eval_batch = c.variant == Variant::kR ? 8192 : 16384;
    c.eta_f_db = 1.0;
    c.train.learning_rate = 1e-3;
    c.train.weight_decay = 1e-3;
    c.train.eta_f_db = {-1.0, 3.0};
    c.phase1_steps = 20000;
    c.phase2_steps = 5000;
    c.sessions = 100000;
    c.dynamics_trials = 800000;
  } else if (name.starts_with("desk")) {
    c.train.batch_size = 256;
    c.eval_batch = 512;
    c.eta_f_db = 2.0;
    c.train.precision = Precision::kFloat32;
    c.train.eta_f_db = {0.0, 4.0};
    if (c.variant == Variant::kR) {
      c.train.threshold_exponent = {-5.0, -3.0};
      c.train.theta = 2.0;
      c.phase1_steps = 1000;
      c.phase2_steps = 3000;
    } else {
      c.phase1_steps = 1000;
      c.phase2_steps = 1000;
    }
  }
  c.train.clip_norm = 0.0;
  return c;
}

// ---- key registry -----------------------------------------------------------------

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

[[noreturn]] void type_error(const std::string& key, const std::string& expected, const std::string& value) {
  throw ConfigError("key '" + key + "': expected " + expected + ", got '" + value + "'");
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty()) type_error(key, "a number", v);
  return out;
}

template <typename Int>
Int to_int(const std::string& key, const std::string& v) {
  Int out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty()) type_error(key, "an integer", v);
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  type_error(key, "true or false", v);
}

bool is_none(const std::string& v) { return v == "none" || v == "inf"; }

std::optional<double> to_opt_double(const std::string& key, const std::string& v) {
  if (is_none(v)) return std::nullopt;
  return to_double(key, v);
}

std::string opt_str(const std::optional<double>& v) { return v ? fmt(*v) : "none"; }

std::vector<double> to_list(const std::string& key, const std::string& v) {
  std::vector<double> out;
  std::stringstream ss(v);
  for (std::string tok; std::getline(ss, tok, ',');) {
    tok = trim(tok);
    if (!tok.empty()) out.push_back(to_double(key, tok));
  }
  return out;
}

std::string list_str(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + fmt(v[i]);
  return s;
}

struct KeyDef {
  std::string section, key;
  std::function<void(RunConfig&, const std::string& full, const std::string& value)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define DVLF_INT(SEC, KEY, FIELD, T)                                                                    \
  KeyDef {                                                                                             \
    SEC, KEY, [](RunConfig& c, const std::string& k, const std::string& v) { c.FIELD = to_int<T>(k, v); }, \
        [](const RunConfig& c) { return std::to_string(c.FIELD); }                                     \
  }
#define DVLF_DOUBLE(SEC, KEY, FIELD)                                                                     \
  KeyDef {                                                                                              \
    SEC, KEY, [](RunConfig& c, const std::string& k, const std::string& v) { c.FIELD = to_double(k, v); }, \
        [](const RunConfig& c) { return fmt(c.FIELD); }                                                 \
  }

const std::vector<KeyDef>& registry() {
  static const std::vector<KeyDef> keys = {
      {"run", "preset", [](RunConfig& c, const std::string&, const std::string& v) { c.preset = v; },
       [](const RunConfig& c) { return c.preset; }},
      DVLF_INT("run", "seed", seed, std::uint64_t),
      {"run", "checkpoint", [](RunConfig& c, const std::string&, const std::string& v) { c.checkpoint = v; },
       [](const RunConfig& c) { return c.checkpoint.string(); }},
      {"run", "out_dir", [](RunConfig& c, const std::string&, const std::string& v) { c.out_dir = v; },
       [](const RunConfig& c) { return c.out_dir.string(); }},
      {"run", "trajectory", [](RunConfig& c, const std::string&, const std::string& v) { c.trajectory = v; },
       [](const RunConfig& c) { return c.trajectory.string(); }},

      DVLF_INT("model", "m", shape.m, int),
      DVLF_INT("model", "groups", shape.groups, int),
      DVLF_INT("model", "tau_max", shape.tau_max, int),
      DVLF_INT("model", "tau_vd", shape.tau_vd, int),
      DVLF_INT("model", "width", shape.width, int),
      DVLF_INT("model", "shallow_layers", shape.shallow_layers, int),
      DVLF_INT("model", "deep_layers", shape.deep_layers, int),

      {"protocol", "variant",
       [](RunConfig& c, const std::string&, const std::string& v) { c.variant = parse_variant(v); },
       [](const RunConfig& c) { return to_string(c.variant); }},
      {"protocol", "gamma", [](RunConfig& c, const std::string& k, const std::string& v) { c.gamma = to_opt_double(k, v); },
       [](const RunConfig& c) { return opt_str(c.gamma); }},
      {"protocol", "gamma_t",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.gamma_t = to_opt_double(k, v); },
       [](const RunConfig& c) { return opt_str(c.gamma_t); }},
      {"protocol", "decode_from_round",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         if (v == "auto") {
           c.decode_from_round.reset();
         } else {
           c.decode_from_round = to_int<int>(k, v);
         }
       },
       [](const RunConfig& c) { return c.decode_from_round ? std::to_string(*c.decode_from_round) : "auto"; }},

      DVLF_DOUBLE("channel", "eta_f_db", eta_f_db),
      {"channel", "eta_b_db",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.eta_b_db = to_opt_double(k, v); },
       [](const RunConfig& c) { return opt_str(c.eta_b_db); }},

      DVLF_INT("train", "batch_size", train.batch_size, int),
      DVLF_DOUBLE("train", "learning_rate", train.learning_rate),
      DVLF_DOUBLE("train", "weight_decay", train.weight_decay),
      DVLF_DOUBLE("train", "theta", train.theta),
      DVLF_DOUBLE("train", "offset", train.offset),
      {"train", "mu",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         if (v == "auto") {
           c.train.mu.reset();
         } else {
           c.train.mu = to_int<int>(k, v);
         }
       },
       [](const RunConfig& c) { return c.train.mu ? std::to_string(*c.train.mu) : "auto"; }},
      {"train", "tau_plus_reading",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         if (v != "linear" && v != "db") type_error(k, "linear or db", v);
         c.train.tau_plus_db_reading = v == "db";
       },
       [](const RunConfig& c) { return std::string(c.train.tau_plus_db_reading ? "db" : "linear"); }},
      DVLF_INT("train", "phase1_steps", phase1_steps, int),
      DVLF_INT("train", "phase2_steps", phase2_steps, int),
      DVLF_DOUBLE("train", "fixed_horizon_fraction", train.fixed_horizon_fraction),
      DVLF_DOUBLE("train", "clip_norm", train.clip_norm),
      {"train", "precision",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         if (v != "f32" && v != "f64") type_error(k, "f32 or f64", v);
         c.train.precision = v == "f32" ? Precision::kFloat32 : Precision::kFloat64;
       },
       [](const RunConfig& c) { return std::string(c.train.precision == Precision::kFloat32 ? "f32" : "f64"); }},
      DVLF_DOUBLE("train", "eta_f_min", train.eta_f_db.lo),
      DVLF_DOUBLE("train", "eta_f_max", train.eta_f_db.hi),
      DVLF_DOUBLE("train", "threshold_exponent_min", train.threshold_exponent.lo),
      DVLF_DOUBLE("train", "threshold_exponent_max", train.threshold_exponent.hi),
      DVLF_DOUBLE("train", "gamma_t_min", train.gamma_t_range.lo),
      DVLF_DOUBLE("train", "gamma_t_max", train.gamma_t_range.hi),
      DVLF_INT("train", "calibration_sessions", train.calibration_sessions, int),
      DVLF_INT("train", "checkpoint_every", train.checkpoint_every, int),

      DVLF_INT("eval", "sessions", sessions, long),
      DVLF_INT("eval", "batch", eval_batch, int),
      {"eval", "transcripts",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.transcripts = to_bool(k, v); },
       [](const RunConfig& c) { return std::string(c.transcripts ? "true" : "false"); }},
      {"eval", "sweep_axis",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         if (v != "gamma" && v != "eta_f") type_error(k, "gamma or eta_f", v);
         c.sweep_axis = v == "gamma" ? SweepAxis::kGamma : SweepAxis::kEtaF;
       },
       [](const RunConfig& c) { return std::string(c.sweep_axis == SweepAxis::kGamma ? "gamma" : "eta_f"); }},
      {"eval", "sweep_values",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.sweep_values = to_list(k, v); },
       [](const RunConfig& c) { return list_str(c.sweep_values); }},

      DVLF_INT("dynamics", "trials", dynamics_trials, long),
      DVLF_INT("dynamics", "rounds", dynamics_rounds, int),
      DVLF_INT("dynamics", "kde_points", kde_points, int),

      DVLF_INT("gradcheck", "draws", gradcheck_draws, int),
      DVLF_INT("gradcheck", "sessions", gradcheck_sessions, int),
      DVLF_DOUBLE("gradcheck", "step", gradcheck_step),
      DVLF_DOUBLE("gradcheck", "tolerance", gradcheck_tolerance),
  };
  return keys;
}

#undef DVLF_INT
#undef DVLF_DOUBLE

const KeyDef& find_key(const std::string& full) {
  for (const auto& k : registry())
    if (k.section + "." + k.key == full) return k;
  throw ConfigError("unknown config key '" + full + "'");
}

using Entries = std::vector<std::pair<std::string, std::string>>;

Entries read_ini(const std::string& text, const std::string& origin) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::ini_parser::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(origin + ":" + std::to_string(e.line()) + ": " + e.message());
  }
  Entries out;
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw ConfigError(origin + ": key '" + section + "' must live inside a [section]");
    for (const auto& [key, value] : body) out.emplace_back(section + "." + key, trim(value.data()));
  }
  return out;
}

void apply_flags(RunConfig& c, const FlagOverrides& f) {
  if (const char* env = std::getenv(kOutDirEnv); env && *env) c.out_dir = env;
  if (f.seed) c.seed = *f.seed;
  if (f.checkpoint) c.checkpoint = *f.checkpoint;
  if (f.out_dir) c.out_dir = *f.out_dir;
  if (f.eta_f_db) c.eta_f_db = *f.eta_f_db;
  if (f.eta_b_db) c.eta_b_db = to_opt_double("channel.eta_b_db", *f.eta_b_db);
  if (f.gamma) c.gamma = *f.gamma;
  if (f.gamma_t) c.gamma_t = *f.gamma_t;
  if (f.sessions) c.sessions = *f.sessions;
  for (const auto& a : f.assignments) {
    const auto eq = a.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + a + "' must look like section.key=value");
    set_config_value(c, trim(a.substr(0, eq)), trim(a.substr(eq + 1)));
  }
}

}  // namespace

void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  find_key(key).set(cfg, key, value);
}

RunConfig parse_config_text(const std::string& verb, const std::string& text, const FlagOverrides& flags,
                            const std::string& origin) {
  const Entries entries = read_ini(text, origin);
  std::string preset = "desk-R";
  for (const auto& [k, v] : entries) {
    find_key(k);  // reject unknown keys before anything else
    if (k == "run.preset") preset = v;
  }
  if (flags.preset) preset = *flags.preset;
  RunConfig c = make_preset(preset);
  c.verb = verb;
  for (const auto& [k, v] : entries) {
    if (k != "run.preset") set_config_value(c, k, v);
  }
  apply_flags(c, flags);
  c.validate();
  return c;
}

RunConfig parse_config(const std::string& verb, const std::optional<std::filesystem::path>& file,
                       const FlagOverrides& flags) {
  std::string text;
  std::string origin = "<none>";
  if (file) {
    std::ifstream in(*file);
    if (!in) throw ConfigError("cannot read config file " + file->string());
    std::stringstream ss;
    ss << in.rdbuf();
    text = ss.str();
    origin = file->string();
  }
  return parse_config_text(verb, text, flags, origin);
}

std::map<std::string, std::map<std::string, std::string>> resolved_values(const RunConfig& cfg) {
  std::map<std::string, std::map<std::string, std::string>> out;
  for (const auto& k : registry()) out[k.section][k.key] = k.get(cfg);
  return out;
}

std::string to_ini(const RunConfig& cfg) {
  std::ostringstream os;
  std::string current;
  for (const auto& k : registry()) {
    if (k.section != current) {
      if (!current.empty()) os << '\n';
      os << '[' << k.section << "]\n";
      current = k.section;
    }
    os << k.key << " = " << k.get(cfg) << '\n';
  }
  return os.str();
}

nlohmann::json to_json(const RunConfig& cfg) {
  nlohmann::json j;
  j["verb"] = cfg.verb;
  j["code_version"] = code_version();
  for (const auto& [section, kv] : resolved_values(cfg))
    for (const auto& [k, v] : kv) j["config"][section][k] = v;
  return j;
}

TrainResult train_from_config(const RunConfig& c, std::ostream* log, const std::filesystem::path& checkpoint) {
  TrainConfig t = c.train_config();
  t.log = log;
  t.checkpoint_path = checkpoint;
  t.steps = c.phase1_steps;
  t.phase = Phase::kPretrain;
  TrainResult r = train_phase1(t);
  if (c.phase2_steps > 0) {
    t.steps = c.phase2_steps;
    t.phase = Phase::kFinetune;
    t.seed = derive_seed(c.seed, {2});
    TrainResult r2 = train_phase2(r.params, t);
    r.history.insert(r.history.end(), r2.history.begin(), r2.history.end());
    r.params = std::move(r2.params);
  }
  return r;
}

void write_manifest(const std::filesystem::path& path, const RunConfig& cfg) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write manifest " + path.string());
  out << "; deepvlf run manifest\n; verb = " << cfg.verb << "\n; code_version = " << code_version() << "\n\n"
      << to_ini(cfg);
}

}  // namespace deepvlf
