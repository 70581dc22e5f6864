#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "deepvlf/codec_net.hpp"
#include "deepvlf/evaluation.hpp"
#include "deepvlf/protocol.hpp"
#include "deepvlf/training.hpp"

namespace deepvlf {

// Everything a CLI run needs. Resolution order: preset, then config file,
// then the output-dir environment override, then command-line flags.
struct RunConfig {
  std::string verb;
  std::string preset = "desk-R";
  std::uint64_t seed = 1;
  std::filesystem::path checkpoint;
  std::filesystem::path out_dir = "out";
  std::filesystem::path trajectory;

  CodecShape shape;
  Variant variant = Variant::kR;
  double eta_f_db = 2.0;
  std::optional<double> eta_b_db;  // nullopt: noiseless feedback
  std::optional<double> gamma = 1.0 - 1e-3;
  std::optional<double> gamma_t;
  std::optional<int> decode_from_round;  // nullopt: tau+

  // Training (shape, variant and target point are filled from the fields above).
  TrainConfig train;
  int phase1_steps = 1500;
  int phase2_steps = 1500;

  long sessions = 10000;
  int eval_batch = 512;
  bool transcripts = false;
  SweepAxis sweep_axis = SweepAxis::kGamma;
  std::vector<double> sweep_values;

  long dynamics_trials = 10000;
  int dynamics_rounds = 6;
  int kde_points = 200;

  int gradcheck_draws = 5;
  int gradcheck_sessions = 3;
  double gradcheck_step = 1e-5;
  double gradcheck_tolerance = 1e-4;

  ProtocolConfig protocol() const;
  TrainConfig train_config() const;
  void validate() const;
};

std::vector<std::string> preset_names();
RunConfig make_preset(const std::string& name);

// Values given on the command line; unset members leave the config alone.
struct FlagOverrides {
  std::optional<std::string> preset;
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> checkpoint;
  std::optional<std::filesystem::path> out_dir;
  std::optional<double> eta_f_db;
  std::optional<std::string> eta_b_db;  // number or "none"
  std::optional<double> gamma;
  std::optional<double> gamma_t;
  std::optional<long> sessions;
  std::vector<std::string> assignments;  // "section.key=value"
};

inline constexpr const char* kOutDirEnv = "DEEPVLF_OUT_DIR";

// Raises ConfigError naming the offending key on unknown keys, type
// mismatches and invalid values.
RunConfig parse_config(const std::string& verb, const std::optional<std::filesystem::path>& file,
                       const FlagOverrides& flags);
RunConfig parse_config_text(const std::string& verb, const std::string& text, const FlagOverrides& flags,
                            const std::string& origin = "<config>");

// Applies one "section.key" = value assignment.
void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value);

// Every key with its resolved value, grouped by section.
std::map<std::string, std::map<std::string, std::string>> resolved_values(const RunConfig& cfg);
std::string to_ini(const RunConfig& cfg);
nlohmann::json to_json(const RunConfig& cfg);

std::string code_version();

// Phase 1 then (if configured) phase 2, as the train verb runs them.
// Periodic checkpoints go to `checkpoint` when train.checkpoint_every > 0.
TrainResult train_from_config(const RunConfig& cfg, std::ostream* log, const std::filesystem::path& checkpoint);

// Manifest: the resolved config as a re-runnable config file, headed by
// comment lines with the verb and code version.
void write_manifest(const std::filesystem::path& path, const RunConfig& cfg);

}  // namespace deepvlf
