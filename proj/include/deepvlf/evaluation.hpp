#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "deepvlf/codec_net.hpp"
#include "deepvlf/protocol.hpp"

namespace deepvlf {

struct Interval {
  double lo = 0.0;
  double hi = 1.0;
};

// Exact binomial interval for `errors` out of `trials` at the given level.
Interval clopper_pearson(long errors, long trials, double level = 0.95);

struct OperatingPointResult {
  Variant variant = Variant::kR;
  double eta_f_db = 0.0;
  std::optional<double> eta_b_db;  // nullopt: noiseless feedback
  double threshold = 0.0;          // gamma (R/hybrid) or gamma_t (T)
  long sessions = 0;
  long errors = 0;
  double bler = 0.0;
  Interval bler_ci;
  double mean_rate = 0.0;          // E[K / N_total]
  Interval rate_ci;                // normal-approximation 95% interval
  double mean_tau = 0.0;           // E[tau*]
  double mean_channel_uses = 0.0;  // E[N_total]
  double mean_power = 0.0;         // sum x^2 / sum N_total
  double mean_differential_rate = 0.0;
  std::map<Termination, long> causes;
};

struct EvalOptions {
  int batch = 512;
  std::ostream* transcripts = nullptr;  // line-delimited session records
};

// Runs `sessions` independent sessions. Session i uses seed
// derive_seed(seed, {i}) for its message bits and all channel noise.
OperatingPointResult evaluate_operating_point(const CodecParameters<double>& params, const ProtocolConfig& protocol,
                                              long sessions, std::uint64_t seed, const EvalOptions& opts = {});

// Message and noise seed of session i of an evaluation run.
BitGroupBlock session_block(const CodecShape& shape, std::uint64_t session_seed);

struct SweepPoint {
  ProtocolConfig protocol;
  const CodecParameters<double>* params = nullptr;
};

// Point j is evaluated with seed derive_seed(master_seed, {j}).
std::vector<OperatingPointResult> sweep(const std::vector<SweepPoint>& points, long sessions_per_point,
                                        std::uint64_t master_seed, const EvalOptions& opts = {});

enum class SweepAxis { kGamma, kEtaF };

// Expands a one-dimensional axis into sweep points sharing one model.
// Empty value lists are a ConfigError.
std::vector<SweepPoint> sweep_points(const CodecParameters<double>& params, const ProtocolConfig& base,
                                     SweepAxis axis, const std::vector<double>& values);

// ---- encoder dynamics ----------------------------------------------------------

struct DynamicsResult {
  int rounds = 0;
  int patterns = 0;
  long trials = 0;
  // samples[r][j]: x_1^(r+1) over all trials with b_1 = pattern j.
  std::vector<std::vector<std::vector<double>>> samples;
  std::vector<double> separation;  // per round
  double mean_power = 0.0;         // over every symbol sent in the experiment
};

// For each trial the other groups and all noise are fixed while b_1 runs over
// every pattern; sessions are played without stopping for `rounds` rounds.
DynamicsResult dynamics_experiment(const CodecParameters<double>& params, const ProtocolConfig& protocol, long trials,
                                   int rounds, std::uint64_t seed, int batch_trials = 64);

// Between-pattern variance of the per-pattern means over the pooled
// within-pattern variance. 0 when everything is constant.
double separation_index(const std::vector<std::vector<double>>& per_pattern);

double silverman_bandwidth(const std::vector<double>& samples);
// Gaussian KDE evaluated on `grid`.
std::vector<double> kde(const std::vector<double>& samples, const std::vector<double>& grid, double bandwidth);

// ---- CSV export -----------------------------------------------------------------

inline constexpr int kResultsSchemaVersion = 1;
inline constexpr const char* kOperatingPointHeader =
    "variant,eta_f_db,eta_b_db,threshold,n_sessions,bler,bler_lo,bler_hi,mean_rate,mean_tau,mean_power";
inline constexpr const char* kDynamicsHeader = "round,pattern_index,sample_value";

void emit_results(std::ostream& out, const std::vector<OperatingPointResult>& rows);
void emit_dynamics(std::ostream& out, const DynamicsResult& dyn);
void emit_results(const std::filesystem::path& path, const std::vector<OperatingPointResult>& rows);
void emit_dynamics(const std::filesystem::path& path, const DynamicsResult& dyn);

// Parses an operating-point CSV back (fields not in the schema are left default).
std::vector<OperatingPointResult> read_results(std::istream& in);

// %.9g
std::string format_value(double v);

}  // namespace deepvlf
