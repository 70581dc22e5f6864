#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "deepvlf/codec_net.hpp"
#include "deepvlf/protocol.hpp"
#include "deepvlf/rollout.hpp"

namespace deepvlf {

enum class Phase { kPretrain, kFinetune };
enum class Precision { kFloat64, kFloat32 };

struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

struct TrainConfig {
  Variant variant = Variant::kR;
  CodecShape shape;
  int batch_size = 256;
  double learning_rate = 1e-3;
  double weight_decay = 1e-3;
  double theta = 10.0;   // exponential weight base
  double offset = 9.0;   // exponential weight offset c
  std::optional<int> mu;  // nullopt: schedule by threshold (R) or 3 (T)
  bool tau_plus_db_reading = false;
  int steps = 1000;
  double fixed_horizon_fraction = 0.1;
  double clip_norm = 0.0;  // 0 disables global-norm clipping
  Precision precision = Precision::kFloat64;
  Phase phase = Phase::kPretrain;
  std::uint64_t seed = 1;

  // Phase-1 curriculum, sampled uniformly per batch.
  Range eta_f_db{0.0, 3.0};
  Range threshold_exponent{-7.0, -3.0};  // R/hybrid: gamma = 1 - 10^u
  Range gamma_t_range{0.0, 0.0};         // T

  // Phase-2 target operating point (also the calibration point).
  double target_eta_f_db = 1.0;
  std::optional<double> eta_b_db;  // nullopt: noiseless feedback
  std::shared_ptr<const FadingTrajectory> fading;  // forward link only
  double target_gamma = 1.0 - 1e-3;
  double target_gamma_t = 0.0;

  int calibration_sessions = 4096;
  int checkpoint_every = 0;  // 0: no periodic checkpoints
  std::filesystem::path checkpoint_path;
  std::ostream* log = nullptr;  // line-delimited JSON records

  void validate() const;
  nlohmann::json to_json() const;
  std::string hash() const;
};

// tau+ = max(mu, floor(2m / log2(1 + s))), s = 10^(eta_f/10) (or eta_f itself
// when db_reading is set).
int compute_tau_plus(double eta_f_db, int m, int mu, bool db_reading = false);

// mu schedule: T -> 3; R/hybrid -> 5 (gamma <= 1-1e-5), 6 (<= 1-1e-6), 7 otherwise.
int mu_for(Variant variant, double gamma);

// Receiver decisions start in the round after tau+ (T: round 1).
int decode_from_round_for(Variant variant, double eta_f_db, double gamma, int m, std::optional<int> mu = {},
                          bool db_reading = false);

// -sum_q sum_{tau=tau+}^{tau*_q} theta^(tau-c) log p_{q,j*}^(tau), averaged over
// sessions. beliefs[s][tau-1] is P^(tau) of session s.
double weighted_loss(std::span<const std::vector<BeliefMatrix>> beliefs, std::span<const BitGroupBlock> blocks,
                     std::span<const std::vector<int>> stop_times, int tau_plus, double theta, double offset,
                     double log_floor = 1e-12);

// Decoupled weight decay Adam.
template <typename S>
class AdamW {
 public:
  AdamW(const CodecParameters<S>& like, double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
        double eps = 1e-8);

  // p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)
  void step(CodecParameters<S>& params, const CodecParameters<S>& grads, double lr);
  long steps_taken() const { return t_; }

 private:
  CodecParameters<S> m_, v_;
  double wd_, b1_, b2_, eps_;
  long t_ = 0;
};

// lr(t) = lr0 * 0.01^(t / total)
double scheduled_learning_rate(double lr0, long step, long total);

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, CodecParameters<double> last_good)
      : std::runtime_error(what), last_good_(std::move(last_good)) {}
  const CodecParameters<double>& last_good() const { return last_good_; }

 private:
  CodecParameters<double> last_good_;
};

struct TrainStepRecord {
  long step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double eta_f_db = 0.0;
  double threshold = 0.0;
  bool fixed_horizon = false;
};

struct TrainResult {
  CodecParameters<double> params;
  std::vector<TrainStepRecord> history;
};

// Samples (eta_f, threshold) per batch from the curriculum ranges.
TrainResult train_phase1(const TrainConfig& config, std::optional<CodecParameters<double>> init = {});
// Same loop at the fixed target point.
TrainResult train_phase2(const CodecParameters<double>& params, const TrainConfig& config);

// Loss and parameter gradient of one batch (train-mode power normalization).
struct LossAndGradient {
  double loss = 0.0;
  CodecParameters<double> grad;
  DecisionTrace trace;
  int loss_terms = 0;
};
LossAndGradient loss_and_gradient(const CodecParameters<double>& params, const ProtocolConfig& protocol,
                                  std::span<const BitGroupBlock> blocks, std::span<const std::uint64_t> seeds,
                                  const LossSpec& loss, bool fixed_horizon, const DecisionTrace* replay = nullptr);
double loss_value(const CodecParameters<double>& params, const ProtocolConfig& protocol,
                  std::span<const BitGroupBlock> blocks, std::span<const std::uint64_t> seeds, const LossSpec& loss,
                  bool fixed_horizon, const DecisionTrace* replay);

// Sets power_mean / power_std from train-mode batch statistics of
// `sessions` sessions at the given operating point.
void calibrate_power(CodecParameters<double>& params, const ProtocolConfig& protocol, int sessions,
                     std::uint64_t seed, int batch = 1024);

struct GradientCheckReport {
  double max_relative_error = 0.0;
  std::map<std::string, double> per_tensor;  // max relative error per tensor
  std::size_t checked = 0;
};

struct GradientCheckConfig {
  int sessions = 3;
  double step = 1e-5;
  double denominator_floor = 1e-6;
  bool fixed_horizon = true;
  LossSpec loss{1, 10.0, 3.0, 1e-12};
  ProtocolConfig protocol;
  std::uint64_t seed = 7;
};

// Central finite differences against the analytic gradient for every
// parameter; hard decisions are replayed so the loss stays smooth.
// Relative error per entry: |a - f| / max(|a|, |f|, denominator_floor).
GradientCheckReport gradient_check(const CodecParameters<double>& params, const GradientCheckConfig& config);

// Random parameters for a gradient-check draw. Biases are drawn too (they
// start at zero in training), so no ReLU sits exactly on its kink.
CodecParameters<double> gradcheck_draw(const CodecShape& shape, std::uint64_t seed);

// Tiny configuration for gradient checking: Q=2, m=2, tau_max=3, d=8, tau_vd=1.
CodecShape tiny_shape();
GradientCheckConfig tiny_gradcheck_config(std::uint64_t seed = 7);

// Uniform random blocks.
std::vector<BitGroupBlock> random_blocks(int count, int k, int groups, std::uint64_t seed);

}  // namespace deepvlf
