#include "deepvlf/training.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <sstream>

namespace deepvlf {

void TrainConfig::validate() const {
  shape.validate();
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
  if (!(theta > 0.0)) throw ConfigError("theta must be > 0");
  if (mu && *mu < 1) throw ConfigError("mu must be >= 1");
  if (steps < 0) throw ConfigError("steps must be >= 0");
  if (fixed_horizon_fraction < 0.0 || fixed_horizon_fraction > 1.0) {
    throw ConfigError("fixed_horizon_fraction must lie in [0, 1]");
  }
  if (eta_f_db.lo > eta_f_db.hi) throw ConfigError("eta_f range is empty");
  if (threshold_exponent.lo > threshold_exponent.hi || threshold_exponent.hi >= 0.0) {
    throw ConfigError("threshold exponent range must be non-empty and below 0");
  }
  if (gamma_t_range.lo > gamma_t_range.hi || gamma_t_range.lo < 0.0 || gamma_t_range.hi >= 1.0) {
    throw ConfigError("gamma_t range must lie in [0, 1)");
  }
  if (variant != Variant::kT) validate_threshold(target_gamma, shape.m);
  if (target_gamma_t < 0.0 || target_gamma_t >= 1.0) throw ConfigError("gamma_t must lie in [0, 1)");
  if (calibration_sessions < 1) throw ConfigError("calibration_sessions must be >= 1");
}

nlohmann::json TrainConfig::to_json() const {
  nlohmann::json j;
  j["variant"] = to_string(variant);
  j["shape"] = deepvlf::to_json(shape);
  j["batch_size"] = batch_size;
  j["learning_rate"] = learning_rate;
  j["weight_decay"] = weight_decay;
  j["theta"] = theta;
  j["offset"] = offset;
  j["mu"] = mu ? nlohmann::json(*mu) : nlohmann::json(nullptr);
  j["tau_plus_db_reading"] = tau_plus_db_reading;
  j["steps"] = steps;
  j["fixed_horizon_fraction"] = fixed_horizon_fraction;
  j["clip_norm"] = clip_norm;
  j["precision"] = precision == Precision::kFloat64 ? "f64" : "f32";
  j["phase"] = phase == Phase::kPretrain ? 1 : 2;
  j["seed"] = seed;
  j["eta_f_db_range"] = {eta_f_db.lo, eta_f_db.hi};
  j["threshold_exponent_range"] = {threshold_exponent.lo, threshold_exponent.hi};
  j["gamma_t_range"] = {gamma_t_range.lo, gamma_t_range.hi};
  j["target_eta_f_db"] = target_eta_f_db;
  j["eta_b_db"] = eta_b_db ? nlohmann::json(*eta_b_db) : nlohmann::json(nullptr);
  j["target_gamma"] = target_gamma;
  j["target_gamma_t"] = target_gamma_t;
  j["calibration_sessions"] = calibration_sessions;
  return j;
}

std::string TrainConfig::hash() const {
  // FNV-1a over the canonical JSON dump.
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : to_json().dump()) {
    h ^= c;
    h *= 1099511628211ull;
  }
  std::ostringstream os;
  os << std::hex << h;
  return os.str();
}

int compute_tau_plus(double eta_f_db, int m, int mu, bool db_reading) {
  const double s = db_reading ? eta_f_db : std::pow(10.0, eta_f_db / 10.0);
  if (!(s > 0.0)) return mu;
  const double bound = std::floor(2.0 * m / std::log2(1.0 + s));
  if (!std::isfinite(bound)) return mu;
  return std::max(mu, static_cast<int>(bound));
}

int mu_for(Variant variant, double gamma) {
  if (variant == Variant::kT) return 3;
  if (gamma <= 1.0 - 1e-5) return 5;
  if (gamma <= 1.0 - 1e-6) return 6;
  return 7;
}

int decode_from_round_for(Variant variant, double eta_f_db, double gamma, int m, std::optional<int> mu,
                          bool db_reading) {
  if (variant == Variant::kT) return 1;
  return compute_tau_plus(eta_f_db, m, mu.value_or(mu_for(variant, gamma)), db_reading) + 1;
}

double weighted_loss(std::span<const std::vector<BeliefMatrix>> beliefs, std::span<const BitGroupBlock> blocks,
                     std::span<const std::vector<int>> stop_times, int tau_plus, double theta, double offset,
                     double log_floor) {
  if (beliefs.size() != blocks.size() || stop_times.size() != blocks.size()) {
    throw std::invalid_argument("weighted_loss: beliefs, blocks and stop times must align");
  }
  if (blocks.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t s = 0; s < blocks.size(); ++s) {
    const auto targets = blocks[s].pattern_indices();
    for (int q = 0; q < blocks[s].q(); ++q) {
      const int stop = stop_times[s][q];
      if (stop > static_cast<int>(beliefs[s].size())) throw std::invalid_argument("weighted_loss: stop beyond history");
      for (int tau = tau_plus; tau <= stop; ++tau) {
        const double p = beliefs[s][tau - 1].column(q)(targets[q]);
        total -= std::pow(theta, tau - offset) * std::log(std::max(p, log_floor));
      }
    }
  }
  return total / static_cast<double>(blocks.size());
}

template <typename S>
AdamW<S>::AdamW(const CodecParameters<S>& like, double weight_decay, double beta1, double beta2, double eps)
    : m_(CodecParameters<S>::zeros(like.shape)),
      v_(CodecParameters<S>::zeros(like.shape)),
      wd_(weight_decay),
      b1_(beta1),
      b2_(beta2),
      eps_(eps) {}

template <typename S>
void AdamW<S>::step(CodecParameters<S>& params, const CodecParameters<S>& grads, double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  auto p = params.tensors();
  auto g = grads.tensors();
  auto m = m_.tensors();
  auto v = v_.tensors();
  for (std::size_t i = 0; i < p.size(); ++i) {
    auto pa = p[i].second->array();
    const auto& ga = g[i].second->array();
    auto ma = m[i].second->array();
    auto va = v[i].second->array();
    ma = S(b1_) * ma + S(1 - b1_) * ga;
    va = S(b2_) * va + S(1 - b2_) * ga.square();
    const auto m_hat = ma / S(c1);
    const auto v_hat = va / S(c2);
    pa -= S(lr) * (m_hat / (v_hat.sqrt() + S(eps_)) + S(wd_) * pa);
  }
}

template class AdamW<double>;
template class AdamW<float>;

double scheduled_learning_rate(double lr0, long step, long total) {
  if (total <= 0) return lr0;
  return lr0 * std::pow(0.01, static_cast<double>(step) / static_cast<double>(total));
}

std::vector<BitGroupBlock> random_blocks(int count, int k, int groups, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<BitGroupBlock> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) {
    Bits bits(k);
    for (int j = 0; j < k; j += 64) {
      const std::uint64_t word = rng();
      for (int t = 0; t < 64 && j + t < k; ++t) bits[j + t] = (word >> t) & 1u;
    }
    out.push_back(partition_bits(bits, groups));
  }
  return out;
}

namespace {

struct OperatingSample {
  double eta_f_db = 0.0;
  double threshold = 0.0;  // gamma (R/hybrid) or gamma_t (T)
};

ProtocolConfig protocol_at(const TrainConfig& cfg, const OperatingSample& op) {
  ProtocolConfig p;
  p.variant = cfg.variant;
  p.tau_max = cfg.shape.tau_max;
  p.channel.eta_f_db = op.eta_f_db;
  p.channel.eta_b_db = cfg.eta_b_db;
  p.channel.fading = cfg.fading;
  if (cfg.variant == Variant::kT) {
    p.gamma_t = op.threshold;
  } else {
    p.gamma = op.threshold;
    if (cfg.variant == Variant::kHybrid) p.gamma_t = cfg.target_gamma_t;
  }
  p.decode_from_round = std::min(
      cfg.shape.tau_max,
      decode_from_round_for(cfg.variant, op.eta_f_db, op.threshold, cfg.shape.m, cfg.mu, cfg.tau_plus_db_reading));
  return p;
}

int tau_plus_at(const TrainConfig& cfg, const OperatingSample& op) {
  const int mu = cfg.mu.value_or(mu_for(cfg.variant, op.threshold));
  // Past tau_max the loss would have no terms left.
  return std::min(cfg.shape.tau_max, compute_tau_plus(op.eta_f_db, cfg.shape.m, mu, cfg.tau_plus_db_reading));
}

OperatingSample target_point(const TrainConfig& cfg) {
  return {cfg.target_eta_f_db, cfg.variant == Variant::kT ? cfg.target_gamma_t : cfg.target_gamma};
}

OperatingSample sample_point(const TrainConfig& cfg, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto draw = [&](const Range& r) { return r.lo + (r.hi - r.lo) * u(rng); };
  OperatingSample op;
  op.eta_f_db = draw(cfg.eta_f_db);
  if (cfg.variant == Variant::kT) {
    op.threshold = draw(cfg.gamma_t_range);
  } else {
    op.threshold = 1.0 - std::pow(10.0, draw(cfg.threshold_exponent));
  }
  return op;
}

// Combines per-batch power statistics (weighted by active count).
struct PowerAccumulator {
  std::vector<double> n, mean, m2;
  explicit PowerAccumulator(int rounds) : n(rounds, 0.0), mean(rounds, 0.0), m2(rounds, 0.0) {}
  void add(int r, const ad::ActiveStats& st) {
    if (st.count == 0) return;
    const double nb = st.count;
    const double vb = st.std * st.std;
    const double delta = st.mean - mean[r];
    const double tot = n[r] + nb;
    mean[r] += delta * nb / tot;
    m2[r] += vb * nb + delta * delta * n[r] * nb / tot;
    n[r] = tot;
  }
  void store(CodecParameters<double>& p) const {
    for (std::size_t r = 0; r < n.size(); ++r) {
      if (n[r] == 0.0) continue;  // round never reached: keep previous values
      p.power_mean[r] = mean[r];
      p.power_std[r] = std::sqrt(std::max(m2[r] / n[r], kPowerVarianceFloor));
    }
  }
};

template <typename S>
TrainResult train_loop(const CodecParameters<double>& init, const TrainConfig& cfg, bool curriculum) {
  cfg.validate();
  if (!(init.shape == cfg.shape)) throw ConfigError("initial parameters do not match the configured shape");
  CodecParameters<S> params = init.template cast<S>();
  AdamW<S> opt(params, cfg.weight_decay);
  std::mt19937_64 rng(derive_seed(cfg.seed, {0x5eed, curriculum ? 1u : 2u}));
  TrainResult out;
  out.params = init;
  const long fixed_steps = static_cast<long>(std::ceil(cfg.fixed_horizon_fraction * cfg.steps));
  const int k = cfg.shape.m * cfg.shape.groups;

  for (long step = 0; step < cfg.steps; ++step) {
    const OperatingSample op = curriculum ? sample_point(cfg, rng) : target_point(cfg);
    const ProtocolConfig proto = protocol_at(cfg, op);
    const LossSpec loss{tau_plus_at(cfg, op), cfg.theta, cfg.offset, 1e-12};
    const bool fixed = step < fixed_steps;

    const auto blocks = random_blocks(cfg.batch_size, k, cfg.shape.groups, rng());
    std::vector<std::uint64_t> seeds(cfg.batch_size);
    for (auto& s : seeds) s = rng();

    CodecParameters<S> grads = CodecParameters<S>::zeros(cfg.shape);
    ad::Tape<S> tape(true);
    const BoundCodec bound = bind(tape, params, &grads);
    RolloutRequest<S> req;
    req.params = &params;
    req.protocol = proto;
    req.blocks = blocks;
    req.seeds = seeds;
    req.power = PowerMode::kTrain;
    req.fixed_horizon = fixed;
    req.loss = loss;
    const RolloutResult res = run_rollout(tape, bound, req);
    const double loss_value = static_cast<double>(tape.value(res.loss)(0, 0));
    if (!std::isfinite(loss_value)) {
      throw TrainingDiverged("non-finite loss at step " + std::to_string(step), out.params);
    }
    tape.backward(res.loss);
    if (!grads.all_finite()) {
      throw TrainingDiverged("non-finite gradient at step " + std::to_string(step), out.params);
    }
    if (cfg.clip_norm > 0.0) {
      double sq = 0.0;
      for (const auto& [name, g] : grads.tensors()) sq += static_cast<double>(g->squaredNorm());
      const double norm = std::sqrt(sq);
      if (norm > cfg.clip_norm) {
        for (auto& [name, g] : grads.tensors()) *g *= static_cast<S>(cfg.clip_norm / norm);
      }
    }
    const double lr = scheduled_learning_rate(cfg.learning_rate, step, cfg.steps);
    opt.step(params, grads, lr);
    if (!params.all_finite()) {
      throw TrainingDiverged("non-finite parameters at step " + std::to_string(step), out.params);
    }
    out.params = params.template cast<double>();
    out.params.power_mean = init.power_mean;
    out.params.power_std = init.power_std;

    TrainStepRecord rec{step, loss_value, lr, op.eta_f_db, op.threshold, fixed};
    out.history.push_back(rec);
    if (cfg.log) {
      nlohmann::json j{{"step", rec.step},
                       {"loss", rec.loss},
                       {"lr", rec.lr},
                       {"eta_f_db", rec.eta_f_db},
                       {"threshold", rec.threshold},
                       {"fixed_horizon", rec.fixed_horizon}};
      *cfg.log << j.dump() << '\n' << std::flush;
    }
    if (cfg.checkpoint_every > 0 && !cfg.checkpoint_path.empty() && (step + 1) % cfg.checkpoint_every == 0) {
      save_checkpoint(cfg.checkpoint_path, out.params, {{"train_config", cfg.to_json()}, {"step", step + 1}});
    }
  }

  const OperatingSample tp = target_point(cfg);
  calibrate_power(out.params, protocol_at(cfg, tp), cfg.calibration_sessions, derive_seed(cfg.seed, {0xCA1}));
  return out;
}

TrainResult dispatch(const CodecParameters<double>& init, const TrainConfig& cfg, bool curriculum) {
  if (cfg.precision == Precision::kFloat32) return train_loop<float>(init, cfg, curriculum);
  return train_loop<double>(init, cfg, curriculum);
}

}  // namespace

TrainResult train_phase1(const TrainConfig& config, std::optional<CodecParameters<double>> init) {
  const auto start = init ? *init : CodecParameters<double>::random(config.shape, derive_seed(config.seed, {0x1417}));
  return dispatch(start, config, true);
}

TrainResult train_phase2(const CodecParameters<double>& params, const TrainConfig& config) {
  return dispatch(params, config, false);
}

void calibrate_power(CodecParameters<double>& params, const ProtocolConfig& protocol, int sessions,
                     std::uint64_t seed, int batch) {
  PowerAccumulator acc(params.shape.tau_max);
  const int k = params.shape.m * params.shape.groups;
  for (int done = 0, chunk = 0; done < sessions; ++chunk) {
    const int n = std::min(batch, sessions - done);
    const auto blocks = random_blocks(n, k, params.shape.groups, derive_seed(seed, {static_cast<std::uint64_t>(chunk), 1}));
    std::vector<std::uint64_t> seeds(n);
    for (int i = 0; i < n; ++i) seeds[i] = derive_seed(seed, {static_cast<std::uint64_t>(chunk), 2, static_cast<std::uint64_t>(i)});
    ad::Tape<double> tape(false);
    const BoundCodec bound = bind(tape, params, nullptr);
    RolloutRequest<double> req;
    req.params = &params;
    req.protocol = protocol;
    req.blocks = blocks;
    req.seeds = seeds;
    req.power = PowerMode::kTrain;
    const RolloutResult res = run_rollout(tape, bound, req);
    for (std::size_t r = 0; r < res.power_stats.size(); ++r) acc.add(static_cast<int>(r), res.power_stats[r]);
    done += n;
  }
  acc.store(params);
}

namespace {

RolloutResult rollout_with_loss(ad::Tape<double>& tape, const CodecParameters<double>& params,
                                CodecParameters<double>* grads, const ProtocolConfig& protocol,
                                std::span<const BitGroupBlock> blocks, std::span<const std::uint64_t> seeds,
                                const LossSpec& loss, bool fixed_horizon, const DecisionTrace* replay,
                                DecisionTrace* capture) {
  const BoundCodec bound = bind(tape, params, grads);
  RolloutRequest<double> req;
  req.params = &params;
  req.protocol = protocol;
  req.blocks = blocks;
  req.seeds = seeds;
  req.power = PowerMode::kTrain;
  req.fixed_horizon = fixed_horizon;
  req.loss = loss;
  req.replay = replay;
  req.capture = capture;
  return run_rollout(tape, bound, req);
}

}  // namespace

LossAndGradient loss_and_gradient(const CodecParameters<double>& params, const ProtocolConfig& protocol,
                                  std::span<const BitGroupBlock> blocks, std::span<const std::uint64_t> seeds,
                                  const LossSpec& loss, bool fixed_horizon, const DecisionTrace* replay) {
  LossAndGradient out;
  out.grad = CodecParameters<double>::zeros(params.shape);
  ad::Tape<double> tape(true);
  const auto res =
      rollout_with_loss(tape, params, &out.grad, protocol, blocks, seeds, loss, fixed_horizon, replay, &out.trace);
  out.loss = tape.value(res.loss)(0, 0);
  out.loss_terms = res.loss_terms;
  tape.backward(res.loss);
  return out;
}

double loss_value(const CodecParameters<double>& params, const ProtocolConfig& protocol,
                  std::span<const BitGroupBlock> blocks, std::span<const std::uint64_t> seeds, const LossSpec& loss,
                  bool fixed_horizon, const DecisionTrace* replay) {
  ad::Tape<double> tape(false);
  const auto res = rollout_with_loss(tape, params, nullptr, protocol, blocks, seeds, loss, fixed_horizon, replay, nullptr);
  return tape.value(res.loss)(0, 0);
}

CodecShape tiny_shape() {
  CodecShape s;
  s.m = 2;
  s.groups = 2;
  s.tau_max = 3;
  s.tau_vd = 1;
  s.width = 8;
  return s;
}

CodecParameters<double> gradcheck_draw(const CodecShape& shape, std::uint64_t seed) {
  auto p = CodecParameters<double>::random(shape, seed);
  std::mt19937_64 rng(derive_seed(seed, {0xB1A5}));
  std::normal_distribution<double> nd(0.0, 0.1);
  for (auto& [name, m] : p.tensors())
    if (name.ends_with(".bias"))
      for (Eigen::Index i = 0; i < m->size(); ++i) m->data()[i] = nd(rng);
  return p;
}

GradientCheckConfig tiny_gradcheck_config(std::uint64_t seed) {
  GradientCheckConfig c;
  c.seed = seed;
  c.protocol.variant = Variant::kR;
  c.protocol.gamma = 0.9;
  c.protocol.tau_max = 3;
  c.protocol.channel.eta_f_db = 1.0;
  c.protocol.channel.eta_b_db = 10.0;
  return c;
}

GradientCheckReport gradient_check(const CodecParameters<double>& params, const GradientCheckConfig& config) {
  const int k = params.shape.m * params.shape.groups;
  const auto blocks = random_blocks(config.sessions, k, params.shape.groups, derive_seed(config.seed, {1}));
  std::vector<std::uint64_t> seeds(config.sessions);
  for (int i = 0; i < config.sessions; ++i) seeds[i] = derive_seed(config.seed, {2, static_cast<std::uint64_t>(i)});

  const auto analytic =
      loss_and_gradient(params, config.protocol, blocks, seeds, config.loss, config.fixed_horizon, nullptr);

  GradientCheckReport report;
  CodecParameters<double> probe = params;
  auto probe_tensors = probe.tensors();
  const auto grad_tensors = analytic.grad.tensors();
  for (std::size_t t = 0; t < probe_tensors.size(); ++t) {
    auto& [name, m] = probe_tensors[t];
    double worst = 0.0;
    for (Eigen::Index i = 0; i < m->size(); ++i) {
      const double orig = m->data()[i];
      m->data()[i] = orig + config.step;
      const double up = loss_value(probe, config.protocol, blocks, seeds, config.loss, config.fixed_horizon,
                                   &analytic.trace);
      m->data()[i] = orig - config.step;
      const double down = loss_value(probe, config.protocol, blocks, seeds, config.loss, config.fixed_horizon,
                                     &analytic.trace);
      m->data()[i] = orig;
      const double fd = (up - down) / (2.0 * config.step);
      const double a = grad_tensors[t].second->data()[i];
      const double denom = std::max({std::abs(a), std::abs(fd), config.denominator_floor});
      worst = std::max(worst, std::abs(a - fd) / denom);
      ++report.checked;
    }
    report.per_tensor[name] = worst;
    report.max_relative_error = std::max(report.max_relative_error, worst);
  }
  return report;
}

}  // namespace deepvlf
