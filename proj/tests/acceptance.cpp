// Acceptance run: one PASS/FAIL line per criterion. Trained models are cached
// under --cache so reruns only pay for evaluation.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <random>
#include <string>

#include <CLI11.hpp>

#include "deepvlf/config.hpp"
#include "deepvlf/rollout.hpp"

namespace fs = std::filesystem;
using namespace deepvlf;

namespace {

// Pinned tolerances and sample sizes.
constexpr double kGradTol = 1e-4;
constexpr int kGradDraws = 5;
constexpr double kGradSeconds = 120.0;
constexpr long kInvariantSessions = 10000;
constexpr long kEquivalenceSeeds = 1000;
constexpr long kEvalSessions = 10000;
constexpr double kBlerMax = 1e-2;
constexpr double kRateMin = 0.3;
constexpr long kDynamicsTrials = 10000;
constexpr double kSeparationRatio = 10.0;
constexpr double kPowerMax = 1.02;
constexpr double kLossRelTol = 1e-10;
constexpr double kConstTol = 1e-12;
constexpr std::uint64_t kSeed = 20240601;

int failures = 0;

void report(int id, const std::string& name, bool pass, const std::string& detail) {
  std::printf("%s criterion %d %s: %s\n", pass ? "PASS" : "FAIL", id, name.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!pass) ++failures;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

CodecParameters<double> cached_model(const fs::path& cache, const std::string& name, RunConfig cfg) {
  const fs::path path = cache / (name + ".ckpt");
  if (fs::exists(path)) {
    auto ck = load_checkpoint(path);
    if (ck.params.shape == cfg.shape && ck.metadata.value("config_hash", "") == cfg.train_config().hash())
      return std::move(ck.params);
  }
  std::printf("training %s (%d + %d steps), cached at %s\n", name.c_str(), cfg.phase1_steps, cfg.phase2_steps,
              path.string().c_str());
  std::fflush(stdout);
  const auto t0 = std::chrono::steady_clock::now();
  auto r = train_from_config(cfg, nullptr, {});
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  save_checkpoint(path, r.params, {{"config_hash", cfg.train_config().hash()}, {"train_seconds", secs}});
  std::printf("trained %s in %.0f s\n", name.c_str(), secs);
  return std::move(r.params);
}

std::vector<SessionTranscript> rollout(const CodecParameters<double>& params, const ProtocolConfig& proto,
                                       std::uint64_t seed, long start, int n) {
  std::vector<std::uint64_t> seeds(n);
  std::vector<BitGroupBlock> blocks;
  for (int i = 0; i < n; ++i) {
    seeds[i] = derive_seed(seed, {static_cast<std::uint64_t>(start + i)});
    blocks.push_back(session_block(params.shape, seeds[i]));
  }
  ad::Tape<double> tape(false);
  const BoundCodec bound = bind(tape, params, nullptr);
  RolloutRequest<double> req;
  req.params = &params;
  req.protocol = proto;
  req.blocks = blocks;
  req.seeds = seeds;
  req.record_rounds = true;
  return run_rollout(tape, bound, req).sessions;
}

// Returns an empty string when every invariant holds, else the first violation.
std::string check_invariants(const SessionTranscript& t, const ProtocolConfig& p) {
  const int tau_max = p.tau_max;
  if (t.stop_round < 1 || t.stop_round > tau_max) return "stop round out of range";
  if (static_cast<int>(t.channel_uses.size()) != t.stop_round) return "channel_uses length";
  if (static_cast<int>(t.rounds.size()) != t.stop_round) return "round records length";
  if (t.cause == Termination::kTauMax && t.stop_round != tau_max) return "tau_max cause before tau_max";
  if (t.cause == Termination::kTransmitter && !p.transmitter_check()) return "transmitter stop without gate";
  if (t.cause == Termination::kThreshold && !p.receiver_freezing()) return "threshold stop without freezing";
  if (t.channel_uses.front() != t.q) return "first round must use Q symbols";
  int uses = 0;
  for (int n : t.channel_uses) uses += n;
  if (uses != t.n_total()) return "n_total mismatch";
  if (p.receiver_freezing()) {
    if (std::accumulate(t.group_stop.begin(), t.group_stop.end(), 0) != uses) return "sum of group stops != N_total";
  } else {
    for (int n : t.channel_uses)
      if (n != t.q) return "T round without all groups";
  }
  double power = 0.0;
  for (std::size_t r = 0; r < t.rounds.size(); ++r) {
    const auto& rec = t.rounds[r];
    int active = 0;
    for (int q = 0; q < t.q; ++q) {
      if (rec.active[q]) {
        ++active;
        power += rec.sent[q] * rec.sent[q];
        if (!std::isfinite(rec.sent[q])) return "non-finite symbol";
      } else if (rec.sent[q] != 0.0) {
        return "inactive group transmitted";
      }
      if (r > 0 && !t.rounds[r - 1].mask_after[q] && (rec.active[q] || rec.mask_after[q])) return "group unfroze";
      if (rec.round < p.decode_from_round && !rec.mask_after[q]) return "froze before decode_from_round";
    }
    if (active != t.channel_uses[r]) return "active count != n^(tau)";
    if (r > 0 && t.channel_uses[r] > t.channel_uses[r - 1]) return "channel uses increased";
    for (Eigen::Index c = 0; c < rec.beliefs.cols(); ++c)
      if (std::abs(rec.beliefs.col(c).sum() - 1.0) > 1e-9 || rec.beliefs.col(c).minCoeff() < 0.0)
        return "belief column not a distribution";
  }
  if (std::abs(power - t.power_sum) > 1e-9 * std::max(1.0, power)) return "power bookkeeping";
  // Each group's estimate is the argmax of its belief in its stopping round.
  for (int q = 0; q < t.q; ++q) {
    const int s = t.group_stop[q];
    if (s < 1 || s > t.stop_round) return "group stop out of range";
    Eigen::Index j = 0;
    t.rounds[s - 1].beliefs.col(q).maxCoeff(&j);
    const Bits g = index_to_group(static_cast<int>(j), t.m);
    if (!std::equal(g.begin(), g.end(), t.estimate.begin() + q * t.m)) return "estimate != argmax at stop";
  }
  return "";
}

std::string run_invariants(const CodecParameters<double>& params, const ProtocolConfig& p, std::uint64_t seed,
                           long* early = nullptr, long* early_wrong = nullptr) {
  const int batch = 500;
  for (long start = 0; start < kInvariantSessions; start += batch) {
    const int n = static_cast<int>(std::min<long>(batch, kInvariantSessions - start));
    for (const auto& t : rollout(params, p, seed, start, n)) {
      const std::string v = check_invariants(t, p);
      if (!v.empty()) return v;
      if (early && t.cause == Termination::kTransmitter && t.stop_round < p.tau_max) {
        ++*early;
        if (t.error()) ++*early_wrong;
      }
    }
  }
  return "";
}

CodecParameters<double> untrained(const CodecShape& s, const ProtocolConfig& p, std::uint64_t seed) {
  auto params = CodecParameters<double>::random(s, seed);
  calibrate_power(params, p, 1024, seed);
  return params;
}

// Independent loop form of the exponentially weighted loss.
double brute_loss(const std::vector<std::vector<BeliefMatrix>>& beliefs, const std::vector<BitGroupBlock>& blocks,
                  const std::vector<std::vector<int>>& stops, int tau_plus, double theta, double offset) {
  double total = 0.0;
  for (std::size_t s = 0; s < blocks.size(); ++s) {
    const int m = blocks[s].m();
    for (int q = 0; q < blocks[s].q(); ++q) {
      int target = 0;
      for (int i = 0; i < m; ++i) target = 2 * target + blocks[s].bits()[q * m + i];
      for (int tau = tau_plus; tau <= stops[s][q]; ++tau) {
        const double p = std::max(beliefs[s][tau - 1].columns()(target, q), 1e-12);
        total -= std::pow(theta, tau - offset) * std::log(p);
      }
    }
  }
  return total / static_cast<double>(blocks.size());
}

bool non_increasing(const std::vector<double>& v, const std::vector<Interval>& ci) {
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[i - 1] && ci[i].lo > ci[i - 1].hi) return false;
  return true;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  fs::path cache = "acceptance_cache";
  app.add_option("--cache", cache, "directory for trained models");
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(cache);

  const RunConfig desk_r = make_preset("desk-R");
  const RunConfig desk_t = make_preset("desk-T");
  const CodecParameters<double> model_r = cached_model(cache, "desk-R", desk_r);
  const CodecParameters<double> model_t = cached_model(cache, "desk-T", desk_t);

  // 1: gradient check on the tiny configuration.
  {
    const auto t0 = std::chrono::steady_clock::now();
    double worst = 0.0;
    for (int d = 0; d < kGradDraws; ++d) {
      const std::uint64_t s = derive_seed(kSeed, {1, static_cast<std::uint64_t>(d)});
      const auto rep = gradient_check(gradcheck_draw(tiny_shape(), s), tiny_gradcheck_config(s));
      worst = std::max(worst, rep.max_relative_error);
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    report(1, "gradient-check", worst < kGradTol && secs < kGradSeconds,
           fmt("max relative error %.3g over %d draws (< %.0e), %.1f s (< %.0f s)", worst, kGradDraws, kGradTol,
               secs, kGradSeconds));
  }

  // 2: protocol invariants, untrained and trained, every variant.
  {
    ProtocolConfig r = desk_r.protocol();
    ProtocolConfig t = desk_t.protocol();
    ProtocolConfig h = t;
    h.variant = Variant::kHybrid;
    h.gamma = 0.99;
    h.gamma_t = 0.5;
    h.decode_from_round = 3;
    struct Case {
      std::string label;
      ProtocolConfig proto;
      const CodecParameters<double>* trained;
    };
    ProtocolConfig r_loose = r;
    r_loose.gamma = 0.5;  // untrained beliefs rarely pass high thresholds
    ProtocolConfig t_loose = t;
    t_loose.gamma_t = 0.5;
    const std::vector<Case> cases{{"R", r, &model_r}, {"R(gamma=0.5)", r_loose, &model_r},
                                  {"T", t, &model_t}, {"T(gamma_t=0.5)", t_loose, &model_t},
                                  {"hybrid", h, &model_t}};
    std::string detail;
    bool pass = true;
    for (const auto& c : cases) {
      for (bool trained : {false, true}) {
        const auto un = untrained(c.trained->shape, c.proto, derive_seed(kSeed, {2}));
        const auto v = run_invariants(trained ? *c.trained : un, c.proto, derive_seed(kSeed, {2, 1}));
        if (!v.empty()) {
          pass = false;
          detail += c.label + (trained ? " trained: " : " untrained: ") + v + "; ";
        }
      }
    }
    if (pass) detail = fmt("%ld sessions per case, R/T/hybrid x untrained/trained", kInvariantSessions);
    report(2, "protocol-invariants", pass, detail);
  }

  // 3: T with noiseless feedback and gamma_t = 0 only stops early on a correct block.
  {
    ProtocolConfig t = desk_t.protocol();
    t.gamma_t = 0.0;
    t.channel.eta_b_db.reset();
    long early = 0, wrong = 0;
    std::string v = run_invariants(model_t, t, derive_seed(kSeed, {3}), &early, &wrong);
    const auto un = untrained(model_t.shape, t, derive_seed(kSeed, {3, 1}));
    if (v.empty()) v = run_invariants(un, t, derive_seed(kSeed, {3, 2}), &early, &wrong);
    report(3, "T-noiseless-early-stop", v.empty() && wrong == 0,
           fmt("%ld early terminations, %ld wrong%s%s", early, wrong, v.empty() ? "" : "; ", v.c_str()));
  }

  // 4: hybrid limits reproduce T and R session by session.
  {
    ProtocolConfig t = desk_t.protocol();
    t.gamma_t = 0.3;
    ProtocolConfig ht = t;
    ht.variant = Variant::kHybrid;
    ht.gamma.reset();  // receiver threshold at its limit: never freezes
    ProtocolConfig r = desk_r.protocol();
    ProtocolConfig hr = r;
    hr.variant = Variant::kHybrid;
    hr.gamma_t.reset();  // transmitter gate disabled
    long mismatch_t = 0, mismatch_r = 0;
    const int batch = 250;
    for (long start = 0; start < kEquivalenceSeeds; start += batch) {
      const std::uint64_t s = derive_seed(kSeed, {4});
      const auto a = rollout(model_t, t, s, start, batch);
      const auto b = rollout(model_t, ht, s, start, batch);
      const auto c = rollout(model_r, r, s, start, batch);
      const auto d = rollout(model_r, hr, s, start, batch);
      for (int i = 0; i < batch; ++i) {
        mismatch_t += same_trajectory(a[i], b[i]) ? 0 : 1;
        mismatch_r += same_trajectory(c[i], d[i]) ? 0 : 1;
      }
    }
    report(4, "hybrid-limits", mismatch_t == 0 && mismatch_r == 0,
           fmt("%ld seeds: %ld mismatches vs T, %ld vs R", kEquivalenceSeeds, mismatch_t, mismatch_r));
  }

  // 5-6: desk-R operating points.
  std::vector<double> powers;
  {
    const auto res = evaluate_operating_point(model_r, desk_r.protocol(), kEvalSessions, derive_seed(kSeed, {5}));
    powers.push_back(res.mean_power);
    report(5, "desk-R-operating-point", res.bler <= kBlerMax && res.mean_rate >= kRateMin,
           fmt("eta_f=2 dB gamma=1-1e-3: BLER %.4g [%.3g, %.3g] (<= %.0e), E[R] %.4f (>= %.1f), E[tau] %.3f",
               res.bler, res.bler_ci.lo, res.bler_ci.hi, kBlerMax, res.mean_rate, kRateMin, res.mean_tau));
  }
  {
    std::vector<double> rate, bler;
    std::vector<Interval> rate_ci, bler_ci;
    std::string detail;
    int j = 0;
    for (double g : {1 - 1e-3, 1 - 1e-4, 1 - 1e-5}) {
      RunConfig c = desk_r;
      c.gamma = g;
      const auto res = evaluate_operating_point(model_r, c.protocol(), kEvalSessions, derive_seed(kSeed, {6, j++}));
      rate.push_back(res.mean_rate);
      rate_ci.push_back(res.rate_ci);
      bler.push_back(res.bler);
      bler_ci.push_back(res.bler_ci);
      powers.push_back(res.mean_power);
      detail += fmt("1-gamma=%.0e: E[R] %.4f BLER %.4g; ", 1 - g, res.mean_rate, res.bler);
    }
    report(6, "gamma-sweep-monotone", non_increasing(rate, rate_ci) && non_increasing(bler, bler_ci), detail);
  }

  // 7: encoder separation collapses between round 1 and round 4.
  {
    const auto d = dynamics_experiment(model_r, desk_r.protocol(), kDynamicsTrials, 4, derive_seed(kSeed, {7}));
    powers.push_back(d.mean_power);
    const double s1 = d.separation[0], s4 = d.separation[3];
    report(7, "encoder-separation", s1 >= kSeparationRatio * s4,
           fmt("separation(1) %.4g, separation(4) %.4g, ratio %.3g (>= %.0f)", s1, s4, s1 / s4, kSeparationRatio));
  }

  // 8: average power stays at the budget.
  {
    const double worst = *std::max_element(powers.begin(), powers.end());
    std::string detail = fmt("max %.4f (<= %.2f) over", worst, kPowerMax);
    for (double p : powers) detail += fmt(" %.4f", p);
    report(8, "power-constraint", worst <= kPowerMax, detail);
  }

  // 9: weighted loss against a brute-force recomputation on engine beliefs.
  {
    double worst = 0.0;
    for (int i = 0; i < 100; ++i) {
      const std::uint64_t s = derive_seed(kSeed, {9, static_cast<std::uint64_t>(i)});
      auto params = CodecParameters<double>::random(tiny_shape(), s);
      ProtocolConfig p;
      p.variant = Variant::kR;
      p.gamma = 0.5 + 0.45 * (i % 10) / 10.0;
      p.tau_max = 3;
      p.channel.eta_f_db = 1.0;
      std::mt19937_64 rng(s);
      const int n = 1 + static_cast<int>(rng() % 4);
      const int tau_plus = 1 + static_cast<int>(rng() % 3);
      const double theta = 1.0 + static_cast<double>(rng() % 1000) / 100.0;
      const double offset = static_cast<double>(rng() % 4);
      const auto transcripts = rollout(params, p, s, 0, n);
      std::vector<std::vector<BeliefMatrix>> beliefs;
      std::vector<std::vector<int>> stops;
      std::vector<BitGroupBlock> blocks;
      for (const auto& t : transcripts) {
        beliefs.emplace_back();
        for (const auto& rec : t.rounds) beliefs.back().emplace_back(rec.beliefs);
        stops.push_back(t.group_stop);
        blocks.push_back(partition_bits(t.truth, t.q));
      }
      const double got = weighted_loss(beliefs, blocks, stops, tau_plus, theta, offset);
      const double want = brute_loss(beliefs, blocks, stops, tau_plus, theta, offset);
      worst = std::max(worst, std::abs(got - want) / std::max(std::abs(want), 1e-300));
    }
    report(9, "weighted-loss", worst <= kLossRelTol, fmt("max relative difference %.3g over 100 instances", worst));
  }

  // 10: normalization constants.
  {
    const double cb = belief_scale(3), cb_want = 8.0 / std::sqrt(7.0);
    const double cs = feedback_symbol_scale(0.01), cs_want = std::sqrt(1.0 / 1.01);
    const bool pass = std::abs(cb - cb_want) <= kConstTol && std::abs(cs - cs_want) <= kConstTol;
    report(10, "normalization-constants", pass,
           fmt("C_b(3) %.17g vs %.17g, C_s(0.01) %.17g vs %.17g", cb, cb_want, cs, cs_want));
  }

  std::printf("%d of 10 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
