#include "deepvlf/protocol.hpp"

#include <cmath>
#include <numeric>

#include "deepvlf/rollout.hpp"

namespace deepvlf {

std::string to_string(Variant v) {
  switch (v) {
    case Variant::kR:
      return "R";
    case Variant::kT:
      return "T";
    case Variant::kHybrid:
      return "hybrid";
  }
  return "?";
}

std::string to_string(Termination t) {
  switch (t) {
    case Termination::kThreshold:
      return "threshold";
    case Termination::kTransmitter:
      return "transmitter";
    case Termination::kTauMax:
      return "tau_max";
  }
  return "?";
}

Variant parse_variant(const std::string& s) {
  if (s == "R" || s == "r") return Variant::kR;
  if (s == "T" || s == "t") return Variant::kT;
  if (s == "hybrid" || s == "H" || s == "h") return Variant::kHybrid;
  throw ConfigError("unknown variant '" + s + "' (expected R, T or hybrid)");
}

void ProtocolConfig::validate(int m) const {
  if (tau_max < 1) throw ConfigError("tau_max must be >= 1");
  if (decode_from_round < 1) throw ConfigError("decode_from_round must be >= 1");
  if (!std::isfinite(channel.eta_f_db)) throw ConfigError("forward SNR must be finite");
  if (channel.eta_b_db && !std::isfinite(*channel.eta_b_db)) throw ConfigError("feedback SNR must be finite");
  auto check_gamma_t = [](double g) {
    if (!(g >= 0.0 && g < 1.0)) throw ConfigError("gamma_t must lie in [0, 1), got " + std::to_string(g));
  };
  auto check_gamma = [m](double g) {
    try {
      validate_threshold(g, m);
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("gamma: ") + e.what());
    }
  };
  switch (variant) {
    case Variant::kR:
      if (!gamma) throw ConfigError("variant R requires gamma");
      check_gamma(*gamma);
      break;
    case Variant::kT:
      if (!gamma_t) throw ConfigError("variant T requires gamma_t");
      check_gamma_t(*gamma_t);
      break;
    case Variant::kHybrid:
      if (gamma) check_gamma(*gamma);
      if (gamma_t) check_gamma_t(*gamma_t);
      break;
  }
}

int SessionTranscript::n_total() const { return std::accumulate(channel_uses.begin(), channel_uses.end(), 0); }

double code_rate(const SessionTranscript& t) { return static_cast<double>(t.k) / t.n_total(); }

double differential_rate(const SessionTranscript& t) {
  return static_cast<double>(t.k) / t.n_total() - static_cast<double>(t.k) / (t.stop_round * t.q);
}

bool same_trajectory(const SessionTranscript& a, const SessionTranscript& b) {
  if (a.seed != b.seed || a.k != b.k || a.q != b.q || a.m != b.m) return false;
  if (a.channel_uses != b.channel_uses || a.group_stop != b.group_stop || a.stop_round != b.stop_round) return false;
  if (a.truth != b.truth || a.estimate != b.estimate || a.cause != b.cause || a.power_sum != b.power_sum) return false;
  if (a.rounds.size() != b.rounds.size()) return false;
  for (std::size_t i = 0; i < a.rounds.size(); ++i) {
    RoundRecord ra = a.rounds[i];
    RoundRecord rb = b.rounds[i];
    // Variant R has no belief feedback; compare it only when both carry one.
    if (ra.belief_feedback.size() == 0 || rb.belief_feedback.size() == 0) {
      ra.belief_feedback.resize(0, 0);
      rb.belief_feedback.resize(0, 0);
    }
    if (!(ra == rb)) return false;
  }
  return true;
}

SessionTranscript run_session(const CodecParameters<double>& params, const BitGroupBlock& block,
                              const ProtocolConfig& protocol, std::uint64_t seed, SessionOptions opts) {
  ad::Tape<double> tape(false);
  const BoundCodec bound = bind(tape, params, nullptr);
  RolloutRequest<double> req;
  req.params = &params;
  req.protocol = protocol;
  req.blocks = std::span<const BitGroupBlock>(&block, 1);
  req.seeds = std::span<const std::uint64_t>(&seed, 1);
  req.power = PowerMode::kInfer;
  req.record_rounds = opts.record_rounds;
  req.record_knowledge = opts.record_knowledge;
  auto result = run_rollout(tape, bound, req);
  return std::move(result.sessions.front());
}

SessionTranscript run_session_r(const BitGroupBlock& block, const CodecParameters<double>& params,
                                const ChannelConfig& chan, double gamma, int tau_max, std::uint64_t seed,
                                int decode_from_round) {
  ProtocolConfig p;
  p.variant = Variant::kR;
  p.gamma = gamma;
  p.tau_max = tau_max;
  p.decode_from_round = decode_from_round;
  p.channel = chan;
  return run_session(params, block, p, seed);
}

SessionTranscript run_session_t(const BitGroupBlock& block, const CodecParameters<double>& params,
                                const ChannelConfig& chan, double gamma_t, int tau_max, std::uint64_t seed) {
  ProtocolConfig p;
  p.variant = Variant::kT;
  p.gamma_t = gamma_t;
  p.tau_max = tau_max;
  p.channel = chan;
  return run_session(params, block, p, seed);
}

SessionTranscript run_session_hybrid(const BitGroupBlock& block, const CodecParameters<double>& params,
                                     const ChannelConfig& chan, std::optional<double> gamma,
                                     std::optional<double> gamma_t, int tau_max, std::uint64_t seed,
                                     int decode_from_round) {
  ProtocolConfig p;
  p.variant = Variant::kHybrid;
  p.gamma = gamma;
  p.gamma_t = gamma_t;
  p.tau_max = tau_max;
  p.decode_from_round = decode_from_round;
  p.channel = chan;
  return run_session(params, block, p, seed);
}

Eigen::MatrixXd build_encoder_knowledge(const BitGroupBlock& block, const SessionTranscript& transcript, int round,
                                        const CodecShape& shape) {
  const int Q = shape.groups;
  const int m = shape.m;
  if (block.q() != Q || block.m() != m) throw ConfigError("block shape does not match codec");
  if (round < 1 || round > shape.tau_max) throw std::logic_error("round outside [1, tau_max]");
  if (static_cast<int>(transcript.rounds.size()) < round - 1) {
    throw std::logic_error("transcript history shorter than requested round");
  }
  Eigen::MatrixXd know = Eigen::MatrixXd::Zero(Q, shape.encoder_input());
  for (int q = 0; q < Q; ++q) {
    const auto g = block.group(q);
    for (int i = 0; i < m; ++i) know(q, i) = g[i] ? 1.0 : -1.0;
  }
  for (int t = 1; t < round; ++t) {
    const RoundRecord& rec = transcript.rounds[t - 1];
    for (int q = 0; q < Q; ++q) {
      const bool append = transcript.variant == Variant::kT || rec.mask_after[q];
      if (!append) continue;
      know(q, shape.sent_offset() + t - 1) = rec.sent[q];
      know(q, shape.feedback_offset() + t - 1) = rec.feedback[q];
    }
  }
  return know;
}

nlohmann::json transcript_record(const SessionTranscript& t, std::uint64_t session_id) {
  return {{"schema", "deepvlf.session"},
          {"version", kTranscriptSchemaVersion},
          {"session_id", session_id},
          {"variant", to_string(t.variant)},
          {"seed", t.seed},
          {"tau_star", t.stop_round},
          {"n_total", t.n_total()},
          {"rate", code_rate(t)},
          {"error", t.error()},
          {"termination", to_string(t.cause)}};
}

void write_transcript_record(std::ostream& out, const SessionTranscript& t, std::uint64_t session_id) {
  out << transcript_record(t, session_id).dump() << '\n';
}

}  // namespace deepvlf
