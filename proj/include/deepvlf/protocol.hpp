#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "deepvlf/channels.hpp"
#include "deepvlf/codec_net.hpp"
#include "deepvlf/message.hpp"

namespace deepvlf {

enum class Variant { kR, kT, kHybrid };
enum class Termination { kThreshold, kTransmitter, kTauMax };

std::string to_string(Variant v);
std::string to_string(Termination t);
Variant parse_variant(const std::string& s);

struct ProtocolConfig {
  Variant variant = Variant::kR;
  // Receiver freezing threshold gamma. Required for R; nullopt disables
  // receiver termination in the hybrid.
  std::optional<double> gamma;
  // Transmitter confidence gate gamma_t in [0, 1). Required for T; nullopt
  // disables the transmitter check in the hybrid.
  std::optional<double> gamma_t;
  int tau_max = 10;
  // Receiver threshold decisions are only taken from this round on.
  int decode_from_round = 1;
  ChannelConfig channel;

  bool receiver_freezing() const { return variant == Variant::kR || (variant == Variant::kHybrid && gamma); }
  bool transmitter_check() const { return variant == Variant::kT || (variant == Variant::kHybrid && gamma_t); }
  bool belief_feedback() const { return variant != Variant::kR; }

  void validate(int m) const;
};

// Independent noise streams of one session, all derived from one seed.
struct SessionNoise {
  explicit SessionNoise(std::uint64_t seed)
      : forward(derive_seed(seed, {1})),
        feedback(derive_seed(seed, {2})),
        belief(derive_seed(seed, {3})),
        fading(derive_seed(seed, {4})) {}
  NoiseSource forward, feedback, belief, fading;
};

struct RoundRecord {
  int round = 0;
  std::vector<bool> active;           // undecoded groups entering the round
  std::vector<double> sent;           // x (0 for inactive groups)
  std::vector<double> received;       // y
  std::vector<double> feedback;       // y~ as received by the transmitter
  Eigen::MatrixXd belief_feedback;    // P~ (2^m x Q); empty for variant R
  Eigen::MatrixXd beliefs;            // P^(tau) (2^m x Q)
  std::vector<bool> mask_after;       // undecoded after this round's update
  Eigen::MatrixXd encoder_knowledge;  // Q x width, only when requested
  Eigen::MatrixXd decoder_knowledge;  // Q x width, only when requested

  bool operator==(const RoundRecord&) const = default;
};

struct SessionTranscript {
  Variant variant = Variant::kR;
  std::uint64_t seed = 0;
  int k = 0, q = 0, m = 0;
  std::vector<RoundRecord> rounds;  // empty unless recording was requested
  std::vector<int> channel_uses;    // n^(tau), one entry per round played
  std::vector<int> group_stop;      // tau*_q
  int stop_round = 0;               // tau*
  Bits truth, estimate;
  Termination cause = Termination::kTauMax;
  double power_sum = 0.0;           // sum of x^2 over transmitted symbols

  int n_total() const;
  bool error() const { return truth != estimate; }
};

double code_rate(const SessionTranscript& t);
double differential_rate(const SessionTranscript& t);

// Compares everything except the variant label (used for the hybrid limits).
bool same_trajectory(const SessionTranscript& a, const SessionTranscript& b);

// ---- single-session entry points (inference mode) ---------------------------

struct SessionOptions {
  bool record_rounds = true;
  bool record_knowledge = false;
};

SessionTranscript run_session(const CodecParameters<double>& params, const BitGroupBlock& block,
                              const ProtocolConfig& protocol, std::uint64_t seed, SessionOptions opts = {});

SessionTranscript run_session_r(const BitGroupBlock& block, const CodecParameters<double>& params,
                                const ChannelConfig& chan, double gamma, int tau_max, std::uint64_t seed,
                                int decode_from_round = 1);
SessionTranscript run_session_t(const BitGroupBlock& block, const CodecParameters<double>& params,
                                const ChannelConfig& chan, double gamma_t, int tau_max, std::uint64_t seed);
SessionTranscript run_session_hybrid(const BitGroupBlock& block, const CodecParameters<double>& params,
                                     const ChannelConfig& chan, std::optional<double> gamma,
                                     std::optional<double> gamma_t, int tau_max, std::uint64_t seed,
                                     int decode_from_round = 1);

// Rebuilds the encoder knowledge (Q x width) entering `round` from a recorded
// transcript: +-1 bits, then x and y~ slots for rounds < `round`, where the
// slot of round t is filled only for groups still undecoded after round t
// (variant T: always). Rows are zero-padded to the fixed width.
Eigen::MatrixXd build_encoder_knowledge(const BitGroupBlock& block, const SessionTranscript& transcript, int round,
                                        const CodecShape& shape);

// ---- transcript export --------------------------------------------------------

inline constexpr int kTranscriptSchemaVersion = 1;

// One line-delimited JSON record: schema, version, session_id, variant, seed,
// tau_star, n_total, rate, error, termination.
nlohmann::json transcript_record(const SessionTranscript& t, std::uint64_t session_id);
void write_transcript_record(std::ostream& out, const SessionTranscript& t, std::uint64_t session_id);

}  // namespace deepvlf
