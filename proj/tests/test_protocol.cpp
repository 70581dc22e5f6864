#include <doctest.h>

#include <numeric>
#include <sstream>

#include "deepvlf/evaluation.hpp"
#include "deepvlf/protocol.hpp"
#include "deepvlf/rollout.hpp"
#include "deepvlf/training.hpp"

using namespace deepvlf;

namespace {

ProtocolConfig r_protocol(double gamma, double eta_f = 1.0) {
  ProtocolConfig p;
  p.variant = Variant::kR;
  p.gamma = gamma;
  p.channel.eta_f_db = eta_f;
  return p;
}

ProtocolConfig t_protocol(double gamma_t, int tau_max = 10) {
  ProtocolConfig p;
  p.variant = Variant::kT;
  p.gamma_t = gamma_t;
  p.tau_max = tau_max;
  p.channel.eta_f_db = 1.0;
  return p;
}

// Calibrated untrained model so frozen groups appear even without training.
CodecParameters<double> untrained(const CodecShape& s, std::uint64_t seed) {
  auto p = CodecParameters<double>::random(s, seed);
  calibrate_power(p, r_protocol(0.9), 256, seed);
  return p;
}

void check_r_invariants(const SessionTranscript& t, int tau_max) {
  // Channel uses equal the summed per-group stopping rounds.
  const int uses = t.n_total();
  const int stops = std::accumulate(t.group_stop.begin(), t.group_stop.end(), 0);
  CHECK(uses == stops);
  CHECK(t.stop_round >= 1);
  CHECK(t.stop_round <= tau_max);
  CHECK(static_cast<int>(t.channel_uses.size()) == t.stop_round);
  CHECK(t.channel_uses.front() == t.q);
  for (std::size_t r = 1; r < t.channel_uses.size(); ++r) CHECK(t.channel_uses[r] <= t.channel_uses[r - 1]);
  for (std::size_t r = 0; r < t.rounds.size(); ++r) {
    const auto& rec = t.rounds[r];
    for (int q = 0; q < t.q; ++q) {
      if (!rec.active[q]) CHECK(rec.sent[q] == 0.0);
      if (r > 0 && !t.rounds[r - 1].mask_after[q]) {
        CHECK_FALSE(rec.active[q]);
        CHECK_FALSE(rec.mask_after[q]);
      }
    }
  }
}

}  // namespace

TEST_CASE("code rate and differential rate") {
  SessionTranscript t;
  t.k = 48;
  t.q = 16;
  t.channel_uses = {16, 16, 16, 16, 16};
  t.stop_round = 5;
  CHECK(code_rate(t) == doctest::Approx(0.6));
  CHECK(differential_rate(t) == doctest::Approx(0.0));
  t.channel_uses = {16, 16, 8, 6, 2};
  CHECK(code_rate(t) == doctest::Approx(1.0));
  CHECK(differential_rate(t) == doctest::Approx(1.0 - 0.6));
}

TEST_CASE("protocol configuration validation") {
  ProtocolConfig p;
  p.variant = Variant::kR;
  CHECK_THROWS_AS(p.validate(3), ConfigError);
  p.gamma = 0.1;
  CHECK_THROWS_AS(p.validate(3), ConfigError);
  p.gamma = 0.99;
  CHECK_NOTHROW(p.validate(3));
  p.tau_max = 0;
  CHECK_THROWS_AS(p.validate(3), ConfigError);
  ProtocolConfig t;
  t.variant = Variant::kT;
  CHECK_THROWS_AS(t.validate(3), ConfigError);
  t.gamma_t = 1.0;
  CHECK_THROWS_AS(t.validate(3), ConfigError);
  t.gamma_t = 0.0;
  CHECK_NOTHROW(t.validate(3));
  ProtocolConfig h;
  h.variant = Variant::kHybrid;
  CHECK_NOTHROW(h.validate(3));
  CHECK(parse_variant("hybrid") == Variant::kHybrid);
  CHECK_THROWS_AS(parse_variant("X"), ConfigError);
}

TEST_CASE("variant R invariants on random sessions") {
  const CodecShape s;
  const auto params = untrained(s, 3);
  for (int i = 0; i < 40; ++i) {
    const std::uint64_t seed = derive_seed(77, {static_cast<std::uint64_t>(i)});
    const auto blk = session_block(s, seed);
    // Low thresholds force freezing in early rounds.
    const auto t = run_session(params, blk, r_protocol(0.2 + 0.02 * (i % 10)), seed);
    check_r_invariants(t, s.tau_max);
    CHECK(t.truth == blk.bits());
    CHECK(static_cast<int>(t.estimate.size()) == blk.k());
  }
}

TEST_CASE("variant T sends every group in every round") {
  const CodecShape s;
  const auto params = untrained(s, 4);
  for (int i = 0; i < 20; ++i) {
    const auto blk = session_block(s, i);
    const auto t = run_session(params, blk, t_protocol(0.0), i);
    for (int n : t.channel_uses) CHECK(n == s.groups);
    for (const auto& rec : t.rounds) {
      CHECK(rec.belief_feedback.rows() == s.patterns());
      CHECK(rec.belief_feedback.cols() == s.groups);
    }
  }
}

TEST_CASE("variant T stops only on a correct estimate with noiseless feedback") {
  const CodecShape s = tiny_shape();
  const auto params = untrained(s, 5);
  int early = 0;
  for (int i = 0; i < 300; ++i) {
    const auto blk = session_block(s, i);
    const auto t = run_session(params, blk, t_protocol(0.0, 3), i);
    if (t.cause == Termination::kTransmitter) {
      ++early;
      CHECK(t.estimate == t.truth);
    }
  }
  CHECK(early > 0);
}

TEST_CASE("sessions replay identically from their seed") {
  const CodecShape s;
  const auto params = untrained(s, 6);
  for (const auto& proto : {r_protocol(0.5), t_protocol(0.3)}) {
    const auto blk = session_block(s, 12);
    const auto a = run_session(params, blk, proto, 12);
    const auto b = run_session(params, blk, proto, 12);
    CHECK(same_trajectory(a, b));
    CHECK(a.rounds == b.rounds);
  }
}

TEST_CASE("batched rollout equals single-session runs") {
  const CodecShape s;
  const auto params = untrained(s, 8);
  const auto proto = r_protocol(0.4);
  std::vector<BitGroupBlock> blocks;
  std::vector<std::uint64_t> seeds;
  for (int i = 0; i < 6; ++i) {
    seeds.push_back(derive_seed(5, {static_cast<std::uint64_t>(i)}));
    blocks.push_back(session_block(s, seeds.back()));
  }
  ad::Tape<double> tape(false);
  const BoundCodec bound = bind(tape, params, nullptr);
  RolloutRequest<double> req;
  req.params = &params;
  req.protocol = proto;
  req.blocks = blocks;
  req.seeds = seeds;
  req.record_rounds = true;
  const auto batch = run_rollout(tape, bound, req);
  for (int i = 0; i < 6; ++i) {
    const auto single = run_session(params, blocks[i], proto, seeds[i]);
    CHECK(same_trajectory(batch.sessions[i], single));
  }
}

TEST_CASE("hybrid reduces to T without receiver freezing and to R without the transmitter gate") {
  const CodecShape s;
  const auto params = untrained(s, 9);
  for (int i = 0; i < 20; ++i) {
    const auto blk = session_block(s, i);
    ProtocolConfig hybrid_t = t_protocol(0.2);
    hybrid_t.variant = Variant::kHybrid;
    CHECK(same_trajectory(run_session(params, blk, t_protocol(0.2), i), run_session(params, blk, hybrid_t, i)));

    ProtocolConfig hybrid_r = r_protocol(0.5);
    hybrid_r.variant = Variant::kHybrid;
    CHECK(same_trajectory(run_session(params, blk, r_protocol(0.5), i), run_session(params, blk, hybrid_r, i)));
  }
}

TEST_CASE("encoder knowledge rebuilt from a transcript matches what the encoder saw") {
  const CodecShape s;
  const auto params = untrained(s, 10);
  for (const auto& proto : {r_protocol(0.3), t_protocol(0.9)}) {
    const auto blk = session_block(s, 3);
    const auto t = run_session(params, blk, proto, 3, {true, true});
    for (const auto& rec : t.rounds) {
      const Eigen::MatrixXd rebuilt = build_encoder_knowledge(blk, t, rec.round, s);
      CHECK((rebuilt - rec.encoder_knowledge).cwiseAbs().maxCoeff() == 0.0);
      CHECK(rec.encoder_knowledge.cols() == s.encoder_input());
      CHECK(rec.decoder_knowledge.cols() == s.decoder_input());
      // Decoder slots for future rounds are still empty.
      for (int c = rec.round; c < s.tau_max; ++c) CHECK(rec.decoder_knowledge.col(c).cwiseAbs().maxCoeff() == 0.0);
    }
  }
}

TEST_CASE("decoder knowledge carries received symbols of active groups") {
  const CodecShape s;
  const auto params = untrained(s, 11);
  const auto blk = session_block(s, 4);
  const auto t = run_session(params, blk, r_protocol(0.3), 4, {true, true});
  for (const auto& rec : t.rounds) {
    for (int q = 0; q < s.groups; ++q) {
      if (rec.active[q]) CHECK(rec.decoder_knowledge(q, rec.round - 1) == rec.received[q]);
    }
  }
}

TEST_CASE("receiver decisions wait for decode_from_round") {
  const CodecShape s;
  const auto params = untrained(s, 12);
  ProtocolConfig p = r_protocol(0.2);
  p.decode_from_round = 4;
  for (int i = 0; i < 10; ++i) {
    const auto t = run_session(params, session_block(s, i), p, i);
    for (const auto& rec : t.rounds)
      if (rec.round < 4)
        for (int q = 0; q < s.groups; ++q) CHECK(rec.mask_after[q]);
  }
}

TEST_CASE("fading sessions run and replay") {
  const CodecShape s;
  const auto params = untrained(s, 13);
  ProtocolConfig p = r_protocol(0.5);
  p.channel.fading = std::make_shared<const FadingTrajectory>(synthesize_rayleigh_trajectory(100, 8, 0.02, 16, 1));
  const auto blk = session_block(s, 1);
  const auto a = run_session(params, blk, p, 1);
  const auto b = run_session(params, blk, p, 1);
  CHECK(same_trajectory(a, b));
  check_r_invariants(a, s.tau_max);

  ProtocolConfig narrow = p;
  narrow.channel.fading = std::make_shared<const FadingTrajectory>(synthesize_rayleigh_trajectory(10, 3, 0.02, 8, 1));
  CHECK_THROWS_AS(run_session(params, blk, narrow, 1), ConfigError);
}

TEST_CASE("transcript records are versioned JSON lines") {
  const CodecShape s;
  const auto params = untrained(s, 14);
  const auto t = run_session(params, session_block(s, 2), r_protocol(0.5), 2);
  std::ostringstream out;
  write_transcript_record(out, t, 17);
  const auto j = nlohmann::json::parse(out.str());
  CHECK(j.at("version") == kTranscriptSchemaVersion);
  CHECK(j.at("session_id") == 17);
  CHECK(j.at("variant") == "R");
  CHECK(j.at("tau_star") == t.stop_round);
  CHECK(j.at("n_total") == t.n_total());
  CHECK(j.at("error") == t.error());
  CHECK(out.str().back() == '\n');
}
