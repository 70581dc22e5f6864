#pragma once

// Batched execution of interactive sessions on an autodiff tape. Inference,
// power calibration, training and gradient checking all go through
// run_rollout(); the only differences are the power mode, whether a loss is
// attached and whether stopping is enabled.

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "deepvlf/autodiff.hpp"
#include "deepvlf/channels.hpp"
#include "deepvlf/codec_net.hpp"
#include "deepvlf/protocol.hpp"

namespace deepvlf {

enum class PowerMode {
  kTrain,  // standardize with current-batch statistics over active symbols
  kInfer,  // apply stored per-round statistics
};

// Loss window [tau_plus, tau*_q] with weight theta^(tau - offset).
struct LossSpec {
  int tau_plus = 1;
  double theta = 10.0;
  double offset = 9.0;
  double log_floor = 1e-12;
};

inline constexpr double kPowerVarianceFloor = 1e-8;

// Hard decisions taken during a rollout. Replaying them makes the loss a
// smooth function of the parameters (used by the gradient check).
struct DecisionTrace {
  std::vector<std::vector<std::uint8_t>> mask_after;    // per round, N flags
  std::vector<std::vector<std::uint8_t>> session_done;  // per round, B flags
  std::vector<std::vector<std::uint8_t>> transmitter_stop;
};

template <typename S>
struct RolloutRequest {
  const CodecParameters<S>* params = nullptr;
  ProtocolConfig protocol;
  std::span<const BitGroupBlock> blocks;
  std::span<const std::uint64_t> seeds;
  PowerMode power = PowerMode::kInfer;
  bool fixed_horizon = false;  // no receiver freezing, no transmitter stop
  std::optional<LossSpec> loss;
  bool record_rounds = false;
  bool record_knowledge = false;
  const DecisionTrace* replay = nullptr;
  DecisionTrace* capture = nullptr;
};

struct RolloutResult {
  std::vector<SessionTranscript> sessions;
  ad::Var loss;                             // valid when a loss was requested
  std::vector<ad::ActiveStats> power_stats; // per round played, batch statistics of raw symbols
  int loss_terms = 0;                       // number of (group, round) cross-entropy terms
};

template <typename S>
RolloutResult run_rollout(ad::Tape<S>& tape, const BoundCodec& bound, const RolloutRequest<S>& req) {
  using Mat = ad::Matrix<S>;
  const CodecParameters<S>& params = *req.params;
  const CodecShape& shape = params.shape;
  const ProtocolConfig& proto = req.protocol;
  const int B = static_cast<int>(req.blocks.size());
  const int Q = shape.groups;
  const int m = shape.m;
  const int P = shape.patterns();
  const int N = B * Q;
  const int tau_max = std::min(proto.tau_max, shape.tau_max);
  if (B == 0) return {};
  if (static_cast<int>(req.seeds.size()) != B) throw std::logic_error("run_rollout: one seed per block required");
  for (const auto& blk : req.blocks) {
    if (blk.q() != Q || blk.m() != m) throw ConfigError("block shape does not match codec (Q, m)");
  }
  proto.validate(m);

  const bool freezing = proto.receiver_freezing() && !req.fixed_horizon;
  const bool tx_check = proto.transmitter_check() && !req.fixed_horizon;
  const bool has_belief_fb = proto.belief_feedback();
  const double sigma_f = std::sqrt(proto.channel.sigma_f2());
  const double sigma_b2 = proto.channel.sigma_b2();
  const double sigma_b = std::sqrt(sigma_b2);
  const S c_s = static_cast<S>(feedback_symbol_scale(sigma_b2));
  const double c_b = belief_scale(m);
  const double gamma = proto.gamma.value_or(2.0);
  const double gamma_t = proto.gamma_t.value_or(2.0);

  std::vector<SessionNoise> noise;
  noise.reserve(B);
  for (int b = 0; b < B; ++b) noise.emplace_back(req.seeds[b]);
  std::vector<FadingWindow> windows;
  if (proto.channel.fading) {
    for (int b = 0; b < B; ++b) windows.push_back(sample_fading_window(*proto.channel.fading, tau_max, noise[b].fading));
  }

  Mat bits_pm(N, m);
  std::vector<int> targets(N);
  for (int b = 0; b < B; ++b) {
    for (int q = 0; q < Q; ++q) {
      const auto g = req.blocks[b].group(q);
      for (int i = 0; i < m; ++i) bits_pm(b * Q + q, i) = g[i] ? S(1) : S(-1);
      targets[b * Q + q] = req.blocks[b].pattern_indices()[q];
    }
  }

  RolloutResult result;
  result.sessions.resize(B);
  for (int b = 0; b < B; ++b) {
    auto& s = result.sessions[b];
    s.variant = proto.variant;
    s.seed = req.seeds[b];
    s.k = req.blocks[b].k();
    s.q = Q;
    s.m = m;
    s.truth = req.blocks[b].bits();
    s.group_stop.assign(Q, 0);
  }

  const ad::Var bits_var = tape.constant(bits_pm);
  const ad::Var zero_col = tape.constant(Mat::Zero(N, 1));
  // Codec input width is fixed by shape.tau_max even when proto.tau_max is smaller.
  std::vector<ad::Var> sent_slots(shape.tau_max - 1, zero_col);
  std::vector<ad::Var> fb_slots(shape.tau_max - 1, zero_col);
  std::vector<ad::Var> y_slots(shape.tau_max, zero_col);
  ad::Var prev_beliefs = tape.constant(Mat::Constant(N, P, S(1) / S(P)));

  Mat active = Mat::Ones(N, 1);
  std::vector<std::uint8_t> done(B, 0);
  std::vector<ad::Var> loss_terms;
  const bool use_loss = req.loss.has_value();

  for (int tau = 1; tau <= tau_max; ++tau) {
    if (active.sum() == S(0)) break;
    const int r = tau - 1;

    // Encoder: knowledge -> VDFE -> attention -> head -> power normalization.
    std::vector<ad::Var> enc_parts{bits_var};
    enc_parts.insert(enc_parts.end(), sent_slots.begin(), sent_slots.end());
    enc_parts.insert(enc_parts.end(), fb_slots.begin(), fb_slots.end());
    const ad::Var enc_know = ad::concat_cols<S>(tape, enc_parts);
    const ad::Var enc_lat = feature_extract(tape, bound.encoder, shape, enc_know, tau);
    const ad::Var enc_agg = attention_aggregate(tape, bound.encoder, shape, enc_lat);
    const ad::Var raw = encode_head(tape, bound.encoder, enc_agg);

    ad::Var x;
    if (req.power == PowerMode::kTrain) {
      ad::ActiveStats st;
      x = ad::standardize_active(tape, raw, active, static_cast<S>(kPowerVarianceFloor), &st);
      result.power_stats.push_back(st);
    } else {
      x = ad::normalize_fixed(tape, raw, active, static_cast<S>(params.power_mean[r]),
                              static_cast<S>(params.power_std[r]));
      result.power_stats.push_back({params.power_mean[r], params.power_std[r], static_cast<int>(active.sum())});
    }

    // Forward channel (noise is drawn for every group so draws do not depend on activity).
    Mat fwd_noise(N, 1);
    for (int b = 0; b < B; ++b) {
      if (proto.channel.fading) {
        const auto w = equalized_noise(windows[b].round(r), Q, sigma_f * sigma_f, noise[b].forward);
        for (int q = 0; q < Q; ++q) fwd_noise(b * Q + q, 0) = static_cast<S>(w[q]);
      } else {
        for (int q = 0; q < Q; ++q) fwd_noise(b * Q + q, 0) = static_cast<S>(sigma_f * noise[b].forward.gaussian());
      }
    }
    fwd_noise = fwd_noise.cwiseProduct(active);
    const ad::Var y = ad::add_const(tape, x, fwd_noise);
    y_slots[r] = y;

    // Decoder: [y slots | previous beliefs] -> VDFE -> attention -> head.
    std::vector<ad::Var> dec_parts(y_slots.begin(), y_slots.end());
    dec_parts.push_back(prev_beliefs);
    const ad::Var dec_know = ad::concat_cols<S>(tape, dec_parts);
    const ad::Var dec_lat = feature_extract(tape, bound.decoder, shape, dec_know, tau);
    const ad::Var dec_agg = attention_aggregate(tape, bound.decoder, shape, dec_lat);
    const ad::Var fresh = decode_head(tape, bound.decoder, dec_agg);
    const ad::Var beliefs = ad::select_rows(tape, active, fresh, prev_beliefs);

    if (use_loss && tau >= req.loss->tau_plus) {
      const S w = static_cast<S>(std::pow(req.loss->theta, tau - req.loss->offset) / B);
      std::vector<S> weights(N, S(0));
      for (int i = 0; i < N; ++i) {
        if (active(i, 0) != S(0)) {
          weights[i] = w;
          ++result.loss_terms;
        }
      }
      loss_terms.push_back(ad::weighted_nll<S>(tape, beliefs, targets, weights, static_cast<S>(req.loss->log_floor)));
    }

    // Passive feedback of the received symbols.
    Mat fb_noise = Mat::Zero(N, 1);
    if (sigma_b > 0.0) {
      for (int b = 0; b < B; ++b)
        for (int q = 0; q < Q; ++q) fb_noise(b * Q + q, 0) = static_cast<S>(sigma_b * noise[b].feedback.gaussian());
    }
    fb_noise = fb_noise.cwiseProduct(active);
    const ad::Var fb = ad::add_const(tape, ad::scale(tape, y, c_s), fb_noise);

    // Receiver threshold decisions.
    const Mat& pv = tape.value(beliefs);
    std::vector<std::uint8_t> mask_after(N, 0);
    for (int i = 0; i < N; ++i) {
      if (active(i, 0) == S(0)) continue;
      const bool decoded = freezing && tau >= proto.decode_from_round && pv.row(i).maxCoeff() >= gamma;
      mask_after[i] = decoded ? 0 : 1;
    }

    // Active (belief) feedback, observed by the transmitter only.
    Mat belief_fb;
    if (has_belief_fb) {
      belief_fb.resize(N, P);
      for (int b = 0; b < B; ++b) {
        for (int q = 0; q < Q; ++q) {
          const int i = b * Q + q;
          for (int j = 0; j < P; ++j) {
            const double nz = sigma_b > 0.0 ? sigma_b * noise[b].belief.gaussian() : 0.0;
            belief_fb(i, j) = static_cast<S>(c_b * static_cast<double>(pv(i, j)) + nz);
          }
        }
      }
    }

    // Session termination.
    std::vector<std::uint8_t> done_now(B, 0), tx_stop(B, 0);
    for (int b = 0; b < B; ++b) {
      if (done[b]) continue;
      bool remaining = false;
      bool tx_ok = tx_check;
      for (int q = 0; q < Q; ++q) {
        const int i = b * Q + q;
        if (!mask_after[i]) continue;
        remaining = true;
        if (!tx_ok) continue;
        const auto row = belief_fb.row(i).template cast<double>();
        int best = 0;
        for (int j = 1; j < P; ++j)
          if (row[j] > row[best]) best = j;
        if (best != targets[i] || row[best] / c_b < gamma_t) tx_ok = false;
      }
      if (!remaining) {
        done_now[b] = 1;
      } else if (tx_ok) {
        done_now[b] = 1;
        tx_stop[b] = 1;
      } else if (tau == tau_max) {
        done_now[b] = 1;
      }
    }

    if (req.replay) {
      if (r >= static_cast<int>(req.replay->mask_after.size())) throw std::logic_error("replay trace too short");
      mask_after = req.replay->mask_after[r];
      done_now = req.replay->session_done[r];
      tx_stop = req.replay->transmitter_stop[r];
    }
    if (req.capture) {
      req.capture->mask_after.push_back(mask_after);
      req.capture->session_done.push_back(done_now);
      req.capture->transmitter_stop.push_back(tx_stop);
    }

    // Bookkeeping per session.
    const Mat& xv = tape.value(x);
    const Mat& yv = tape.value(y);
    const Mat& fbv = tape.value(fb);
    for (int b = 0; b < B; ++b) {
      if (done[b]) continue;
      auto& s = result.sessions[b];
      int uses = 0;
      for (int q = 0; q < Q; ++q) {
        const int i = b * Q + q;
        if (active(i, 0) == S(0)) continue;
        ++uses;
        s.power_sum += static_cast<double>(xv(i, 0)) * static_cast<double>(xv(i, 0));
        if (!mask_after[i]) {
          s.group_stop[q] = tau;
        } else if (done_now[b]) {
          s.group_stop[q] = tau;
        }
      }
      s.channel_uses.push_back(uses);
      if (done_now[b]) {
        s.stop_round = tau;
        bool any_remaining = false;
        for (int q = 0; q < Q; ++q) any_remaining = any_remaining || mask_after[b * Q + q];
        s.cause = !any_remaining ? Termination::kThreshold
                  : tx_stop[b]   ? Termination::kTransmitter
                                 : Termination::kTauMax;
      }
      if (req.record_rounds) {
        RoundRecord rec;
        rec.round = tau;
        rec.active.resize(Q);
        rec.sent.resize(Q);
        rec.received.resize(Q);
        rec.feedback.resize(Q);
        rec.mask_after.resize(Q);
        rec.beliefs.resize(P, Q);
        for (int q = 0; q < Q; ++q) {
          const int i = b * Q + q;
          rec.active[q] = active(i, 0) != S(0);
          rec.sent[q] = static_cast<double>(xv(i, 0));
          rec.received[q] = static_cast<double>(yv(i, 0));
          rec.feedback[q] = static_cast<double>(fbv(i, 0));
          rec.mask_after[q] = mask_after[i] != 0;
          rec.beliefs.col(q) = pv.row(i).transpose().template cast<double>();
        }
        if (belief_fb.size()) {
          rec.belief_feedback = belief_fb.middleRows(b * Q, Q).transpose().template cast<double>();
        }
        if (req.record_knowledge) {
          rec.encoder_knowledge = tape.value(enc_know).middleRows(b * Q, Q).template cast<double>();
          rec.decoder_knowledge = tape.value(dec_know).middleRows(b * Q, Q).template cast<double>();
        }
        s.rounds.push_back(std::move(rec));
      }
    }

    // Encoder variable-node update: append (x, y~) for groups still undecoded.
    if (tau <= shape.tau_max - 1) {
      Mat keep(N, 1);
      for (int i = 0; i < N; ++i) keep(i, 0) = mask_after[i] ? S(1) : S(0);
      sent_slots[r] = ad::mul_rows(tape, x, keep);
      fb_slots[r] = ad::mul_rows(tape, fb, keep);
    }
    prev_beliefs = beliefs;

    for (int b = 0; b < B; ++b) {
      if (done_now[b]) done[b] = 1;
      for (int q = 0; q < Q; ++q) {
        const int i = b * Q + q;
        active(i, 0) = (!done[b] && mask_after[i]) ? S(1) : S(0);
      }
    }
  }

  // Final estimates from the receiver's (frozen or last) beliefs.
  const Mat& final_p = tape.value(prev_beliefs);
  for (int b = 0; b < B; ++b) {
    auto& s = result.sessions[b];
    s.estimate.clear();
    for (int q = 0; q < Q; ++q) {
      const auto row = final_p.row(b * Q + q);
      int best = 0;
      for (int j = 1; j < P; ++j)
        if (row[j] > row[best]) best = j;
      const auto g = index_to_group(best, m);
      s.estimate.insert(s.estimate.end(), g.begin(), g.end());
    }
  }

  if (use_loss) {
    if (loss_terms.empty()) {
      result.loss = tape.constant(Mat::Zero(1, 1));
    } else {
      ad::Var total = loss_terms[0];
      for (std::size_t i = 1; i < loss_terms.size(); ++i) total = ad::add(tape, total, loss_terms[i]);
      result.loss = total;
    }
  }
  return result;
}

}  // namespace deepvlf
