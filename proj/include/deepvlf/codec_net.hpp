#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include <json.hpp>

#include "deepvlf/autodiff.hpp"
#include "deepvlf/message.hpp"

namespace deepvlf {

// Hyperparameters fixing every array shape of the codec.
struct CodecShape {
  int m = 3;
  int groups = 16;
  int tau_max = 10;
  int tau_vd = 3;
  int width = 32;
  int shallow_layers = 2;
  int deep_layers = 4;

  int patterns() const { return 1 << m; }
  // [bits (m) | sent x (tau_max-1) | feedback y~ (tau_max-1)]
  int encoder_input() const { return m + 2 * (tau_max - 1); }
  // [received y (tau_max) | previous belief (2^m)]
  int decoder_input() const { return tau_max + patterns(); }
  int sent_offset() const { return m; }
  int feedback_offset() const { return m + tau_max - 1; }

  void validate() const;
  bool operator==(const CodecShape&) const = default;
};

nlohmann::json to_json(const CodecShape& s);
CodecShape shape_from_json(const nlohmann::json& j);

template <typename S>
struct Dense {
  ad::Matrix<S> weight;  // in x out
  ad::Matrix<S> bias;    // 1 x out
};

// One side (encoder or decoder) of the codec. Shared across all groups.
template <typename S>
struct SideParameters {
  std::vector<Dense<S>> shallow;  // used while tau <= tau_vd
  std::vector<Dense<S>> deep;     // used once tau > tau_vd
  ad::Matrix<S> position;         // groups x width
  ad::Matrix<S> query, key, value;
  // encoder: [width->width (GeLU), width->1]
  // decoder: [width->width (GeLU), width->width (GeLU), width->2^m]
  std::vector<Dense<S>> head;
};

enum class Side { kEncoder, kDecoder };

template <typename S>
struct CodecParameters {
  CodecShape shape;
  SideParameters<S> encoder;
  SideParameters<S> decoder;
  // Per-round inference statistics of the raw parity symbols.
  std::vector<double> power_mean;
  std::vector<double> power_std;

  // Every learnable array with a stable name, in a fixed order.
  std::vector<std::pair<std::string, ad::Matrix<S>*>> tensors();
  std::vector<std::pair<std::string, const ad::Matrix<S>*>> tensors() const;

  std::size_t parameter_count() const;
  bool all_finite() const;

  static CodecParameters zeros(const CodecShape& shape);
  // He/Xavier-style uniform init; position embeddings N(0, 0.1^2).
  static CodecParameters random(const CodecShape& shape, std::uint64_t seed);

  template <typename T>
  CodecParameters<T> cast() const;
};

// Tape handles for one side's parameters.
struct BoundDense {
  ad::Var weight, bias;
};
struct BoundSide {
  std::vector<BoundDense> shallow, deep, head;
  ad::Var position, query, key, value;
};
struct BoundCodec {
  BoundSide encoder, decoder;
};

// Registers all parameters on the tape; gradients land in *grads when given
// (grads must have the same layout, e.g. CodecParameters::zeros).
template <typename S>
BoundCodec bind(ad::Tape<S>& tape, const CodecParameters<S>& params, std::type_identity_t<CodecParameters<S>>* grads);

// Fully connected ReLU stack (shallow when round <= tau_vd, deep otherwise)
// plus the learned per-group position embedding.
template <typename S>
ad::Var feature_extract(ad::Tape<S>& tape, const BoundSide& side, const CodecShape& shape, ad::Var knowledge,
                        int round);

// latents + single-head self-attention over each block of `groups` rows.
// Every receiver sees all sources; masked receivers are simply not consumed.
template <typename S>
ad::Var attention_aggregate(ad::Tape<S>& tape, const BoundSide& side, const CodecShape& shape, ad::Var latents,
                            ad::Matrix<S>* weights = nullptr);

// N x 1 raw (unnormalized) parity symbols.
template <typename S>
ad::Var encode_head(ad::Tape<S>& tape, const BoundSide& side, ad::Var aggregated);

// N x 2^m logits / beliefs.
template <typename S>
ad::Var decode_logits(ad::Tape<S>& tape, const BoundSide& side, ad::Var aggregated);
template <typename S>
ad::Var decode_head(ad::Tape<S>& tape, const BoundSide& side, ad::Var aggregated);

// ---- checkpoints ------------------------------------------------------------

enum class TensorEncoding { kFloat64, kFloat32 };

struct Checkpoint {
  CodecParameters<double> params;
  nlohmann::json metadata;  // free-form record (variant, training config, ...)
};

void save_checkpoint(const std::filesystem::path& path, const CodecParameters<double>& params,
                     const nlohmann::json& metadata, TensorEncoding encoding = TensorEncoding::kFloat64);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// ---- template definitions ----------------------------------------------------

namespace detail {

template <typename S>
Dense<S> zero_dense(int in, int out) {
  return {ad::Matrix<S>::Zero(in, out), ad::Matrix<S>::Zero(1, out)};
}

template <typename S>
SideParameters<S> zero_side(const CodecShape& s, int input, std::vector<int> head_outputs) {
  SideParameters<S> p;
  for (int i = 0; i < s.shallow_layers; ++i) p.shallow.push_back(zero_dense<S>(i == 0 ? input : s.width, s.width));
  for (int i = 0; i < s.deep_layers; ++i) p.deep.push_back(zero_dense<S>(i == 0 ? input : s.width, s.width));
  p.position = ad::Matrix<S>::Zero(s.groups, s.width);
  p.query = ad::Matrix<S>::Zero(s.width, s.width);
  p.key = ad::Matrix<S>::Zero(s.width, s.width);
  p.value = ad::Matrix<S>::Zero(s.width, s.width);
  int in = s.width;
  for (int out : head_outputs) {
    p.head.push_back(zero_dense<S>(in, out));
    in = out;
  }
  return p;
}

template <typename S, typename Fn>
void for_each_side_tensor(SideParameters<S>& side, const std::string& prefix, Fn&& fn) {
  for (std::size_t i = 0; i < side.shallow.size(); ++i) {
    fn(prefix + ".shallow." + std::to_string(i) + ".weight", side.shallow[i].weight);
    fn(prefix + ".shallow." + std::to_string(i) + ".bias", side.shallow[i].bias);
  }
  for (std::size_t i = 0; i < side.deep.size(); ++i) {
    fn(prefix + ".deep." + std::to_string(i) + ".weight", side.deep[i].weight);
    fn(prefix + ".deep." + std::to_string(i) + ".bias", side.deep[i].bias);
  }
  fn(prefix + ".position", side.position);
  fn(prefix + ".attn.query", side.query);
  fn(prefix + ".attn.key", side.key);
  fn(prefix + ".attn.value", side.value);
  for (std::size_t i = 0; i < side.head.size(); ++i) {
    fn(prefix + ".head." + std::to_string(i) + ".weight", side.head[i].weight);
    fn(prefix + ".head." + std::to_string(i) + ".bias", side.head[i].bias);
  }
}

template <typename S>
BoundSide bind_side(ad::Tape<S>& tape, const SideParameters<S>& p, SideParameters<S>* g) {
  auto sink = [&](const ad::Matrix<S>& v, ad::Matrix<S>* gs) { return gs ? tape.parameter(v, gs) : tape.constant(v); };
  BoundSide b;
  auto bind_list = [&](const std::vector<Dense<S>>& ps, std::vector<Dense<S>>* gs, std::vector<BoundDense>& out) {
    for (std::size_t i = 0; i < ps.size(); ++i) {
      out.push_back({sink(ps[i].weight, gs ? &(*gs)[i].weight : nullptr),
                     sink(ps[i].bias, gs ? &(*gs)[i].bias : nullptr)});
    }
  };
  bind_list(p.shallow, g ? &g->shallow : nullptr, b.shallow);
  bind_list(p.deep, g ? &g->deep : nullptr, b.deep);
  bind_list(p.head, g ? &g->head : nullptr, b.head);
  b.position = sink(p.position, g ? &g->position : nullptr);
  b.query = sink(p.query, g ? &g->query : nullptr);
  b.key = sink(p.key, g ? &g->key : nullptr);
  b.value = sink(p.value, g ? &g->value : nullptr);
  return b;
}

}  // namespace detail

template <typename S>
std::vector<std::pair<std::string, ad::Matrix<S>*>> CodecParameters<S>::tensors() {
  std::vector<std::pair<std::string, ad::Matrix<S>*>> out;
  auto push = [&](const std::string& name, ad::Matrix<S>& m) { out.emplace_back(name, &m); };
  detail::for_each_side_tensor(encoder, "encoder", push);
  detail::for_each_side_tensor(decoder, "decoder", push);
  return out;
}

template <typename S>
std::vector<std::pair<std::string, const ad::Matrix<S>*>> CodecParameters<S>::tensors() const {
  auto self = const_cast<CodecParameters<S>*>(this)->tensors();
  return {self.begin(), self.end()};
}

template <typename S>
std::size_t CodecParameters<S>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, m] : tensors()) n += static_cast<std::size_t>(m->size());
  return n;
}

template <typename S>
bool CodecParameters<S>::all_finite() const {
  for (const auto& [name, m] : tensors())
    if (!m->allFinite()) return false;
  return true;
}

template <typename S>
CodecParameters<S> CodecParameters<S>::zeros(const CodecShape& shape) {
  shape.validate();
  CodecParameters<S> p;
  p.shape = shape;
  p.encoder = detail::zero_side<S>(shape, shape.encoder_input(), {shape.width, 1});
  p.decoder = detail::zero_side<S>(shape, shape.decoder_input(), {shape.width, shape.width, shape.patterns()});
  p.power_mean.assign(shape.tau_max, 0.0);
  p.power_std.assign(shape.tau_max, 1.0);
  return p;
}

template <typename S>
CodecParameters<S> CodecParameters<S>::random(const CodecShape& shape, std::uint64_t seed) {
  CodecParameters<S> p = zeros(shape);
  std::mt19937_64 rng(seed);
  for (auto& [name, m] : p.tensors()) {
    const bool is_bias = name.ends_with(".bias");
    const bool is_position = name.ends_with(".position");
    if (is_bias) continue;
    if (is_position) {
      std::normal_distribution<double> nd(0.0, 0.1);
      for (Eigen::Index i = 0; i < m->size(); ++i) m->data()[i] = static_cast<S>(nd(rng));
      continue;
    }
    const double fan_in = static_cast<double>(m->rows());
    const double fan_out = static_cast<double>(m->cols());
    const bool relu_layer = name.find(".shallow.") != std::string::npos || name.find(".deep.") != std::string::npos;
    const double limit = relu_layer ? std::sqrt(6.0 / fan_in) : std::sqrt(6.0 / (fan_in + fan_out));
    std::uniform_real_distribution<double> ud(-limit, limit);
    for (Eigen::Index i = 0; i < m->size(); ++i) m->data()[i] = static_cast<S>(ud(rng));
  }
  return p;
}

template <typename S>
template <typename T>
CodecParameters<T> CodecParameters<S>::cast() const {
  CodecParameters<T> out = CodecParameters<T>::zeros(shape);
  auto src = tensors();
  auto dst = out.tensors();
  for (std::size_t i = 0; i < src.size(); ++i) *dst[i].second = src[i].second->template cast<T>();
  out.power_mean = power_mean;
  out.power_std = power_std;
  return out;
}

template <typename S>
BoundCodec bind(ad::Tape<S>& tape, const CodecParameters<S>& params, std::type_identity_t<CodecParameters<S>>* grads) {
  return {detail::bind_side(tape, params.encoder, grads ? &grads->encoder : nullptr),
          detail::bind_side(tape, params.decoder, grads ? &grads->decoder : nullptr)};
}

template <typename S>
ad::Var feature_extract(ad::Tape<S>& tape, const BoundSide& side, const CodecShape& shape, ad::Var knowledge,
                        int round) {
  const auto& stack = round <= shape.tau_vd ? side.shallow : side.deep;
  ad::Var h = knowledge;
  for (const auto& layer : stack) h = ad::relu(tape, ad::add_row(tape, ad::matmul(tape, h, layer.weight), layer.bias));
  return ad::add_group_embedding(tape, h, side.position);
}

template <typename S>
ad::Var attention_aggregate(ad::Tape<S>& tape, const BoundSide& side, const CodecShape& shape, ad::Var latents,
                            ad::Matrix<S>* weights) {
  const ad::Var q = ad::matmul(tape, latents, side.query);
  const ad::Var k = ad::matmul(tape, latents, side.key);
  const ad::Var v = ad::matmul(tape, latents, side.value);
  const S scale = S(1) / std::sqrt(static_cast<S>(shape.width));
  const ad::Var mixed = ad::block_attention(tape, q, k, v, shape.groups, scale, weights);
  return ad::add(tape, latents, mixed);
}

template <typename S>
ad::Var encode_head(ad::Tape<S>& tape, const BoundSide& side, ad::Var aggregated) {
  ad::Var h = ad::gelu(tape, ad::add_row(tape, ad::matmul(tape, aggregated, side.head[0].weight), side.head[0].bias));
  return ad::add_row(tape, ad::matmul(tape, h, side.head[1].weight), side.head[1].bias);
}

template <typename S>
ad::Var decode_logits(ad::Tape<S>& tape, const BoundSide& side, ad::Var aggregated) {
  ad::Var h = aggregated;
  for (std::size_t i = 0; i + 1 < side.head.size(); ++i) {
    h = ad::gelu(tape, ad::add_row(tape, ad::matmul(tape, h, side.head[i].weight), side.head[i].bias));
  }
  const auto& last = side.head.back();
  return ad::add_row(tape, ad::matmul(tape, h, last.weight), last.bias);
}

template <typename S>
ad::Var decode_head(ad::Tape<S>& tape, const BoundSide& side, ad::Var aggregated) {
  return ad::softmax_rows(tape, decode_logits(tape, side, aggregated));
}

}  // namespace deepvlf
