#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace deepvlf {

// Raised for any invalid user-facing configuration (thresholds, sizes, ...).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Bits = std::vector<std::uint8_t>;

// Pattern index <-> m-bit group, big-endian (first bit is the MSB).
int group_to_index(std::span<const std::uint8_t> group);
Bits index_to_group(int index, int m);

// K information bits split into Q equal groups of m = K/Q bits.
class BitGroupBlock {
 public:
  BitGroupBlock(Bits bits, int groups);

  int k() const { return static_cast<int>(bits_.size()); }
  int q() const { return groups_; }
  int m() const { return m_; }

  const Bits& bits() const { return bits_; }
  std::span<const std::uint8_t> group(int q) const;
  const std::vector<int>& pattern_indices() const { return indices_; }

 private:
  Bits bits_;
  int groups_;
  int m_;
  std::vector<int> indices_;
};

BitGroupBlock partition_bits(Bits bits, int groups);

// Q probability columns over 2^m patterns; column q is p_q.
class BeliefMatrix {
 public:
  static constexpr double kTolerance = 1e-6;

  // Rejects columns that are negative or do not sum to one within kTolerance.
  explicit BeliefMatrix(Eigen::MatrixXd columns);
  static BeliefMatrix uniform(int groups, int m);

  int q() const { return static_cast<int>(probs_.cols()); }
  int patterns() const { return static_cast<int>(probs_.rows()); }
  int m() const { return m_; }

  auto column(int q) const { return probs_.col(q); }
  const Eigen::MatrixXd& columns() const { return probs_; }
  double max_belief(int q) const { return probs_.col(q).maxCoeff(); }

 private:
  Eigen::MatrixXd probs_;
  int m_;
};

// Lowest index wins on ties.
int argmax_pattern(const Eigen::Ref<const Eigen::VectorXd>& column);

Bits hard_decision(const BeliefMatrix& beliefs);

// flags[q] == true means group q is still undecoded.
struct DecodeMask {
  std::vector<bool> flags;
  int round = 1;

  static DecodeMask all_active(int groups) { return {std::vector<bool>(groups, true), 1}; }
  int active_count() const;
  bool any_active() const { return active_count() > 0; }
};

// gamma must lie in (1/2^m, 1).
void validate_threshold(double gamma, int m);

DecodeMask update_mask(const DecodeMask& prev, const BeliefMatrix& beliefs, double gamma);

}  // namespace deepvlf
