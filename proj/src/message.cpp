#include "deepvlf/message.hpp"

#include <algorithm>
#include <cmath>

namespace deepvlf {

int group_to_index(std::span<const std::uint8_t> group) {
  int index = 0;
  for (std::uint8_t bit : group) index = (index << 1) | (bit ? 1 : 0);
  return index;
}

Bits index_to_group(int index, int m) {
  Bits group(m);
  for (int i = 0; i < m; ++i) group[i] = static_cast<std::uint8_t>((index >> (m - 1 - i)) & 1);
  return group;
}

BitGroupBlock::BitGroupBlock(Bits bits, int groups) : bits_(std::move(bits)), groups_(groups) {
  if (groups < 1) throw ConfigError("group count must be >= 1, got " + std::to_string(groups));
  if (bits_.empty() || bits_.size() % static_cast<std::size_t>(groups) != 0) {
    throw ConfigError("bit length " + std::to_string(bits_.size()) + " is not divisible by Q=" +
                      std::to_string(groups));
  }
  for (auto b : bits_) {
    if (b > 1) throw ConfigError("bit values must be 0 or 1");
  }
  m_ = static_cast<int>(bits_.size()) / groups;
  indices_.reserve(groups);
  for (int q = 0; q < groups; ++q) indices_.push_back(group_to_index(group(q)));
}

std::span<const std::uint8_t> BitGroupBlock::group(int q) const {
  return std::span<const std::uint8_t>(bits_).subspan(static_cast<std::size_t>(q) * m_, m_);
}

BitGroupBlock partition_bits(Bits bits, int groups) { return BitGroupBlock(std::move(bits), groups); }

BeliefMatrix::BeliefMatrix(Eigen::MatrixXd columns) : probs_(std::move(columns)) {
  const auto patterns = probs_.rows();
  if (patterns < 2 || (patterns & (patterns - 1)) != 0) {
    throw ConfigError("belief columns must have 2^m entries, got " + std::to_string(patterns));
  }
  m_ = 0;
  while ((Eigen::Index{1} << m_) < patterns) ++m_;
  for (Eigen::Index q = 0; q < probs_.cols(); ++q) {
    const auto col = probs_.col(q);
    if (!col.allFinite() || col.minCoeff() < 0.0 || std::abs(col.sum() - 1.0) > kTolerance) {
      throw ConfigError("belief column " + std::to_string(q) + " is not a probability vector");
    }
  }
}

BeliefMatrix BeliefMatrix::uniform(int groups, int m) {
  const int patterns = 1 << m;
  return BeliefMatrix(Eigen::MatrixXd::Constant(patterns, groups, 1.0 / patterns));
}

int argmax_pattern(const Eigen::Ref<const Eigen::VectorXd>& column) {
  int best = 0;
  for (int j = 1; j < column.size(); ++j) {
    if (column[j] > column[best]) best = j;
  }
  return best;
}

Bits hard_decision(const BeliefMatrix& beliefs) {
  Bits out;
  out.reserve(static_cast<std::size_t>(beliefs.q()) * beliefs.m());
  for (int q = 0; q < beliefs.q(); ++q) {
    const auto group = index_to_group(argmax_pattern(beliefs.column(q)), beliefs.m());
    out.insert(out.end(), group.begin(), group.end());
  }
  return out;
}

int DecodeMask::active_count() const {
  return static_cast<int>(std::count(flags.begin(), flags.end(), true));
}

void validate_threshold(double gamma, int m) {
  const double floor = 1.0 / static_cast<double>(1 << m);
  if (!(gamma > floor && gamma < 1.0)) {
    throw ConfigError("threshold " + std::to_string(gamma) + " outside (1/2^m, 1) for m=" +
                      std::to_string(m));
  }
}

DecodeMask update_mask(const DecodeMask& prev, const BeliefMatrix& beliefs, double gamma) {
  validate_threshold(gamma, beliefs.m());
  if (static_cast<int>(prev.flags.size()) != beliefs.q()) {
    throw ConfigError("mask size does not match belief matrix");
  }
  DecodeMask next{prev.flags, prev.round + 1};
  for (int q = 0; q < beliefs.q(); ++q) {
    next.flags[q] = prev.flags[q] && beliefs.max_belief(q) < gamma;
  }
  return next;
}

}  // namespace deepvlf
