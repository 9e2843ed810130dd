#pragma once

// Softmax choice model over M candidates: P(y = i) is proportional to exp(r_i).
// The pipeline always offers three candidates, the third being the
// zero-reward anchor pair.

#include <array>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "pbfqe/error.hpp"
#include "pbfqe/rng.hpp"

namespace pbfqe {

inline constexpr int kCandidates = 3;
inline constexpr int kAnchorSlot = 2;

/// Probability vector over candidate indices.
class ChoiceProbabilities {
 public:
  explicit ChoiceProbabilities(std::vector<double> p) : p_(std::move(p)) {
    double sum = 0.0;
    for (double x : p_) {
      if (!(x >= 0.0)) throw InvariantError("choice probability is negative or NaN");
      sum += x;
    }
    if (p_.empty() || std::abs(sum - 1.0) > 1e-12) throw InvariantError("choice probabilities must sum to 1");
  }

  std::size_t size() const { return p_.size(); }
  double operator[](std::size_t i) const { return p_[i]; }
  std::span<const double> values() const { return p_; }

 private:
  std::vector<double> p_;
};

/// log sum_i exp(r_i), with the maximum factored out.
inline double log_sum_exp(std::span<const double> r) {
  double mx = -INFINITY;
  for (double x : r) mx = std::max(mx, x);
  double s = 0.0;
  for (double x : r) s += std::exp(x - mx);
  return mx + std::log(s);
}

inline ChoiceProbabilities choice_probabilities(std::span<const double> rewards) {
  if (rewards.empty()) throw RangeError("need at least one candidate");
  double mx = -INFINITY;
  for (double x : rewards) {
    if (!std::isfinite(x)) throw InvariantError("non-finite candidate reward");
    mx = std::max(mx, x);
  }
  std::vector<double> p(rewards.size());
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += (p[i] = std::exp(rewards[i] - mx));
  for (double& x : p) x /= s;
  return ChoiceProbabilities(std::move(p));
}

inline ChoiceProbabilities choice_probabilities(std::initializer_list<double> rewards) {
  return choice_probabilities(std::span<const double>(rewards.begin(), rewards.size()));
}

inline int sample_choice(const ChoiceProbabilities& probs, Rng& rng) {
  return static_cast<int>(sample_categorical(probs.values(), rng));
}

/// One preference observation expressed through the rewards a candidate
/// reward function assigns to its three options (slot 2 is the anchor).
struct ScoredChoice {
  std::array<double, kCandidates> rewards{};
  int label = 0;
};

/// -sum_k [ r(y_k) - log sum_i exp(r_i) ] over the observations.
inline double negative_log_likelihood(std::span<const ScoredChoice> data) {
  double nll = 0.0;
  for (const auto& c : data) {
    for (double r : c.rewards)
      if (!std::isfinite(r)) throw InvariantError("non-finite reward in likelihood");
    nll -= c.rewards[static_cast<std::size_t>(c.label)] - log_sum_exp(c.rewards);
  }
  return nll;
}

/// d NLL / d r_i for a single observation: softmax_i - [i == label].
inline std::array<double, kCandidates> nll_reward_gradient(const ScoredChoice& c) {
  const auto p = choice_probabilities(c.rewards);
  std::array<double, kCandidates> g{};
  for (std::size_t i = 0; i < g.size(); ++i)
    g[i] = p[i] - (static_cast<int>(i) == c.label ? 1.0 : 0.0);
  return g;
}

/// Both sides of the anchored log-ratio inequality relating reward errors to
/// choice-distribution errors on one candidate set:
///   lhs = sum_i | (r_i - r_anchor) - (l_i - l_anchor) |^2
///   rhs = 20 * || softmax(l) - softmax(r) ||_1^2
/// where slot `anchor` is the anchor candidate.
struct AnchoredGap {
  double lhs = 0.0;
  double rhs = 0.0;
  bool holds() const { return lhs <= rhs; }
};

inline AnchoredGap anchored_log_ratio_gap(std::span<const double> truth, std::span<const double> learned,
                                          std::size_t anchor = kAnchorSlot) {
  if (truth.size() != learned.size() || anchor >= truth.size())
    throw DimensionError("candidate sets must have equal size and contain the anchor");
  const auto pt = choice_probabilities(truth);
  const auto pl = choice_probabilities(learned);
  AnchoredGap g;
  double l1 = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const double d = (truth[i] - truth[anchor]) - (learned[i] - learned[anchor]);
    g.lhs += d * d;
    l1 += std::abs(pl[i] - pt[i]);
  }
  g.rhs = 20.0 * l1 * l1;
  return g;
}

}  // namespace pbfqe
