#pragma once

// Reward learning from anchored preference data: a maximum-likelihood fit of
// one ReLU network per step, followed by normalization so the anchor pair
// scores exactly zero.

#include <cmath>
#include <concepts>
#include <cstdint>
#include <vector>

#include <Eigen/Dense>

#include "pbfqe/choice_model.hpp"
#include "pbfqe/error.hpp"
#include "pbfqe/relu_net.hpp"
#include "pbfqe/synthetic_env.hpp"
#include "pbfqe/training.hpp"

namespace pbfqe {

/// NLL of one step's preference slice under a reward function of the
/// flattened pair index.
template <typename RewardFn>
  requires std::invocable<const RewardFn&, int>
double negative_log_likelihood(const std::vector<PreferenceSample>& slice, const RewardFn& reward) {
  std::vector<ScoredChoice> scored;
  scored.reserve(slice.size());
  for (const auto& p : slice) {
    ScoredChoice c;
    for (std::size_t i = 0; i < p.pairs.size(); ++i) c.rewards[i] = reward(p.pairs[i]);
    c.label = p.label;
    scored.push_back(c);
  }
  return negative_log_likelihood(scored);
}

struct RewardFitConfig {
  NetConfig net;  // input_dim is overwritten with the ambient dimension
  OptimizerConfig opt;
};

/// Default reward class: outputs in [0, 1].
inline RewardFitConfig default_reward_fit() {
  RewardFitConfig c;
  c.net.hidden_layers = 2;
  c.net.width = 32;
  c.net.weight_bound = 10.0;
  c.net.output_lo = 0.0;
  c.net.output_hi = 1.0;
  c.opt.learning_rate = 2e-2;
  c.opt.epochs = 1500;
  c.opt.boundary_penalty = 1.0;
  return c;
}

class LearnedReward {
 public:
  LearnedReward() = default;
  LearnedReward(std::vector<ReluNetwork> nets, std::vector<int> anchor_pairs, const Eigen::MatrixXd& points,
                std::vector<double> final_losses)
      : nets_(std::move(nets)), anchor_pairs_(std::move(anchor_pairs)), losses_(std::move(final_losses)) {
    // Per-point forward so that table() and evaluate() agree bitwise; the
    // batched product may round differently.
    for (std::size_t h = 0; h < nets_.size(); ++h) {
      Eigen::VectorXd raw(points.rows());
      for (Eigen::Index p = 0; p < points.rows(); ++p) raw(p) = nets_[h].forward(points.row(p).transpose());
      offsets_.push_back(raw(anchor_pairs_[h]));
      tables_.push_back(raw.array() - offsets_.back());
    }
  }

  int horizon() const { return static_cast<int>(nets_.size()); }
  const ReluNetwork& network(int h) const { return nets_.at(static_cast<std::size_t>(h - 1)); }
  /// c_h = r^l_h at the anchor.
  double anchor_offset(int h) const { return offsets_.at(static_cast<std::size_t>(h - 1)); }
  /// Normalized reward on every flattened pair; zero at the anchor.
  const Eigen::VectorXd& table(int h) const { return tables_.at(static_cast<std::size_t>(h - 1)); }
  double operator()(int h, int pair) const { return table(h)(pair); }
  /// r^l_h(x) - c_h for an arbitrary embedded point.
  double evaluate(int h, const Eigen::VectorXd& x) const { return network(h).forward(x) - anchor_offset(h); }
  double training_loss(int h) const { return losses_.at(static_cast<std::size_t>(h - 1)); }

  std::size_t nonzeros(int h) const { return network(h).nonzeros(); }

  Json to_json() const {
    Json nets = Json::array();
    for (const auto& n : nets_) nets.push_back(n.to_json());
    return {{"format", "pbfqe.learned_reward"}, {"version", 1}, {"networks", std::move(nets)},
            {"anchor_pairs", anchor_pairs_},     {"anchor_offsets", offsets_}};
  }

 private:
  std::vector<ReluNetwork> nets_;
  std::vector<int> anchor_pairs_;
  std::vector<double> losses_;
  std::vector<double> offsets_;
  std::vector<Eigen::VectorXd> tables_;
};

inline ReluNetwork fit_reward_step(const Eigen::MatrixXd& points, const std::vector<PreferenceSample>& slice,
                                   const RewardFitConfig& cfg, int h, double* final_loss = nullptr) {
  if (slice.empty()) throw RangeError("preference slice at step h=" + std::to_string(h) + " is empty");
  std::vector<std::array<int, kCandidates>> cands;
  std::vector<int> labels;
  cands.reserve(slice.size());
  labels.reserve(slice.size());
  for (const auto& p : slice) {
    cands.push_back(p.pairs);
    labels.push_back(p.label);
  }
  ChoiceObjective obj(points, std::move(cands), std::move(labels));
  if (cfg.opt.batch_size == 0) obj = obj.grouped();
  NetConfig net_cfg = cfg.net;
  net_cfg.input_dim = static_cast<int>(points.cols());
  OptimizerConfig opt = cfg.opt;
  opt.seed = derive_seed(cfg.opt.seed, {0x72657761ULL, static_cast<std::uint64_t>(h), 1});
  const ReluNetwork init(net_cfg, derive_seed(cfg.opt.seed, {0x72657761ULL, static_cast<std::uint64_t>(h), 0}));
  try {
    auto result = train(init, obj, opt);
    if (final_loss) *final_loss = result.best_loss;
    return std::move(result.network);
  } catch (const DivergenceError& e) {
    throw DivergenceError("reward fit at step h=" + std::to_string(h) + ": " + e.what());
  }
}

/// Fits every step independently on the embedded points of `env`.
inline LearnedReward fit_reward(const EmbeddedMdp& env, const PreferenceDataset& prefs, const RewardFitConfig& cfg) {
  if (static_cast<int>(prefs.steps.size()) != env.horizon())
    throw DimensionError("preference dataset does not cover the horizon");
  std::vector<ReluNetwork> nets;
  std::vector<int> anchors;
  std::vector<double> losses;
  for (int h = 1; h <= env.horizon(); ++h) {
    double loss = 0.0;
    nets.push_back(fit_reward_step(env.embedding(), prefs.step(h), cfg, h, &loss));
    anchors.push_back(env.anchor_pair(h));
    losses.push_back(loss);
  }
  return LearnedReward(std::move(nets), std::move(anchors), env.embedding(), std::move(losses));
}

struct MseEstimate {
  double mean = 0.0;
  double standard_error = 0.0;
};

/// Mean squared deviation between two reward tables over sampled pairs.
inline MseEstimate squared_error_mean(const Eigen::VectorXd& learned, const Eigen::VectorXd& truth,
                                      const std::vector<int>& samples) {
  if (samples.empty()) throw RangeError("reward_mse needs at least one sample");
  double sum = 0.0, sum_sq = 0.0;
  for (int p : samples) {
    const double d = learned(p) - truth(p);
    const double e = d * d;
    sum += e;
    sum_sq += e * e;
  }
  const double n = static_cast<double>(samples.size());
  const double mean = sum / n;
  const double var = samples.size() > 1 ? std::max(0.0, (sum_sq - n * mean * mean) / (n - 1.0)) : 0.0;
  return {mean, std::sqrt(var / n)};
}

inline Eigen::VectorXd flatten_rewards(const TabularMdp& mdp, int h) {
  Eigen::VectorXd v(mdp.num_pairs());
  for (int s = 0; s < mdp.num_states(); ++s)
    for (int a = 0; a < mdp.num_actions(); ++a) v(mdp.pair_index(s, a)) = mdp.reward(h, s, a);
  return v;
}

/// Per-step reward MSE; eta_samples[h-1] are pair indices drawn from eta_h.
inline std::vector<MseEstimate> reward_mse(const LearnedReward& learned, const TabularMdp& truth,
                                           const std::vector<std::vector<int>>& eta_samples) {
  if (static_cast<int>(eta_samples.size()) != truth.horizon() || learned.horizon() != truth.horizon())
    throw DimensionError("reward_mse: horizon mismatch");
  std::vector<MseEstimate> out;
  for (int h = 1; h <= truth.horizon(); ++h)
    out.push_back(squared_error_mean(learned.table(h), flatten_rewards(truth, h), eta_samples[static_cast<std::size_t>(h - 1)]));
  return out;
}

inline std::vector<std::vector<int>> draw_pairs(const PairSampler& eta, std::size_t n, std::uint64_t seed) {
  std::vector<std::vector<int>> out;
  for (int h = 1; h <= eta.horizon(); ++h) {
    Rng rng = make_rng(derive_seed(seed, {static_cast<std::uint64_t>(h)}));
    std::vector<int> v(n);
    for (auto& p : v) p = eta.sample(h, rng);
    out.push_back(std::move(v));
  }
  return out;
}

/// The eta-weighted squared error computed exactly on the finite support.
inline std::vector<double> reward_mse_exact(const LearnedReward& learned, const TabularMdp& truth,
                                            const PairSampler& eta) {
  std::vector<double> out;
  for (int h = 1; h <= truth.horizon(); ++h)
    out.push_back(eta.step(h).dot((learned.table(h) - flatten_rewards(truth, h)).cwiseAbs2()));
  return out;
}

}  // namespace pbfqe
